//! Layer normalization, affine maps, activations, token embedding,
//! sinusoidal positional encoding and the cross-entropy objective.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::tensor::{self, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Gelu,
    Glu,
}

impl Activation {
    /// Width of the first feed-forward projection for `d_ff` hidden units.
    /// GLU needs a value half and a gate half.
    pub fn expansion(self, d_ff: usize) -> usize {
        match self {
            Activation::Glu => 2 * d_ff,
            _ => d_ff,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Glu => "glu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "glu" => Ok(Activation::Glu),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (expected relu, gelu or glu)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeMode {
    Sinusoidal,
    None,
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMode::Sinusoidal => "sinusoidal",
            PeMode::None => "none",
        })
    }
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sinusoidal" | "sin" => Ok(PeMode::Sinusoidal),
            "none" => Ok(PeMode::None),
            other => Err(Error::Config(format!(
                "unknown positional encoding `{other}` (expected sinusoidal or none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(vec![d], 1.0),
            bias: Tensor::zeros(vec![d]),
            epsilon: LAYER_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    /// `[out × in]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl AffineParams {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, with_bias: bool) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = Tensor::from_fn(vec![d_out, d_in], |_| rng.gen_range(-limit..=limit));
        AffineParams {
            weight,
            bias: with_bias.then(|| Tensor::zeros(vec![d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `W x + b` for a single vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_out()];
        tensor::matmul_nt(x, self.weight.data(), &mut out, 1, self.d_in(), self.d_out());
        if let Some(b) = &self.bias {
            out.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    /// `[V × d_emb]`
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn init<R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Self {
        let limit = (6.0 / (vocab + dim) as f64).sqrt();
        EmbeddingTable {
            table: Tensor::from_fn(vec![vocab, dim], |_| rng.gen_range(-limit..=limit)),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn lookup(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab_size() {
            return Err(Error::Vocabulary {
                id,
                size: self.vocab_size(),
            });
        }
        Ok(self.table.row(id))
    }
}

pub(crate) fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Layer normalization of a single vector with population variance.
pub fn layer_norm(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let (mean, var) = mean_var(x);
    let inv = 1.0 / (var + p.epsilon).sqrt();
    x.iter()
        .zip(p.gain.data().iter().zip(p.bias.data()))
        .map(|(v, (g, b))| g * ((v - mean) * inv) + b)
        .collect()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// `x · Φ(x)` with the exact normal CDF.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn activation(x: &[f64], kind: Activation) -> Result<Vec<f64>> {
    match kind {
        Activation::Relu => Ok(x.iter().map(|&v| relu(v)).collect()),
        Activation::Gelu => Ok(x.iter().map(|&v| gelu(v)).collect()),
        Activation::Glu => {
            if !x.len().is_multiple_of(2) {
                return Err(Error::Contract(format!(
                    "GLU needs an even width, got {}",
                    x.len()
                )));
            }
            let (a, b) = x.split_at(x.len() / 2);
            Ok(a.iter().zip(b).map(|(a, b)| a * sigmoid(*b)).collect())
        }
    }
}

pub(crate) fn activation_graph(g: &mut Graph, x: Var, kind: Activation) -> Result<Var> {
    match kind {
        Activation::Relu => Ok(g.relu(x)),
        Activation::Gelu => Ok(g.gelu(x)),
        Activation::Glu => g.glu(x),
    }
}

/// Sinusoidal position vector: `sin(t / 10000^(2i/d))` at `2i`, `cos` at `2i+1`.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    assert!(
        d.is_multiple_of(2),
        "positional encoding dimension must be even, got {d}"
    );
    let mut pe = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        pe[2 * i] = angle.sin();
        pe[2 * i + 1] = angle.cos();
    }
    pe
}

/// `[T × d]` matrix of positional encodings for positions `0..T`.
pub fn positional_encoding_matrix(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        data.extend(positional_encoding(t, d));
    }
    Tensor::new(vec![len, d], data).expect("len × d")
}

/// Embeds `tokens` into a `[T × d_emb]` node, adding positional encodings
/// when `pe_mode` is sinusoidal.
pub fn embed(g: &mut Graph, tokens: &[usize], table: Var, pe_mode: PeMode) -> Result<Var> {
    let rows = g.gather(table, tokens)?;
    match pe_mode {
        PeMode::None => Ok(rows),
        PeMode::Sinusoidal => {
            let d = g.value(table).shape()[1];
            if !d.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "sinusoidal positional encoding needs an even embedding size, got {d}"
                )));
            }
            let pe = positional_encoding_matrix(tokens.len(), d);
            g.add_const(rows, &pe)
        }
    }
}

/// Mean per-token cross entropy as a graph node.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
    g.cross_entropy(logits, &t, Reduction::Mean)
}
