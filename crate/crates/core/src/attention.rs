//! Causal multi-head scaled dot-product self-attention.
//!
//! Two execution paths share the same kernels: a parallel one over a whole
//! sequence (recorded on a [`Graph`] for training) and an incremental one that
//! appends one key/value pair per step to a [`LayerState`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::AffineParams;
use crate::tensor::{self, Tensor};

/// Additive mask for key positions after the query.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: AffineParams,
    pub key: AffineParams,
    pub value: AffineParams,
    /// Projection back onto the residual path.
    pub output: AffineParams,
}

impl AttentionParams {
    pub fn init<R: Rng>(rng: &mut R, d_res: usize) -> Self {
        AttentionParams {
            query: AffineParams::init(rng, d_res, d_res, true),
            key: AffineParams::init(rng, d_res, d_res, true),
            value: AffineParams::init(rng, d_res, d_res, true),
            output: AffineParams::init(rng, d_res, d_res, true),
        }
    }

    pub fn d_res(&self) -> usize {
        self.query.d_in()
    }
}

/// Append-only cache of the keys and values seen by one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl LayerState {
    pub fn new(dim: usize) -> Self {
        LayerState {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.keys.clone()).expect("t × d")
    }

    pub fn values(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.values.clone()).expect("t × d")
    }

    pub fn key(&self, t: usize) -> &[f64] {
        &self.keys[t * self.dim..(t + 1) * self.dim]
    }

    pub fn value(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    fn push(&mut self, k: &[f64], v: &[f64]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
    }
}

/// `[H × T × T]` attention weights, query position by key position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Tensor,
}

impl AttentionWeights {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let t = self.len();
        let start = (head * t + query) * t;
        &self.weights.data()[start..start + t]
    }
}

pub(crate) fn head_dim(d_res: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d_res.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "residual dimension {d_res} is not divisible by {heads} heads"
        )));
    }
    Ok(d_res / heads)
}

pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(
        vec![len, len],
        |i| {
            if i % len > i / len {
                MASK_VALUE
            } else {
                0.0
            }
        },
    )
}

/// Graph handles for one [`AffineParams`].
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl AffineVars {
    pub fn bind(g: &mut Graph, p: &AffineParams, trainable: bool) -> Self {
        AffineVars {
            weight: g.leaf(p.weight.clone().with_requires_grad(trainable)),
            bias: p
                .bias
                .as_ref()
                .map(|b| g.leaf(b.clone().with_requires_grad(trainable))),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: AffineVars,
    pub key: AffineVars,
    pub value: AffineVars,
    pub output: AffineVars,
}

impl AttentionVars {
    pub fn bind(g: &mut Graph, p: &AttentionParams, trainable: bool) -> Self {
        AttentionVars {
            query: AffineVars::bind(g, &p.query, trainable),
            key: AffineVars::bind(g, &p.key, trainable),
            value: AffineVars::bind(g, &p.value, trainable),
            output: AffineVars::bind(g, &p.output, trainable),
        }
    }
}

/// Parallel causal self-attention over an already-normalized `[T × d_res]`
/// input. Returns `W_0 · concat_h(softmax(q kᵀ/√d_h + mask) v)` and the
/// per-head weights.
pub fn self_attention_graph(
    g: &mut Graph,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<(Var, AttentionWeights)> {
    let (len, d_res) = g.value(x).dims2()?;
    let dh = head_dim(d_res, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = p.query.apply(g, x)?;
    let k = p.key.apply(g, x)?;
    let v = p.value.apply(g, x)?;
    let mask = causal_mask(len);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads * len * len);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let scores = g.add_const(scores, &mask)?;
        let w = g.softmax(scores, 1)?;
        weights.extend_from_slice(g.value(w).data());
        outs.push(g.matmul(w, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    let out = p.output.apply(g, cat)?;
    Ok((
        out,
        AttentionWeights {
            weights: Tensor::new(vec![heads, len, len], weights)?,
        },
    ))
}

/// Tensor-level wrapper around [`self_attention_graph`].
pub fn self_attention_parallel(
    x: &Tensor,
    params: &AttentionParams,
    heads: usize,
) -> Result<(Tensor, AttentionWeights)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = AttentionVars::bind(&mut g, params, false);
    let (out, w) = self_attention_graph(&mut g, xv, &vars, heads)?;
    Ok((g.take_value(out), w))
}

/// One incremental step: appends `(k_t, v_t)` to `state` and attends `q_t`
/// over every stored key. Returns the projected output and the `[H × (t+1)]`
/// weight rows.
pub fn self_attention_step(
    x: &[f64],
    state: &mut LayerState,
    params: &AttentionParams,
    heads: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d_res = params.d_res();
    if x.len() != d_res || state.dim != d_res {
        return Err(Error::shape(
            "self_attention_step",
            &[x.len()],
            &[d_res, state.dim],
        ));
    }
    let dh = head_dim(d_res, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = params.query.apply(x);
    let k = params.key.apply(x);
    let v = params.value.apply(x);
    state.push(&k, &v);
    let len = state.len();
    let mut cat = vec![0.0; d_res];
    let mut rows = Vec::with_capacity(heads * len);
    let mut scores = vec![0.0; len];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = tensor::dot(&q[cols.clone()], &state.key(j)[cols.clone()]) * scale;
        }
        tensor::softmax_in_place(&mut scores);
        let out = &mut cat[cols.clone()];
        for (j, w) in scores.iter().enumerate() {
            for (o, vv) in out.iter_mut().zip(&state.value(j)[cols.clone()]) {
                *o += w * vv;
            }
        }
        rows.extend_from_slice(&scores);
    }
    Ok((params.output.apply(&cat), rows))
}
