//! The full autoregressive Transformer language model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    self, head_dim, AffineVars, AttentionParams, AttentionVars, AttentionWeights, LayerState,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Activation, AffineParams, EmbeddingTable, LayerNormParams, PeMode};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_ff: usize,
    pub d_res: usize,
    pub heads: usize,
    pub d_emb: usize,
    pub vocab_size: usize,
    pub pe_mode: PeMode,
    pub activation: Activation,
    pub tied_layers: bool,
    pub bottleneck_dim: Option<usize>,
}

impl ModelConfig {
    pub const KEYS: [&'static str; 10] = [
        "layers",
        "d_ff",
        "d_res",
        "heads",
        "d_emb",
        "vocab_size",
        "pe_mode",
        "activation",
        "tied_layers",
        "bottleneck_dim",
    ];

    /// `(L, d_ff, d_res, H)` with `d_emb = d_res`, sinusoidal PE and ReLU.
    pub fn new(layers: usize, d_ff: usize, d_res: usize, heads: usize, vocab_size: usize) -> Self {
        ModelConfig {
            layers,
            d_ff,
            d_res,
            heads,
            d_emb: d_res,
            vocab_size,
            pe_mode: PeMode::Sinusoidal,
            activation: Activation::Relu,
            tied_layers: false,
            bottleneck_dim: None,
        }
    }

    pub fn with_pe(mut self, pe_mode: PeMode) -> Self {
        self.pe_mode = pe_mode;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_d_emb(mut self, d_emb: usize) -> Self {
        self.d_emb = d_emb;
        self
    }

    pub fn with_tied_layers(mut self, tied: bool) -> Self {
        self.tied_layers = tied;
        self
    }

    pub fn with_bottleneck(mut self, dim: Option<usize>) -> Self {
        self.bottleneck_dim = dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_ff", self.d_ff),
            ("d_res", self.d_res),
            ("heads", self.heads),
            ("d_emb", self.d_emb),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.bottleneck_dim == Some(0) {
            return Err(Error::Config("bottleneck_dim must be at least 1".into()));
        }
        head_dim(self.d_res, self.heads)?;
        if self.pe_mode == PeMode::Sinusoidal && !self.d_emb.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinusoidal positional encoding needs an even d_emb, got {}",
                self.d_emb
            )));
        }
        Ok(())
    }

    /// Number of distinct layer parameter sets.
    pub fn stored_layers(&self) -> usize {
        if self.tied_layers {
            self.layers.min(1)
        } else {
            self.layers
        }
    }

    /// Name of the first field where `self` and `other` differ.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        let a = self.to_map();
        let b = other.to_map();
        ModelConfig::KEYS.into_iter().find(|k| a.get(*k) != b.get(*k))
    }

    fn to_map(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("layers", self.layers.to_string());
        m.insert("d_ff", self.d_ff.to_string());
        m.insert("d_res", self.d_res.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("d_emb", self.d_emb.to_string());
        m.insert("vocab_size", self.vocab_size.to_string());
        m.insert("pe_mode", self.pe_mode.to_string());
        m.insert("activation", self.activation.to_string());
        m.insert("tied_layers", self.tied_layers.to_string());
        m.insert(
            "bottleneck_dim",
            self.bottleneck_dim.map_or("none".to_string(), |d| d.to_string()),
        );
        m
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "layers" => self.layers = num(value)?,
            "d_ff" => self.d_ff = num(value)?,
            "d_res" => self.d_res = num(value)?,
            "heads" => self.heads = num(value)?,
            "d_emb" => self.d_emb = num(value)?,
            "vocab_size" => self.vocab_size = num(value)?,
            "pe_mode" => self.pe_mode = value.trim().parse()?,
            "activation" => self.activation = value.trim().parse()?,
            "tied_layers" => {
                self.tied_layers = value.trim().parse().map_err(|_| {
                    Error::Config(format!("`tied_layers` expects true or false, got `{value}`"))
                })?
            }
            "bottleneck_dim" => {
                self.bottleneck_dim = match value.trim() {
                    "none" | "" => None,
                    v => Some(num(v)?),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown model key `{other}`; valid keys: {}",
                    ModelConfig::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(2, 64, 32, 4, 32)
    }
}

/// Flat `key=value` lines in [`ModelConfig::KEYS`] order.
impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.to_map();
        for k in ModelConfig::KEYS {
            writeln!(f, "{k}={}", m[k])?;
        }
        Ok(())
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in s.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exact parameter count for `config`, without allocating the model.
pub fn param_count(config: &ModelConfig) -> usize {
    let c = config;
    let affine = |d_in: usize, d_out: usize, bias: bool| d_in * d_out + if bias { d_out } else { 0 };
    let ff_hidden = c.activation.expansion(c.d_ff);
    let per_layer = 4 * affine(c.d_res, c.d_res, true)
        + affine(c.d_res, ff_hidden, true)
        + affine(c.d_ff, c.d_res, true)
        + 2 * 2 * c.d_res;
    let input_proj = if c.d_emb != c.d_res {
        affine(c.d_emb, c.d_res, false)
    } else {
        0
    };
    let (bottleneck, out_in) = match c.bottleneck_dim {
        Some(b) => (affine(c.d_res, b, true), b),
        None => (0, c.d_res),
    };
    c.vocab_size * c.d_emb
        + input_proj
        + c.stored_layers() * per_layer
        + 2 * c.d_res
        + bottleneck
        + affine(out_in, c.vocab_size, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: LayerNormParams,
    pub attention: AttentionParams,
    pub ff_norm: LayerNormParams,
    pub ff_in: AffineParams,
    pub ff_out: AffineParams,
}

impl LayerParams {
    fn init(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Self {
        LayerParams {
            attn_norm: LayerNormParams::new(c.d_res),
            attention: AttentionParams::init(rng, c.d_res),
            ff_norm: LayerNormParams::new(c.d_res),
            ff_in: AffineParams::init(rng, c.d_res, c.activation.expansion(c.d_ff), true),
            ff_out: AffineParams::init(rng, c.d_ff, c.d_res, true),
        }
    }

    fn feed_forward(&self, m: &[f64], act: Activation) -> Result<Vec<f64>> {
        let h = self.ff_in.apply(m);
        let h = nn::activation(&h, act)?;
        Ok(self.ff_out.apply(&h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLM {
    config: ModelConfig,
    pub embedding: EmbeddingTable,
    /// `[d_res × d_emb]`, present when `d_emb != d_res`.
    pub input_proj: Option<Tensor>,
    /// One entry per layer, or a single shared entry when layers are tied.
    pub layers: Vec<LayerParams>,
    pub final_norm: LayerNormParams,
    pub bottleneck: Option<AffineParams>,
    pub output: AffineParams,
}

/// Per-layer key/value caches plus the number of consumed positions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<LayerState>,
    pub position: usize,
}

/// Output of [`TransformerLM::forward_parallel`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T × V]`
    pub logits: Tensor,
    /// One entry per layer.
    pub attention: Vec<AttentionWeights>,
}

impl TransformerLM {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let embedding = EmbeddingTable::init(&mut rng, c.vocab_size, c.d_emb);
        let input_proj =
            (c.d_emb != c.d_res).then(|| AffineParams::init(&mut rng, c.d_emb, c.d_res, false).weight);
        let layers = (0..c.stored_layers())
            .map(|_| LayerParams::init(&mut rng, c))
            .collect();
        let final_norm = LayerNormParams::new(c.d_res);
        let bottleneck = c
            .bottleneck_dim
            .map(|b| AffineParams::init(&mut rng, c.d_res, b, true));
        let output = AffineParams::init(&mut rng, c.bottleneck_dim.unwrap_or(c.d_res), c.vocab_size, true);
        Ok(TransformerLM {
            config,
            embedding,
            input_proj,
            layers,
            final_norm,
            bottleneck,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn layer(&self, l: usize) -> &LayerParams {
        if self.config.tied_layers {
            &self.layers[0]
        } else {
            &self.layers[l]
        }
    }

    /// Named parameters in a fixed order shared by binding, gradients and
    /// checkpoints.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        fn affine<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, a: &'a AffineParams) {
            out.push((format!("{name}.weight"), &a.weight));
            if let Some(b) = &a.bias {
                out.push((format!("{name}.bias"), b));
            }
        }
        let mut out: Vec<(String, &Tensor)> = vec![("embedding".into(), &self.embedding.table)];
        if let Some(p) = &self.input_proj {
            out.push(("input_proj".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.attn_norm.gain"), &l.attn_norm.gain));
            out.push((format!("layer.{i}.attn_norm.bias"), &l.attn_norm.bias));
            affine(&mut out, format!("layer.{i}.attn.query"), &l.attention.query);
            affine(&mut out, format!("layer.{i}.attn.key"), &l.attention.key);
            affine(&mut out, format!("layer.{i}.attn.value"), &l.attention.value);
            affine(&mut out, format!("layer.{i}.attn.output"), &l.attention.output);
            out.push((format!("layer.{i}.ff_norm.gain"), &l.ff_norm.gain));
            out.push((format!("layer.{i}.ff_norm.bias"), &l.ff_norm.bias));
            affine(&mut out, format!("layer.{i}.ff_in"), &l.ff_in);
            affine(&mut out, format!("layer.{i}.ff_out"), &l.ff_out);
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        if let Some(b) = &self.bottleneck {
            affine(&mut out, "bottleneck".into(), b);
        }
        affine(&mut out, "output".into(), &self.output);
        out
    }

    /// Mutable view in the same order as [`TransformerLM::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        fn affine<'a>(out: &mut Vec<&'a mut Tensor>, a: &'a mut AffineParams) {
            out.push(&mut a.weight);
            if let Some(b) = &mut a.bias {
                out.push(b);
            }
        }
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding.table];
        if let Some(p) = &mut self.input_proj {
            out.push(p);
        }
        for l in &mut self.layers {
            out.push(&mut l.attn_norm.gain);
            out.push(&mut l.attn_norm.bias);
            affine(&mut out, &mut l.attention.query);
            affine(&mut out, &mut l.attention.key);
            affine(&mut out, &mut l.attention.value);
            affine(&mut out, &mut l.attention.output);
            out.push(&mut l.ff_norm.gain);
            out.push(&mut l.ff_norm.bias);
            affine(&mut out, &mut l.ff_in);
            affine(&mut out, &mut l.ff_out);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        if let Some(b) = &mut self.bottleneck {
            affine(&mut out, b);
        }
        affine(&mut out, &mut self.output);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Records all parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let embedding = g.leaf(self.embedding.table.clone().with_requires_grad(trainable));
        let input_proj = self
            .input_proj
            .as_ref()
            .map(|p| g.leaf(p.clone().with_requires_grad(trainable)));
        let norm = |g: &mut Graph, p: &LayerNormParams| NormVars {
            gain: g.leaf(p.gain.clone().with_requires_grad(trainable)),
            bias: g.leaf(p.bias.clone().with_requires_grad(trainable)),
            eps: p.epsilon,
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let attn_norm = norm(g, &l.attn_norm);
                let attention = AttentionVars::bind(g, &l.attention, trainable);
                let ff_norm = norm(g, &l.ff_norm);
                let ff_in = AffineVars::bind(g, &l.ff_in, trainable);
                let ff_out = AffineVars::bind(g, &l.ff_out, trainable);
                LayerVars {
                    attn_norm,
                    attention,
                    ff_norm,
                    ff_in,
                    ff_out,
                }
            })
            .collect();
        let final_norm = norm(g, &self.final_norm);
        let bottleneck = self
            .bottleneck
            .as_ref()
            .map(|b| AffineVars::bind(g, b, trainable));
        let output = AffineVars::bind(g, &self.output, trainable);
        ModelVars {
            embedding,
            input_proj,
            layers,
            final_norm,
            bottleneck,
            output,
        }
    }

    /// Records the forward pass over `tokens` on `g`, returning the
    /// `[T × V]` logits node and per-layer attention weights.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: &[usize],
    ) -> Result<(Var, Vec<AttentionWeights>)> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward on an empty sequence".into()));
        }
        let c = &self.config;
        let mut z = nn::embed(g, tokens, vars.embedding, c.pe_mode)?;
        if let Some(p) = vars.input_proj {
            z = g.linear(z, p, None)?;
        }
        let mut weights = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let lv = if c.tied_layers {
                &vars.layers[0]
            } else {
                &vars.layers[l]
            };
            let x = g.layer_norm(z, lv.attn_norm.gain, lv.attn_norm.bias, lv.attn_norm.eps)?;
            let (a, w) = attention::self_attention_graph(g, x, &lv.attention, c.heads)?;
            weights.push(w);
            let y = g.add(z, a)?;
            let m = g.layer_norm(y, lv.ff_norm.gain, lv.ff_norm.bias, lv.ff_norm.eps)?;
            let h = lv.ff_in.apply(g, m)?;
            let h = nn::activation_graph(g, h, c.activation)?;
            let f = lv.ff_out.apply(g, h)?;
            z = g.add(y, f)?;
        }
        let mut out = g.layer_norm(z, vars.final_norm.gain, vars.final_norm.bias, vars.final_norm.eps)?;
        if let Some(b) = &vars.bottleneck {
            out = b.apply(g, out)?;
        }
        let logits = vars.output.apply(g, out)?;
        Ok((logits, weights))
    }

    /// Parallel forward over a whole sequence without recording gradients.
    pub fn forward_parallel(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (logits, attention) = self.forward_graph(&mut g, &vars, tokens)?;
        Ok(ForwardOutput {
            logits: g.take_value(logits),
            attention,
        })
    }

    /// Row-wise log-softmax of [`TransformerLM::forward_parallel`] logits.
    pub fn log_probs_parallel(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut logits = self.forward_parallel(tokens)?.logits;
        let v = self.vocab_size();
        for row in logits.data_mut().chunks_mut(v) {
            tensor::log_softmax_in_place(row);
        }
        Ok(logits)
    }

    pub fn init_state(&self) -> DecoderState {
        DecoderState {
            layers: (0..self.config.layers)
                .map(|_| LayerState::new(self.config.d_res))
                .collect(),
            position: 0,
        }
    }

    /// Consumes `token` at the state's position and returns the log-probability
    /// vector for the next token together with the advanced state.
    pub fn score_step(&self, state: &DecoderState, token: usize) -> Result<(Vec<f64>, DecoderState)> {
        let mut next = state.clone();
        let lp = self.advance(&mut next, token)?;
        Ok((lp, next))
    }

    /// In-place variant of [`TransformerLM::score_step`].
    pub fn advance(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        Ok(self.advance_with_weights(state, token)?.0)
    }

    /// Like [`TransformerLM::advance`], also returning each layer's `[H × (t+1)]`
    /// attention row.
    pub fn advance_with_weights(
        &self,
        state: &mut DecoderState,
        token: usize,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let c = &self.config;
        if state.layers.len() != c.layers {
            return Err(Error::Contract(format!(
                "decoder state has {} layers, model has {}",
                state.layers.len(),
                c.layers
            )));
        }
        let mut z = self.embedding.lookup(token)?.to_vec();
        if c.pe_mode == PeMode::Sinusoidal {
            let pe = nn::positional_encoding(state.position, c.d_emb);
            z.iter_mut().zip(&pe).for_each(|(a, b)| *a += b);
        }
        if let Some(p) = &self.input_proj {
            let mut out = vec![0.0; c.d_res];
            tensor::matmul_nt(&z, p.data(), &mut out, 1, c.d_emb, c.d_res);
            z = out;
        }
        let mut rows = Vec::with_capacity(c.layers);
        for (l, ls) in state.layers.iter_mut().enumerate() {
            let lp = self.layer(l);
            let x = nn::layer_norm(&z, &lp.attn_norm);
            let (a, w) = attention::self_attention_step(&x, ls, &lp.attention, c.heads)?;
            rows.push(w);
            let y: Vec<f64> = z.iter().zip(&a).map(|(p, q)| p + q).collect();
            let m = nn::layer_norm(&y, &lp.ff_norm);
            let f = lp.feed_forward(&m, c.activation)?;
            z = y.iter().zip(&f).map(|(p, q)| p + q).collect();
        }
        let mut out = nn::layer_norm(&z, &self.final_norm);
        if let Some(b) = &self.bottleneck {
            out = b.apply(&out);
        }
        let mut logits = self.output.apply(&out);
        tensor::log_softmax_in_place(&mut logits);
        state.position += 1;
        Ok((logits, rows))
    }

    /// Log-probability of `tokens[1..]` given the prefix, state reset at
    /// the start. The first token is conditioning only.
    pub fn sequence_log_prob(&self, tokens: &[usize]) -> Result<f64> {
        let mut state = self.init_state();
        let mut total = 0.0;
        for w in tokens.windows(2) {
            let lp = self.advance(&mut state, w[0])?;
            total += lp[w[1]];
        }
        Ok(total)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub attn_norm: NormVars,
    pub attention: AttentionVars,
    pub ff_norm: NormVars,
    pub ff_in: AffineVars,
    pub ff_out: AffineVars,
}

/// Graph handles mirroring [`TransformerLM`]'s parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub input_proj: Option<Var>,
    pub layers: Vec<LayerVars>,
    pub final_norm: NormVars,
    pub bottleneck: Option<AffineVars>,
    pub output: AffineVars,
}

impl ModelVars {
    /// All handles in [`TransformerLM::parameters`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        out.extend(self.input_proj);
        for l in &self.layers {
            out.extend([l.attn_norm.gain, l.attn_norm.bias]);
            for a in [
                l.attention.query,
                l.attention.key,
                l.attention.value,
                l.attention.output,
            ] {
                out.extend(a.vars());
            }
            out.extend([l.ff_norm.gain, l.ff_norm.bias]);
            out.extend(l.ff_in.vars());
            out.extend(l.ff_out.vars());
        }
        out.extend([self.final_norm.gain, self.final_norm.bias]);
        if let Some(b) = &self.bottleneck {
            out.extend(b.vars());
        }
        out.extend(self.output.vars());
        out
    }

    /// Adds the gradients computed on `g` into the model's parameter slots.
    pub fn accumulate_into(&self, g: &Graph, model: &mut TransformerLM) {
        for (var, param) in self.all().into_iter().zip(model.parameters_mut()) {
            if let Some(grad) = g.grad(var) {
                param.accumulate_grad(grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig::new(layers, 16, 8, 2, 11)
    }

    #[test]
    fn allocated_count_matches_formula() {
        for cfg in [
            tiny(0),
            tiny(2),
            tiny(3).with_activation(Activation::Glu),
            tiny(2).with_d_emb(6),
            tiny(4).with_tied_layers(true),
            tiny(1).with_bottleneck(Some(20)),
        ] {
            let m = TransformerLM::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.num_parameters(), param_count(&cfg), "{cfg}");
            assert_eq!(m.parameters().len(), m.bind(&mut Graph::new(), false).all().len());
        }
    }

    #[test]
    fn tied_count_independent_of_depth() {
        let base = ModelConfig::new(3, 8192, 1024, 16, 200_000).with_tied_layers(true);
        let counts: Vec<usize> = [3, 6, 12]
            .iter()
            .map(|&l| {
                param_count(&ModelConfig {
                    layers: l,
                    ..base.clone()
                })
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = tiny(3)
            .with_pe(PeMode::None)
            .with_activation(Activation::Gelu)
            .with_bottleneck(Some(12));
        let parsed: ModelConfig = cfg.to_string().parse().unwrap();
        assert_eq!(parsed, cfg);
        let err = "layers=2\nwidth=3\n".parse::<ModelConfig>().unwrap_err();
        assert!(err.to_string().contains("valid keys"));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TransformerLM::new(ModelConfig::new(1, 8, 6, 4, 5), 0).is_err());
        assert!(TransformerLM::new(ModelConfig::new(1, 8, 6, 3, 5).with_d_emb(5), 0).is_err());
        assert!(TransformerLM::new(
            ModelConfig::new(1, 8, 6, 3, 5)
                .with_d_emb(5)
                .with_pe(PeMode::None),
            0
        )
        .is_ok());
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let m = TransformerLM::new(tiny(1), 0).unwrap();
        assert!(matches!(m.forward_parallel(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_layers_depend_only_on_current_token() {
        let m = TransformerLM::new(tiny(0).with_pe(PeMode::None), 3).unwrap();
        let a = m.forward_parallel(&[1, 2, 3]).unwrap().logits;
        let b = m.forward_parallel(&[4, 5, 3]).unwrap().logits;
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn stepwise_matches_parallel() {
        for cfg in [
            tiny(2),
            tiny(3).with_pe(PeMode::None).with_activation(Activation::Gelu),
            tiny(2).with_d_emb(6).with_activation(Activation::Glu),
            tiny(3).with_tied_layers(true).with_bottleneck(Some(5)),
        ] {
            let m = TransformerLM::new(cfg, 5).unwrap();
            let tokens = [0, 3, 7, 7, 1, 10, 2];
            let par = m.log_probs_parallel(&tokens).unwrap();
            let mut state = m.init_state();
            for (t, &tok) in tokens.iter().enumerate() {
                let lp = m.advance(&mut state, tok).unwrap();
                assert!(tensor::max_abs_diff(&lp, par.row(t)) < 1e-10);
                assert!(tensor::log_sum_exp(&lp).abs() < 1e-9);
            }
            assert_eq!(state.position, tokens.len());
            assert!(state.layers.iter().all(|l| l.len() == tokens.len()));
        }
    }

    #[test]
    fn shared_prefix_shares_state() {
        let m = TransformerLM::new(tiny(2), 6).unwrap();
        let s0 = m.init_state();
        let (_, a1) = m.score_step(&s0, 1).unwrap();
        let (_, b1) = m.score_step(&s0, 1).unwrap();
        assert_eq!(a1, b1);
        let (_, a2) = m.score_step(&a1, 4).unwrap();
        let (_, b2) = m.score_step(&b1, 5).unwrap();
        for (la, lb) in a2.layers.iter().zip(&b2.layers) {
            assert_eq!(la.key(0), lb.key(0));
            assert_ne!(la.key(1), lb.key(1));
        }
    }

    #[test]
    fn tied_single_layer_equals_untied() {
        let untied = TransformerLM::new(tiny(1), 9).unwrap();
        let mut tied_cfg = tiny(1);
        tied_cfg.tied_layers = true;
        let mut tied = TransformerLM::new(tied_cfg, 1).unwrap();
        tied.embedding = untied.embedding.clone();
        tied.layers = untied.layers.clone();
        tied.final_norm = untied.final_norm.clone();
        tied.output = untied.output.clone();
        let tokens = [2, 5, 1, 9];
        assert_eq!(
            tied.forward_parallel(&tokens).unwrap().logits,
            untied.forward_parallel(&tokens).unwrap().logits
        );
    }
}
