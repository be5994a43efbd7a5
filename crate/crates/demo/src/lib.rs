//! Browser bindings: sinusoidal positional encodings, attention maps of a
//! small random model with and without positions, and parameter counts.

use wasm_bindgen::prelude::*;

use tlm::nn::{positional_encoding_matrix, PeMode};
use tlm::text::BOS;
use tlm::{diagonality_report, dump_attention, ModelConfig, TransformerLM};

const VOCAB: usize = 64;
const MAX_LEN: usize = 48;

fn encodings(len: usize, dim: usize) -> Result<Vec<f64>, String> {
    if dim == 0 || !dim.is_multiple_of(2) || dim > 1024 || len > 512 {
        return Err(format!(
            "need an even dimension up to 1024 and at most 512 positions, got {len} x {dim}"
        ));
    }
    Ok(positional_encoding_matrix(len, dim).data().to_vec())
}

/// Row-major `len × dim` sinusoidal encoding matrix.
#[wasm_bindgen(js_name = peMatrix)]
pub fn pe_matrix(len: usize, dim: usize) -> Result<Vec<f64>, JsError> {
    encodings(len, dim).map_err(|e| JsError::new(&e))
}

fn count(
    layers: usize,
    d_ff: usize,
    d_res: usize,
    heads: usize,
    vocab: usize,
    d_emb: usize,
) -> Result<f64, String> {
    let cfg = ModelConfig::new(layers, d_ff, d_res, heads, vocab).with_d_emb(d_emb);
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(tlm::param_count(&cfg) as f64)
}

#[wasm_bindgen(js_name = paramCount)]
pub fn param_count(
    layers: usize,
    d_ff: usize,
    d_res: usize,
    heads: usize,
    vocab: usize,
    d_emb: usize,
) -> Result<f64, JsError> {
    count(layers, d_ff, d_res, heads, vocab, d_emb).map_err(|e| JsError::new(&e))
}

/// Attention weights of one layer for one sentence.
#[wasm_bindgen]
pub struct AttentionMap {
    tokens: Vec<String>,
    heads: usize,
    weights: Vec<f64>,
    diagonal: Vec<f64>,
    uniform_diagonal: f64,
}

#[wasm_bindgen]
impl AttentionMap {
    /// Input labels, `<bos>` first.
    #[wasm_bindgen(getter)]
    pub fn tokens(&self) -> Vec<String> {
        self.tokens.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn heads(&self) -> usize {
        self.heads
    }

    #[wasm_bindgen(getter)]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[wasm_bindgen(getter, js_name = isEmpty)]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Flattened `[head][query][key]`.
    #[wasm_bindgen(getter)]
    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone()
    }

    /// Mean weight on key = query, per head.
    #[wasm_bindgen(getter)]
    pub fn diagonal(&self) -> Vec<f64> {
        self.diagonal.clone()
    }

    /// Diagonal mass of uniform causal attention over the same length.
    #[wasm_bindgen(getter, js_name = uniformDiagonal)]
    pub fn uniform_diagonal(&self) -> f64 {
        self.uniform_diagonal
    }
}

/// One random model, run with and without positional encodings on the same
/// weights.
#[wasm_bindgen]
pub struct Explorer {
    positional: TransformerLM,
    plain: TransformerLM,
}

#[wasm_bindgen]
impl Explorer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, layers: usize, heads: usize) -> Result<Explorer, JsError> {
        Explorer::build(seed, layers, heads).map_err(|e| JsError::new(&e))
    }

    pub fn attention(&self, sentence: &str, positional: bool, layer: usize) -> Result<AttentionMap, JsError> {
        self.map(sentence, positional, layer)
            .map_err(|e| JsError::new(&e))
    }

    /// Maximum absolute difference between the final-position
    /// log-probabilities of `a` and `b`.
    #[wasm_bindgen(js_name = lastRowDistance)]
    pub fn last_row_distance(&self, a: &str, b: &str, positional: bool) -> Result<f64, JsError> {
        self.distance(a, b, positional).map_err(|e| JsError::new(&e))
    }
}

impl Explorer {
    fn build(seed: u32, layers: usize, heads: usize) -> Result<Explorer, String> {
        let layers = layers.clamp(1, 6);
        let heads = heads.clamp(1, 8);
        let cfg = ModelConfig::new(layers, 64, 8 * heads, heads, VOCAB);
        // Positional encodings carry no parameters, so one seed gives both
        // variants the same weights.
        let positional = TransformerLM::new(cfg.clone(), seed as u64).map_err(|e| e.to_string())?;
        let plain = TransformerLM::new(cfg.with_pe(PeMode::None), seed as u64).map_err(|e| e.to_string())?;
        Ok(Explorer { positional, plain })
    }

    fn model(&self, positional: bool) -> &TransformerLM {
        if positional {
            &self.positional
        } else {
            &self.plain
        }
    }

    fn map(&self, sentence: &str, positional: bool, layer: usize) -> Result<AttentionMap, String> {
        let (ids, tokens) = encode(sentence);
        let model = self.model(positional);
        let dump = dump_attention(model, &ids, tokens.clone()).map_err(|e| e.to_string())?;
        let w = dump
            .layers
            .get(layer)
            .ok_or_else(|| format!("layer {layer} out of range (model has {})", dump.layers.len()))?;
        let report = diagonality_report(&dump, 1);
        Ok(AttentionMap {
            tokens,
            heads: w.heads(),
            weights: w.weights.data().to_vec(),
            diagonal: report.heads[layer].iter().map(|h| h.diagonal_mass).collect(),
            uniform_diagonal: report.uniform_diagonal,
        })
    }

    fn distance(&self, a: &str, b: &str, positional: bool) -> Result<f64, String> {
        let model = self.model(positional);
        let last = |s: &str| -> Result<Vec<f64>, String> {
            let (ids, _) = encode(s);
            let lp = model.log_probs_parallel(&ids).map_err(|e| e.to_string())?;
            Ok(lp.row(ids.len() - 1).to_vec())
        };
        let (x, y) = (last(a)?, last(b)?);
        Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
    }
}

/// `<bos>` followed by one id per word. Ids come from an FNV-1a hash, so a
/// word keeps its id across sentences.
fn encode(sentence: &str) -> (Vec<usize>, Vec<String>) {
    let mut ids = vec![BOS];
    let mut tokens = vec!["<bos>".to_string()];
    for w in sentence.split_whitespace().take(MAX_LEN - 1) {
        let h = w.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        ids.push(3 + (h % (VOCAB as u64 - 3)) as usize);
        tokens.push(w.to_string());
    }
    (ids, tokens)
}
