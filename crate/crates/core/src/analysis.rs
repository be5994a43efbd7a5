//! Attention-weight dumps, heatmaps and diagonality statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    /// Input tokens, one per query/key position.
    pub tokens: Vec<String>,
    /// One `[H × T × T]` tensor per layer.
    pub layers: Vec<AttentionWeights>,
}

impl AttentionDump {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.layers[layer].row(head, query)[key]
    }
}

/// Runs `inputs` through the model and collects every layer's weights.
/// `labels` name the positions; pass the input tokens' surface forms.
pub fn dump_attention(model: &TransformerLM, inputs: &[usize], labels: Vec<String>) -> Result<AttentionDump> {
    if labels.len() != inputs.len() {
        return Err(Error::Contract(format!(
            "{} labels for {} input positions",
            labels.len(),
            inputs.len()
        )));
    }
    let out = model.forward_parallel(inputs)?;
    Ok(AttentionDump {
        tokens: labels,
        layers: out.attention,
    })
}

/// Rows are `(query, head)` pairs in query-major order, columns are keys.
pub fn layer_csv(weights: &AttentionWeights) -> String {
    let (h, t) = (weights.heads(), weights.len());
    let mut s = String::from("query,head");
    for k in 0..t {
        let _ = write!(s, ",{k}");
    }
    s.push('\n');
    for q in 0..t {
        for head in 0..h {
            let _ = write!(s, "{q},{head}");
            for w in weights.row(head, q) {
                let _ = write!(s, ",{w}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn parse_layer_csv(text: &str) -> Result<AttentionWeights> {
    let bad = |line: usize, what: &str| Error::Data(format!("attention csv line {line}: {what}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let t = header
        .split(',')
        .count()
        .checked_sub(2)
        .filter(|_| header.starts_with("query,head"))
        .ok_or_else(|| bad(1, "bad header"))?;
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    if t == 0 || !rows.len().is_multiple_of(t) {
        return Err(bad(1, "row count is not a multiple of the key count"));
    }
    let h = rows.len() / t;
    let mut data = vec![0.0; h * t * t];
    for (i, line) in rows.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != t + 2 {
            return Err(bad(i + 2, "wrong number of columns"));
        }
        let q: usize = cells[0].parse().map_err(|_| bad(i + 2, "bad query index"))?;
        let head: usize = cells[1].parse().map_err(|_| bad(i + 2, "bad head index"))?;
        if q != i / h || head != i % h {
            return Err(bad(i + 2, "rows out of order"));
        }
        let start = (head * t + q) * t;
        for (k, c) in cells[2..].iter().enumerate() {
            data[start + k] = c.parse().map_err(|_| bad(i + 2, "bad weight"))?;
        }
    }
    Ok(AttentionWeights {
        weights: Tensor::new([h, t, t], data)?,
    })
}

/// ASCII PGM heatmap: width = keys, height = `T·H` rows in the CSV's order,
/// weight 1 is black.
pub fn layer_pgm(weights: &AttentionWeights) -> String {
    let (h, t) = (weights.heads(), weights.len());
    let mut s = format!("P2\n{t} {}\n255\n", t * h);
    for q in 0..t {
        for head in 0..h {
            let px: Vec<String> = weights
                .row(head, q)
                .iter()
                .map(|w| ((255.0 * (1.0 - w)).round().clamp(0.0, 255.0) as u8).to_string())
                .collect();
            s.push_str(&px.join(" "));
            s.push('\n');
        }
    }
    s
}

/// Writes `{stem}.layer{l}.csv` and `{stem}.layer{l}.pgm` under `dir` and
/// returns the paths written.
pub fn write_dump(dump: &AttentionDump, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (l, w) in dump.layers.iter().enumerate() {
        let csv = dir.join(format!("{stem}.layer{l}.csv"));
        fs::write(&csv, layer_csv(w))?;
        let pgm = dir.join(format!("{stem}.layer{l}.pgm"));
        fs::write(&pgm, layer_pgm(w))?;
        paths.push(csv);
        paths.push(pgm);
    }
    Ok(paths)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadStats {
    /// Mean weight on `key == query`.
    pub diagonal_mass: f64,
    /// Mean weight on keys with `|key - query| < window`.
    pub local_mass: f64,
    /// Mean row entropy in nats.
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalityReport {
    pub window: usize,
    /// `[layer][head]`
    pub heads: Vec<Vec<HeadStats>>,
    /// Diagonal mass of uniform causal attention over the same length.
    pub uniform_diagonal: f64,
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn diagonality_report(dump: &AttentionDump, window: usize) -> DiagonalityReport {
    let t = dump.len();
    let heads = dump
        .layers
        .iter()
        .map(|w| {
            (0..w.heads())
                .map(|h| {
                    let (mut diag, mut local, mut ent) = (0.0, 0.0, 0.0);
                    for q in 0..t {
                        let row = w.row(h, q);
                        diag += row[q];
                        local += row
                            .iter()
                            .enumerate()
                            .filter(|(k, _)| k.abs_diff(q) < window)
                            .map(|(_, x)| x)
                            .sum::<f64>();
                        ent += entropy(&row[..=q]);
                    }
                    let n = t as f64;
                    HeadStats {
                        diagonal_mass: diag / n,
                        local_mass: local / n,
                        entropy: ent / n,
                    }
                })
                .collect()
        })
        .collect();
    DiagonalityReport {
        window,
        heads,
        uniform_diagonal: (1..=t).map(|n| 1.0 / n as f64).sum::<f64>() / t.max(1) as f64,
    }
}

impl DiagonalityReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("layer\thead\tdiagonal\tlocal_w{}\tentropy\n", self.window);
        for (l, hs) in self.heads.iter().enumerate() {
            for (h, st) in hs.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{l}\t{h}\t{:.6}\t{:.6}\t{:.6}",
                    st.diagonal_mass, st.local_mass, st.entropy
                );
            }
        }
        let _ = writeln!(s, "# uniform diagonal baseline {:.6}", self.uniform_diagonal);
        s
    }
}
