//! Shallow-fusion beam search with an end-of-sentence penalty.
//!
//! Acoustic scores come from a file-backed oracle: per utterance, a trie from
//! emitted token prefix to a log-probability vector over the vocabulary.
//!
//! ```text
//! utt1<TAB><TAB>a:-0.2,b:-1.8,<eos>:-5
//! utt1<TAB>a<TAB>b:-0.1,<eos>:-2.4
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DecoderState, TransformerLM};
use crate::tensor::log_sum_exp;
use crate::text::{Vocabulary, BOS, EOS};

/// Allowed deviation of a stored distribution's log-normalizer from zero.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    scores: Option<Vec<f64>>,
}

/// Acoustic distributions of one utterance, keyed by emitted prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceOracle {
    vocab_size: usize,
    nodes: Vec<TrieNode>,
}

impl UtteranceOracle {
    pub fn new(vocab_size: usize) -> Self {
        UtteranceOracle {
            vocab_size,
            nodes: vec![TrieNode::default()],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Stores `scores` for `prefix` after checking its shape and normalization.
    pub fn insert(&mut self, prefix: &[usize], scores: Vec<f64>) -> Result<()> {
        let show = || format!("{prefix:?}");
        if scores.len() != self.vocab_size {
            return Err(Error::Data(format!(
                "distribution for prefix {} has {} entries, vocabulary has {}",
                show(),
                scores.len(),
                self.vocab_size
            )));
        }
        if !scores[EOS].is_finite() {
            return Err(Error::Data(format!(
                "distribution for prefix {} lacks <eos> mass",
                show()
            )));
        }
        if scores[BOS] != f64::NEG_INFINITY {
            return Err(Error::Data(format!(
                "distribution for prefix {} gives mass to <bos>",
                show()
            )));
        }
        if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
            return Err(Error::Data(format!(
                "distribution for prefix {} has invalid scores",
                show()
            )));
        }
        let z = log_sum_exp(&scores);
        if z.abs() > NORMALIZATION_TOL {
            return Err(Error::Data(format!(
                "distribution for prefix {} is not normalized: log-sum {z}",
                show()
            )));
        }
        let mut node = 0;
        for &t in prefix {
            node = match self.nodes[node].children.get(&t) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(t, n);
                    n
                }
            };
        }
        if self.nodes[node].scores.is_some() {
            return Err(Error::Data(format!(
                "duplicate distribution for prefix {}",
                show()
            )));
        }
        self.nodes[node].scores = Some(scores);
        Ok(())
    }

    pub fn scores(&self, prefix: &[usize]) -> Option<&[f64]> {
        let mut node = 0;
        for t in prefix {
            node = *self.nodes[node].children.get(t)?;
        }
        self.nodes[node].scores.as_deref()
    }

    /// Stored `(prefix, scores)` pairs in depth-first token order.
    pub fn entries(&self) -> Vec<(Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if let Some(s) = &self.nodes[node].scores {
                out.push((prefix.clone(), s.as_slice()));
            }
            for (&t, &child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((child, p));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticOracle {
    utterances: BTreeMap<String, UtteranceOracle>,
}

impl AcousticOracle {
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut utterances: BTreeMap<String, UtteranceOracle> = BTreeMap::new();
        let token = |s: &str, line: usize| {
            vocab
                .get(s)
                .ok_or_else(|| Error::Data(format!("line {line}: unknown token `{s}`")))
        };
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [utt, prefix, dist] = cols.as_slice() else {
                return Err(Error::Data(format!(
                    "line {line_no}: expected `utt_id<TAB>prefix<TAB>token:logprob,...`"
                )));
            };
            let prefix = prefix
                .split_whitespace()
                .map(|s| token(s, line_no))
                .collect::<Result<Vec<_>>>()?;
            let mut scores = vec![f64::NEG_INFINITY; vocab.len()];
            for item in dist.split(',').filter(|s| !s.trim().is_empty()) {
                let (tok, lp) = item
                    .trim()
                    .rsplit_once(':')
                    .ok_or_else(|| Error::Data(format!("line {line_no}: bad entry `{item}`")))?;
                let lp: f64 = lp
                    .parse()
                    .map_err(|_| Error::Data(format!("line {line_no}: bad log-probability `{lp}`")))?;
                let t = token(tok, line_no)?;
                if scores[t] != f64::NEG_INFINITY {
                    return Err(Error::Data(format!("line {line_no}: token `{tok}` listed twice")));
                }
                scores[t] = lp;
            }
            utterances
                .entry(utt.to_string())
                .or_insert_with(|| UtteranceOracle::new(vocab.len()))
                .insert(&prefix, scores)
                .map_err(|e| match e {
                    Error::Data(m) => Error::Data(format!("line {line_no}: {m}")),
                    e => e,
                })?;
        }
        Ok(AcousticOracle { utterances })
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        AcousticOracle::parse(&fs::read_to_string(path)?, vocab)
    }

    pub fn from_utterances(utterances: BTreeMap<String, UtteranceOracle>) -> Self {
        AcousticOracle { utterances }
    }

    pub fn utterances(&self) -> &BTreeMap<String, UtteranceOracle> {
        &self.utterances
    }

    pub fn get(&self, utt: &str) -> Option<&UtteranceOracle> {
        self.utterances.get(utt)
    }

    /// Serializes in the load format; zero-probability tokens are omitted.
    pub fn to_text(&self, vocab: &Vocabulary) -> Result<String> {
        let mut s = String::new();
        for (utt, o) in &self.utterances {
            for (prefix, scores) in o.entries() {
                let prefix = prefix
                    .iter()
                    .map(|&t| vocab.token(t))
                    .collect::<Result<Vec<_>>>()?
                    .join(" ");
                let mut dist = Vec::new();
                for (t, lp) in scores.iter().enumerate() {
                    if *lp != f64::NEG_INFINITY {
                        dist.push(format!("{}:{lp}", vocab.token(t)?));
                    }
                }
                let _ = writeln!(s, "{utt}\t{prefix}\t{}", dist.join(","));
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        fs::write(path, self.to_text(vocab)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub beam: usize,
    pub lm_weight: f64,
    /// Subtracted from every `<eos>` expansion; negative values reward ending.
    pub eos_penalty: f64,
    /// Maximum number of tokens before the forced `<eos>`.
    pub max_len: usize,
    /// Score unlisted prefixes uniformly instead of failing.
    pub fallback: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            beam: 64,
            lm_weight: 0.5,
            eos_penalty: 0.0,
            max_len: 100,
            fallback: true,
        }
    }
}

impl FusionConfig {
    pub const KEYS: &'static [&'static str] = &["beam", "lm_weight", "eos_penalty", "max_len", "fallback"];

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !self.lm_weight.is_finite() || !self.eos_penalty.is_finite() {
            return Err(Error::Config("lm_weight and eos_penalty must be finite".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        match key {
            "beam" => self.beam = value.parse().map_err(|_| bad())?,
            "lm_weight" => self.lm_weight = value.parse().map_err(|_| bad())?,
            "eos_penalty" => self.eos_penalty = value.parse().map_err(|_| bad())?,
            "max_len" => self.max_len = value.parse().map_err(|_| bad())?,
            "fallback" => self.fallback = value.parse().map_err(|_| bad())?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, without `<bos>` and `<eos>`.
    pub tokens: Vec<usize>,
    /// Per-step acoustic log-probabilities, the last one for `<eos>`.
    pub am_steps: Vec<f64>,
    /// Per-step LM log-probabilities, aligned with `am_steps`.
    pub lm_steps: Vec<f64>,
    pub am_score: f64,
    pub lm_score: f64,
    /// `am_score + lm_weight * lm_score - eos_penalty`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Finished hypotheses, best first, at most `beam` of them.
    pub nbest: Vec<Hypothesis>,
}

impl DecodeResult {
    pub fn best(&self) -> &Hypothesis {
        &self.nbest[0]
    }
}

struct Active {
    tokens: Vec<usize>,
    am_steps: Vec<f64>,
    lm_steps: Vec<f64>,
    am: f64,
    lm: f64,
    state: DecoderState,
    next_lm: Vec<f64>,
}

struct Candidate {
    parent: usize,
    token: usize,
    am: f64,
    lm: f64,
    score: f64,
}

fn sequence_key<'a>(parent: &'a [usize], token: usize) -> impl Iterator<Item = usize> + 'a {
    parent.iter().copied().chain(std::iter::once(token))
}

/// Beam search over tokens. Candidates from all active hypotheses are ranked
/// together; `<eos>` candidates ranked ahead of the `beam`-th unfinished one
/// move to the finals pool. Search stops once no active hypothesis scores at
/// least the best finished one, or at `max_len`.
pub fn decode(oracle: &UtteranceOracle, lm: &TransformerLM, cfg: &FusionConfig) -> Result<DecodeResult> {
    cfg.validate()?;
    let v = lm.vocab_size();
    if oracle.vocab_size() != v {
        return Err(Error::Contract(format!(
            "acoustic vocabulary has {} entries, LM has {v}",
            oracle.vocab_size()
        )));
    }
    let uniform = {
        let mut u = vec![-((v - 1) as f64).ln(); v];
        u[BOS] = f64::NEG_INFINITY;
        u
    };
    let mut state = lm.init_state();
    let next_lm = lm.advance(&mut state, BOS)?;
    let mut active = vec![Active {
        tokens: Vec::new(),
        am_steps: Vec::new(),
        lm_steps: Vec::new(),
        am: 0.0,
        lm: 0.0,
        state,
        next_lm,
    }];
    let mut finals: Vec<Hypothesis> = Vec::new();
    let lambda = cfg.lm_weight;

    while !active.is_empty() {
        let mut cands = Vec::new();
        for (i, h) in active.iter().enumerate() {
            let am = match oracle.scores(&h.tokens) {
                Some(s) => s,
                None if cfg.fallback => &uniform,
                None => {
                    return Err(Error::Data(format!(
                        "no acoustic distribution for prefix {:?}",
                        h.tokens
                    )))
                }
            };
            let at_limit = h.tokens.len() >= cfg.max_len;
            for (tok, &am_tok) in am.iter().enumerate().take(v) {
                if tok == BOS || (at_limit && tok != EOS) || !am_tok.is_finite() {
                    continue;
                }
                let a = h.am + am_tok;
                let l = h.lm + h.next_lm[tok];
                let mut score = a + lambda * l;
                if tok == EOS {
                    score -= cfg.eos_penalty;
                }
                cands.push(Candidate {
                    parent: i,
                    token: tok,
                    am: am_tok,
                    lm: h.next_lm[tok],
                    score,
                });
            }
        }
        cands.sort_by(|x, y| {
            y.score.total_cmp(&x.score).then_with(|| {
                sequence_key(&active[x.parent].tokens, x.token)
                    .cmp(sequence_key(&active[y.parent].tokens, y.token))
            })
        });

        let mut next = Vec::new();
        for c in cands {
            if next.len() == cfg.beam {
                break;
            }
            let p = &active[c.parent];
            let mut am_steps = p.am_steps.clone();
            am_steps.push(c.am);
            let mut lm_steps = p.lm_steps.clone();
            lm_steps.push(c.lm);
            if c.token == EOS {
                finals.push(Hypothesis {
                    tokens: p.tokens.clone(),
                    am_steps,
                    lm_steps,
                    am_score: p.am + c.am,
                    lm_score: p.lm + c.lm,
                    score: c.score,
                });
            } else {
                let mut state = p.state.clone();
                let next_lm = lm.advance(&mut state, c.token)?;
                let mut tokens = p.tokens.clone();
                tokens.push(c.token);
                next.push(Active {
                    tokens,
                    am_steps,
                    lm_steps,
                    am: p.am + c.am,
                    lm: p.lm + c.lm,
                    state,
                    next_lm,
                });
            }
        }
        active = next;

        let best_final = finals.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_active = active
            .iter()
            .map(|h| h.am + lambda * h.lm)
            .fold(f64::NEG_INFINITY, f64::max);
        if best_active < best_final {
            break;
        }
    }

    if finals.is_empty() {
        return Err(Error::Search(
            "beam exhausted without a finished hypothesis".into(),
        ));
    }
    finals.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| x.tokens.cmp(&y.tokens)));
    finals.truncate(cfg.beam);
    Ok(DecodeResult { nbest: finals })
}

/// `utt \t rank \t tokens \t score \t am \t lm`, one line per hypothesis.
pub fn format_nbest(utt: &str, result: &DecodeResult, vocab: &Vocabulary) -> Result<String> {
    let mut s = String::new();
    for (rank, h) in result.nbest.iter().enumerate() {
        let words = h
            .tokens
            .iter()
            .map(|&t| vocab.token(t))
            .collect::<Result<Vec<_>>>()?
            .join(" ");
        let _ = writeln!(
            s,
            "{utt}\t{}\t{words}\t{}\t{}\t{}",
            rank + 1,
            h.score,
            h.am_score,
            h.lm_score
        );
    }
    Ok(s)
}

/// Orders hypotheses the way [`decode`] ranks finals.
pub fn compare_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    // ids: <bos> 0, <eos> 1, <unk> 2, a 3, b 4
    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "b"])
    }

    fn lm(seed: u64) -> TransformerLM {
        TransformerLM::new(ModelConfig::new(1, 8, 4, 1, 5), seed).unwrap()
    }

    fn dist(eos: f64, a: f64, b: f64) -> Vec<f64> {
        let z = log_sum_exp(&[eos, a, b]);
        vec![f64::NEG_INFINITY, eos - z, f64::NEG_INFINITY, a - z, b - z]
    }

    const ROOT_ONLY: &str = "u1\t\ta:-0.1,b:-4,<eos>:-2.5659395875986277\n";

    #[test]
    fn root_only_file_scores_first_token_then_falls_back() {
        let oracle = AcousticOracle::parse(ROOT_ONLY, &vocab()).unwrap();
        let u = oracle.get("u1").unwrap();
        assert_eq!(u.scores(&[]).unwrap()[3], -0.1);
        assert!(u.scores(&[3]).is_none());
        let cfg = FusionConfig {
            lm_weight: 0.0,
            max_len: 3,
            ..Default::default()
        };
        let r = decode(u, &lm(1), &cfg).unwrap();
        // Uniform fallback over four tokens costs ln 4 per step, so ending
        // right after `a` beats any longer continuation.
        assert_eq!(r.best().tokens, [3]);
        assert!((r.best().score - (-0.1 - 4f64.ln())).abs() < 1e-12);
        let strict = FusionConfig {
            fallback: false,
            ..cfg
        };
        assert!(matches!(decode(u, &lm(1), &strict), Err(Error::Data(_))));
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let mut u = UtteranceOracle::new(5);
        u.insert(&[], dist(-1.0, -0.3, -2.0)).unwrap();
        u.insert(&[3, 4], dist(0.1, -0.7, 1.0 / 3.0)).unwrap();
        u.insert(&[4], dist(-2.0, -1.0, -1e-3)).unwrap();
        let oracle = AcousticOracle::from_utterances([("x".to_string(), u)].into());
        let text = oracle.to_text(&vocab()).unwrap();
        let back = AcousticOracle::parse(&text, &vocab()).unwrap();
        assert_eq!(back, oracle);
        let a = back.get("x").unwrap().scores(&[3, 4]).unwrap();
        let b = oracle.get("x").unwrap().scores(&[3, 4]).unwrap();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bad_files_rejected() {
        let v = vocab();
        let unnormalized = "u\t\ta:-0.1,<eos>:-0.1\n";
        let err = AcousticOracle::parse(unnormalized, &v).unwrap_err().to_string();
        assert!(err.contains("not normalized") && err.contains("[]"), "{err}");
        let no_eos = "u\ta\ta:0\n";
        let err = AcousticOracle::parse(no_eos, &v).unwrap_err().to_string();
        assert!(err.contains("<eos>") && err.contains("[3]"), "{err}");
        assert!(AcousticOracle::parse("u\tzz\t<eos>:0\n", &v).is_err());
        assert!(AcousticOracle::parse("u\t<eos>:0\n", &v).is_err());
        assert!(matches!(
            AcousticOracle::load("/nonexistent/oracle.tsv", &v),
            Err(Error::Io(_))
        ));
    }

    fn full_oracle(seed: u64, max_len: usize) -> UtteranceOracle {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut u = UtteranceOracle::new(5);
        let mut frontier = vec![Vec::new()];
        for _ in 0..=max_len {
            let mut next = Vec::new();
            for p in frontier {
                u.insert(
                    &p,
                    dist(
                        rng.gen_range(-3.0..0.0),
                        rng.gen_range(-3.0..0.0),
                        rng.gen_range(-3.0..0.0),
                    ),
                )
                .unwrap();
                for t in [3, 4] {
                    let mut q: Vec<usize> = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            frontier = next;
        }
        u
    }

    fn brute_force(u: &UtteranceOracle, m: &TransformerLM, cfg: &FusionConfig) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut seqs = vec![Vec::new()];
        for len in 0..=cfg.max_len {
            for s in seqs.iter().filter(|s| s.len() == len) {
                let mut am = 0.0;
                for k in 0..=s.len() {
                    let tok = if k == s.len() { EOS } else { s[k] };
                    am += u.scores(&s[..k]).unwrap()[tok];
                }
                let mut toks = vec![BOS];
                toks.extend(s);
                toks.push(EOS);
                let score = am + cfg.lm_weight * m.sequence_log_prob(&toks).unwrap() - cfg.eos_penalty;
                if best.as_ref().is_none_or(|(_, b)| score > *b) {
                    best = Some((s.clone(), score));
                }
            }
            let grown: Vec<Vec<usize>> = seqs
                .iter()
                .filter(|s| s.len() == len)
                .flat_map(|s| [3, 4].map(|t| s.iter().copied().chain([t]).collect()))
                .collect();
            seqs.extend(grown);
        }
        best.unwrap()
    }

    #[test]
    fn wide_beam_equals_enumeration() {
        for seed in 0..5 {
            let u = full_oracle(seed, 3);
            let m = lm(seed + 10);
            let cfg = FusionConfig {
                beam: 27,
                lm_weight: 0.8,
                eos_penalty: 0.0,
                max_len: 3,
                fallback: false,
            };
            let r = decode(&u, &m, &cfg).unwrap();
            let (seq, score) = brute_force(&u, &m, &cfg);
            assert_eq!(r.best().tokens, seq, "seed {seed}");
            assert!((r.best().score - score).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weight_is_acoustic_only() {
        let u = full_oracle(4, 3);
        let cfg = FusionConfig {
            beam: 27,
            lm_weight: 0.0,
            max_len: 3,
            fallback: false,
            ..Default::default()
        };
        let a = decode(&u, &lm(1), &cfg).unwrap();
        let b = decode(&u, &lm(2), &cfg).unwrap();
        assert_eq!(a.best().tokens, b.best().tokens);
        assert_eq!(a.best().score, a.best().am_score);
    }

    #[test]
    fn eos_penalty_limits() {
        let u = full_oracle(7, 4);
        let m = lm(3);
        let base = FusionConfig {
            beam: 2,
            lm_weight: 1.0,
            max_len: 4,
            fallback: false,
            eos_penalty: 0.0,
        };
        let long = decode(
            &u,
            &m,
            &FusionConfig {
                eos_penalty: 20.0,
                ..base
            },
        )
        .unwrap();
        assert!(long.nbest.iter().all(|h| h.tokens.len() == 4));
        let short = decode(
            &u,
            &m,
            &FusionConfig {
                eos_penalty: -20.0,
                ..base
            },
        )
        .unwrap();
        assert!(short.best().tokens.is_empty());
    }

    #[test]
    fn score_decomposes_and_lm_steps_replay() {
        let u = full_oracle(2, 4);
        let m = lm(5);
        let cfg = FusionConfig {
            beam: 3,
            lm_weight: 0.6,
            eos_penalty: 0.4,
            max_len: 4,
            fallback: false,
        };
        let r = decode(&u, &m, &cfg).unwrap();
        for h in &r.nbest {
            let am: f64 = h.am_steps.iter().sum();
            let lm_sum: f64 = h.lm_steps.iter().sum();
            assert!((h.score - (am + 0.6 * lm_sum - 0.4)).abs() < 1e-9);
            let mut state = m.init_state();
            let seq: Vec<usize> = std::iter::once(BOS).chain(h.tokens.iter().copied()).collect();
            for (k, &t) in seq.iter().enumerate() {
                let lp = m.advance(&mut state, t).unwrap();
                let target = h.tokens.get(k).copied().unwrap_or(EOS);
                assert!((lp[target] - h.lm_steps[k]).abs() < 1e-10);
            }
        }
        let sorted = r
            .nbest
            .windows(2)
            .all(|w| compare_hypotheses(&w[0], &w[1]) != Ordering::Greater);
        assert!(sorted);
    }

    #[test]
    fn best_score_monotone_in_beam() {
        for seed in 0..4 {
            let u = full_oracle(seed, 4);
            let m = lm(seed);
            let mut prev = f64::NEG_INFINITY;
            for beam in [1, 2, 4, 8, 16] {
                let cfg = FusionConfig {
                    beam,
                    lm_weight: 0.5,
                    eos_penalty: 0.0,
                    max_len: 4,
                    fallback: false,
                };
                let s = decode(&u, &m, &cfg).unwrap().best().score;
                assert!(s >= prev - 1e-12, "seed {seed} beam {beam}");
                prev = s;
            }
        }
    }

    #[test]
    fn nbest_format() {
        let oracle = AcousticOracle::parse(ROOT_ONLY, &vocab()).unwrap();
        let r = decode(
            oracle.get("u1").unwrap(),
            &lm(1),
            &FusionConfig {
                max_len: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let text = format_nbest("u1", &r, &vocab()).unwrap();
        let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
        assert_eq!(first.len(), 6);
        assert_eq!(first[1], "1");
    }
}
