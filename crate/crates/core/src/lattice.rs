//! Word lattices and push-forward rescoring with a Transformer LM.
//!
//! Lattice text format:
//!
//! ```text
//! # comment
//! NODES 4 INITIAL 0 FINAL 3
//! 0 1 the -1.5 -2.0
//! 1 3 cat -0.7 -4.1
//! ```
//!
//! Scores are natural-log domain. The hypothesis state carried through the
//! lattice is the full [`DecoderState`], so recombination is only exact when
//! it keys on the whole history.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{DecoderState, TransformerLM};
use crate::text::{Vocabulary, BOS, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    pub word: String,
    pub token: usize,
    pub am_score: f64,
    pub lm_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    num_nodes: usize,
    initial: usize,
    final_node: usize,
    arcs: Vec<Arc>,
    /// Outgoing arc indices per node, in file order.
    out: Vec<Vec<usize>>,
    topo: Vec<usize>,
    unknown_words: usize,
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Data(format!("line {line}: bad {what} `{s}`")))
}

impl Lattice {
    /// Builds and validates a lattice. Words missing from `vocab` map to
    /// `<unk>` and are counted in [`Lattice::unknown_words`].
    pub fn new(
        num_nodes: usize,
        initial: usize,
        final_node: usize,
        arcs: Vec<(usize, usize, String, f64, f64)>,
        vocab: &Vocabulary,
    ) -> Result<Lattice> {
        if initial >= num_nodes || final_node >= num_nodes {
            return Err(Error::Structure(format!(
                "initial {initial} or final {final_node} outside 0..{num_nodes}"
            )));
        }
        let mut unknown_words = 0;
        let mut out = vec![Vec::new(); num_nodes];
        let mut built = Vec::with_capacity(arcs.len());
        for (i, (from, to, word, am, lm)) in arcs.into_iter().enumerate() {
            if from >= num_nodes || to >= num_nodes {
                return Err(Error::Structure(format!(
                    "arc {from} -> {to} `{word}` references a node outside 0..{num_nodes}"
                )));
            }
            if !am.is_finite() || !lm.is_finite() {
                return Err(Error::Data(format!(
                    "arc {from} -> {to} `{word}` has a non-finite score"
                )));
            }
            let token = match vocab.get(&word) {
                Some(t) => t,
                None => {
                    unknown_words += 1;
                    vocab.id(&word)
                }
            };
            out[from].push(i);
            built.push(Arc {
                from,
                to,
                word,
                token,
                am_score: am,
                lm_score: lm,
            });
        }
        let mut lat = Lattice {
            num_nodes,
            initial,
            final_node,
            arcs: built,
            out,
            topo: Vec::new(),
            unknown_words,
        };
        lat.topo = lat.topological_order()?;
        lat.check_connected()?;
        Ok(lat)
    }

    /// Reverse DFS post-order; a gray target is a back-arc.
    fn topological_order(&self) -> Result<Vec<usize>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            White,
            Gray,
            Black,
        }
        let mut mark = vec![Mark::White; self.num_nodes];
        let mut order = Vec::with_capacity(self.num_nodes);
        let roots = std::iter::once(self.initial).chain(0..self.num_nodes);
        for root in roots {
            if mark[root] != Mark::White {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            mark[root] = Mark::Gray;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if let Some(&a) = self.out[node].get(*next) {
                    *next += 1;
                    let arc = &self.arcs[a];
                    match mark[arc.to] {
                        Mark::Gray => {
                            return Err(Error::Structure(format!(
                                "cycle through back-arc {} -> {} `{}`",
                                arc.from, arc.to, arc.word
                            )))
                        }
                        Mark::White => {
                            mark[arc.to] = Mark::Gray;
                            stack.push((arc.to, 0));
                        }
                        Mark::Black => {}
                    }
                } else {
                    mark[node] = Mark::Black;
                    order.push(node);
                    stack.pop();
                }
            }
        }
        order.reverse();
        Ok(order)
    }

    fn check_connected(&self) -> Result<()> {
        let mut fwd = vec![false; self.num_nodes];
        fwd[self.initial] = true;
        for &u in &self.topo {
            if fwd[u] {
                for &a in &self.out[u] {
                    fwd[self.arcs[a].to] = true;
                }
            }
        }
        let mut bwd = vec![false; self.num_nodes];
        bwd[self.final_node] = true;
        for &u in self.topo.iter().rev() {
            if self.out[u].iter().any(|&a| bwd[self.arcs[a].to]) {
                bwd[u] = true;
            }
        }
        match (0..self.num_nodes).find(|&n| !(fwd[n] && bwd[n])) {
            Some(n) if !fwd[n] => Err(Error::Structure(format!(
                "dangling node {n}: unreachable from initial node {}",
                self.initial
            ))),
            Some(n) => Err(Error::Structure(format!(
                "dangling node {n}: cannot reach final node {}",
                self.final_node
            ))),
            None => Ok(()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn final_node(&self) -> usize {
        self.final_node
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn outgoing(&self, node: usize) -> impl Iterator<Item = &Arc> {
        self.out[node].iter().map(|&a| &self.arcs[a])
    }

    pub fn topological_nodes(&self) -> &[usize] {
        &self.topo
    }

    /// Arcs whose word was mapped to `<unk>` at construction.
    pub fn unknown_words(&self) -> usize {
        self.unknown_words
    }

    /// Number of initial-to-final paths (saturating).
    pub fn path_count(&self) -> u64 {
        let mut count = vec![0u64; self.num_nodes];
        count[self.initial] = 1;
        for &u in &self.topo {
            for &a in &self.out[u] {
                let v = self.arcs[a].to;
                count[v] = count[v].saturating_add(count[u]);
            }
        }
        count[self.final_node]
    }

    /// Every path as a list of arc indices; fails beyond `limit` paths.
    pub fn paths(&self, limit: usize) -> Result<Vec<Vec<usize>>> {
        if self.path_count() > limit as u64 {
            return Err(Error::Search(format!(
                "lattice has {} paths, more than the limit {limit}",
                self.path_count()
            )));
        }
        let mut done = Vec::new();
        let mut stack = vec![(self.initial, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if node == self.final_node {
                done.push(path);
                continue;
            }
            for &a in self.out[node].iter().rev() {
                let mut p = path.clone();
                p.push(a);
                stack.push((self.arcs[a].to, p));
            }
        }
        Ok(done)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "NODES {} INITIAL {} FINAL {}\n",
            self.num_nodes, self.initial, self.final_node
        );
        for a in &self.arcs {
            let _ = writeln!(s, "{} {} {} {} {}", a.from, a.to, a.word, a.am_score, a.lm_score);
        }
        s
    }
}

pub fn parse_lattice(text: &str, vocab: &Vocabulary) -> Result<Lattice> {
    let mut header = None;
    let mut arcs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if header.is_none() {
            match f.as_slice() {
                ["NODES", n, "INITIAL", i, "FINAL", fin] => {
                    header = Some((
                        parse_num(n, "node count", line_no)?,
                        parse_num(i, "initial node", line_no)?,
                        parse_num(fin, "final node", line_no)?,
                    ));
                }
                _ => {
                    return Err(Error::Data(format!(
                        "line {line_no}: expected `NODES n INITIAL i FINAL f`"
                    )))
                }
            }
            continue;
        }
        let [j, k, word, am, lm] = f.as_slice() else {
            return Err(Error::Data(format!(
                "line {line_no}: expected `J K word am_score lm_score`"
            )));
        };
        arcs.push((
            parse_num(j, "source node", line_no)?,
            parse_num(k, "target node", line_no)?,
            word.to_string(),
            parse_num(am, "acoustic score", line_no)?,
            parse_num(lm, "lm score", line_no)?,
        ));
    }
    let (n, initial, fin) = header.ok_or_else(|| Error::Data("missing lattice header".into()))?;
    Lattice::new(n, initial, fin, arcs, vocab)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescoreConfig {
    pub lm_scale: f64,
    /// Hypotheses kept per node; `None` keeps all.
    pub beam: Option<usize>,
    /// Words of context that identify a hypothesis for merging; `None` uses
    /// the full history.
    pub recombination: Option<usize>,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig {
            lm_scale: 1.0,
            beam: None,
            recombination: None,
        }
    }
}

impl RescoreConfig {
    pub const KEYS: &'static [&'static str] = &["lm_scale", "beam", "recombination"];

    pub fn validate(&self) -> Result<()> {
        if !(self.lm_scale >= 0.0 && self.lm_scale.is_finite()) {
            return Err(Error::Config(format!(
                "lm_scale must be finite and nonnegative, got {}",
                self.lm_scale
            )));
        }
        if self.beam == Some(0) {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        Ok(())
    }

    /// `beam` and `recombination` accept `inf` for unbounded.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        let unbounded = |v: &str| -> Result<Option<usize>> {
            match v {
                "inf" | "none" => Ok(None),
                _ => v.parse().map(Some).map_err(|_| bad()),
            }
        };
        match key {
            "lm_scale" => self.lm_scale = value.parse().map_err(|_| bad())?,
            "beam" => self.beam = unbounded(value)?,
            "recombination" => self.recombination = unbounded(value)?,
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
pub struct RescoreResult {
    /// Arc indices of the best path.
    pub arcs: Vec<usize>,
    pub words: Vec<String>,
    /// New LM log-probability of each arc on the path.
    pub arc_lm_scores: Vec<f64>,
    pub eos_lm_score: f64,
    pub am_score: f64,
    pub lm_score: f64,
    /// `am_score + lm_scale * lm_score`.
    pub score: f64,
}

impl RescoreResult {
    /// `words \t arc lm scores then <eos> \t total`.
    pub fn to_tsv_line(&self) -> String {
        let lm: Vec<String> = self
            .arc_lm_scores
            .iter()
            .chain(std::iter::once(&self.eos_lm_score))
            .map(|x| x.to_string())
            .collect();
        format!("{}\t{}\t{}", self.words.join(" "), lm.join(" "), self.score)
    }
}

#[derive(Clone)]
struct Hyp {
    history: Vec<usize>,
    arcs: Vec<usize>,
    arc_lm: Vec<f64>,
    am: f64,
    lm: f64,
    /// Has consumed every history token except the last.
    state: DecoderState,
}

impl Hyp {
    fn score(&self, lm_scale: f64) -> f64 {
        self.am + lm_scale * self.lm
    }
}

/// Higher score first, then lexicographically smaller history.
fn rank(a: &Hyp, b: &Hyp, lm_scale: f64) -> Ordering {
    b.score(lm_scale)
        .total_cmp(&a.score(lm_scale))
        .then_with(|| a.history.cmp(&b.history))
}

fn context(history: &[usize], n: Option<usize>) -> &[usize] {
    match n {
        Some(n) => &history[history.len().saturating_sub(n)..],
        None => history,
    }
}

fn prune(hyps: Vec<Hyp>, cfg: &RescoreConfig) -> Vec<Hyp> {
    let mut best: BTreeMap<Vec<usize>, Hyp> = BTreeMap::new();
    for h in hyps {
        let key = context(&h.history, cfg.recombination).to_vec();
        match best.get(&key) {
            Some(kept) if rank(kept, &h, cfg.lm_scale) != Ordering::Greater => {}
            _ => {
                best.insert(key, h);
            }
        }
    }
    let mut kept: Vec<Hyp> = best.into_values().collect();
    kept.sort_by(|a, b| rank(a, b, cfg.lm_scale));
    if let Some(beam) = cfg.beam {
        kept.truncate(beam);
    }
    kept
}

/// Push-forward rescoring: nodes are visited in topological order, each
/// surviving hypothesis is advanced once and extended along every outgoing
/// arc, and `<eos>` is scored at the final node.
pub fn rescore(lattice: &Lattice, lm: &TransformerLM, cfg: &RescoreConfig) -> Result<RescoreResult> {
    cfg.validate()?;
    let mut pending: Vec<Vec<Hyp>> = vec![Vec::new(); lattice.num_nodes];
    pending[lattice.initial].push(Hyp {
        history: vec![BOS],
        arcs: Vec::new(),
        arc_lm: Vec::new(),
        am: 0.0,
        lm: 0.0,
        state: lm.init_state(),
    });
    for &u in &lattice.topo {
        let hyps = prune(std::mem::take(&mut pending[u]), cfg);
        if u == lattice.final_node {
            return finish(lattice, lm, cfg, hyps);
        }
        for mut h in hyps {
            let last = *h.history.last().expect("history starts with <bos>");
            let lp = lm.advance(&mut h.state, last)?;
            for &a in &lattice.out[u] {
                let arc = &lattice.arcs[a];
                let s = lp[arc.token];
                let mut child = h.clone();
                child.history.push(arc.token);
                child.arcs.push(a);
                child.arc_lm.push(s);
                child.am += arc.am_score;
                child.lm += s;
                pending[arc.to].push(child);
            }
        }
    }
    unreachable!("final node is part of the topological order")
}

fn finish(
    lattice: &Lattice,
    lm: &TransformerLM,
    cfg: &RescoreConfig,
    hyps: Vec<Hyp>,
) -> Result<RescoreResult> {
    let mut best: Option<(Hyp, f64)> = None;
    for mut h in hyps {
        let last = *h.history.last().expect("history starts with <bos>");
        let eos = lm.advance(&mut h.state, last)?[EOS];
        h.lm += eos;
        let better = match &best {
            None => true,
            Some((b, _)) => rank(&h, b, cfg.lm_scale) == Ordering::Less,
        };
        if better {
            best = Some((h, eos));
        }
    }
    let (h, eos) =
        best.ok_or_else(|| Error::Search("no hypothesis reached the final node; try a larger beam".into()))?;
    Ok(RescoreResult {
        words: h.arcs.iter().map(|&a| lattice.arcs[a].word.clone()).collect(),
        score: h.score(cfg.lm_scale),
        arcs: h.arcs,
        arc_lm_scores: h.arc_lm,
        eos_lm_score: eos,
        am_score: h.am,
        lm_score: h.lm,
    })
}

/// Minimum word-level edit distance between `reference` and any lattice path.
pub fn oracle_errors(lattice: &Lattice, reference: &[&str]) -> usize {
    let m = reference.len();
    let close = |d: &mut Vec<usize>| {
        for j in 1..=m {
            d[j] = d[j].min(d[j - 1] + 1);
        }
    };
    let mut dist: Vec<Option<Vec<usize>>> = vec![None; lattice.num_nodes];
    dist[lattice.initial] = Some((0..=m).collect());
    for &u in &lattice.topo {
        let Some(mut du) = dist[u].take() else { continue };
        close(&mut du);
        for &a in &lattice.out[u] {
            let arc = &lattice.arcs[a];
            let mut next = vec![0; m + 1];
            next[0] = du[0] + 1;
            for j in 1..=m {
                let sub = usize::from(arc.word != reference[j - 1]);
                next[j] = (du[j - 1] + sub).min(du[j] + 1);
            }
            match &mut dist[arc.to] {
                Some(dv) => dv.iter_mut().zip(&next).for_each(|(x, y)| *x = (*x).min(*y)),
                slot => *slot = Some(next),
            }
        }
        if u == lattice.final_node {
            return du[m];
        }
    }
    unreachable!("final node is part of the topological order")
}

/// Oracle word error rate; `None` for an empty reference.
pub fn oracle_wer(lattice: &Lattice, reference: &[&str]) -> Option<f64> {
    (!reference.is_empty()).then(|| oracle_errors(lattice, reference) as f64 / reference.len() as f64)
}
