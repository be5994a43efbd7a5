//! Reference implementations shared by the integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlm::fusion::UtteranceOracle;
use tlm::lattice::Lattice;
use tlm::text::{BOS, EOS};
use tlm::TransformerLM;

/// First-order chain over `words` symbols, ids offset by 3 so they line up
/// with a vocabulary whose reserved ids come first. Row 0 is the start
/// state; row `1 + w` follows word `w`. Each row holds `words` word
/// probabilities followed by the `<eos>` probability.
pub struct MarkovChain {
    pub words: usize,
    pub rows: Vec<Vec<f64>>,
}

impl MarkovChain {
    /// Peaked random rows: every word state ends with probability `p_end`,
    /// the start state never does.
    pub fn random(words: usize, p_end: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..=words)
            .map(|s| {
                let raw: Vec<f64> = (0..words).map(|_| rng.gen::<f64>().powi(4)).collect();
                let z: f64 = raw.iter().sum();
                let keep = if s == 0 { 1.0 } else { 1.0 - p_end };
                let mut row: Vec<f64> = raw.iter().map(|x| keep * x / z).collect();
                row.push(1.0 - keep);
                row
            })
            .collect();
        MarkovChain { words, rows }
    }

    pub fn vocab_size(&self) -> usize {
        self.words + 3
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut s = vec![BOS];
                let mut state = 0;
                loop {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut next = self.words;
                    for (j, p) in self.rows[state].iter().enumerate() {
                        acc += p;
                        if u < acc {
                            next = j;
                            break;
                        }
                    }
                    if next == self.words {
                        s.push(EOS);
                        break;
                    }
                    s.push(next + 3);
                    state = next + 1;
                }
                s
            })
            .collect()
    }

    /// Per-token perplexity of the chain itself in the large-corpus limit:
    /// expected sentence NLL over expected predictions per sentence, both
    /// from the expected visit counts of the absorbing chain.
    pub fn analytic_perplexity(&self) -> f64 {
        let k = self.words;
        // visits v solve v = e_start + v Q, with Q the word-to-word block.
        // Start is visited once; word visits satisfy
        //   v_w = P(start -> w) + sum_u v_u P(u -> w).
        let mut a = vec![vec![0.0; k + 1]; k];
        for w in 0..k {
            for u in 0..k {
                a[w][u] = -self.rows[1 + u][w];
            }
            a[w][w] += 1.0;
            a[w][k] = self.rows[0][w];
        }
        let visits = solve(a);
        let entropy = |row: &[f64]| -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let mut nll = entropy(&self.rows[0]);
        let mut count = 1.0;
        for w in 0..k {
            nll += visits[w] * entropy(&self.rows[1 + w]);
            count += visits[w];
        }
        (nll / count).exp()
    }

    /// Perplexity of the true chain on a concrete corpus.
    pub fn corpus_perplexity(&self, corpus: &[Vec<usize>]) -> f64 {
        let (mut nll, mut n) = (0.0, 0usize);
        for s in corpus {
            let mut state = 0;
            for &t in &s[1..] {
                let j = if t == EOS { self.words } else { t - 3 };
                nll -= self.rows[state][j].ln();
                n += 1;
                state = j + 1;
            }
        }
        (nll / n as f64).exp()
    }
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=n {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

/// `n` random sentences of `len` words drawn from ids `3..vocab`.
pub fn memorization_corpus(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut s = vec![BOS];
            s.extend((0..len).map(|_| rng.gen_range(3..vocab)));
            s.push(EOS);
            s
        })
        .collect()
}

/// Random DAG with nodes `0..n` in topological order, `0` initial and
/// `n - 1` final, each node linked forward so every node lies on a path.
pub fn random_lattice(
    rng: &mut ChaCha8Rng,
    nodes: usize,
    extra_arcs: usize,
    vocab: &tlm::Vocabulary,
    words: usize,
) -> Lattice {
    let mut arcs = Vec::new();
    let word = |rng: &mut ChaCha8Rng| vocab.token(3 + rng.gen_range(0..words)).unwrap().to_string();
    for u in 0..nodes - 1 {
        let w = word(rng);
        arcs.push((u, u + 1, w, -rng.gen_range(0.0..4.0), -rng.gen_range(0.0..4.0)));
    }
    for _ in 0..extra_arcs {
        let u = rng.gen_range(0..nodes - 1);
        let v = rng.gen_range(u + 1..nodes);
        let w = word(rng);
        arcs.push((u, v, w, -rng.gen_range(0.0..4.0), -rng.gen_range(0.0..4.0)));
    }
    Lattice::new(nodes, 0, nodes - 1, arcs, vocab).unwrap()
}

/// Best path by scoring every path from scratch: `(arcs, score)`, ties to
/// the lexicographically smaller token history.
pub fn brute_force_rescore(lat: &Lattice, lm: &TransformerLM, lm_scale: f64) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, Vec<usize>, f64)> = None;
    for path in lat.paths(100_000).unwrap() {
        let am: f64 = path.iter().map(|&a| lat.arcs()[a].am_score).sum();
        let mut toks = vec![BOS];
        toks.extend(path.iter().map(|&a| lat.arcs()[a].token));
        toks.push(EOS);
        let score = am + lm_scale * lm.sequence_log_prob(&toks).unwrap();
        let better = match &best {
            None => true,
            Some((_, bt, bs)) => score > *bs || (score == *bs && toks < *bt),
        };
        if better {
            best = Some((path, toks, score));
        }
    }
    let (path, _, score) = best.unwrap();
    (path, score)
}

/// Oracle with a normalized random distribution for every prefix over
/// `words` symbols (ids from 3) up to `max_len`.
pub fn full_acoustic_oracle(words: usize, max_len: usize, seed: u64) -> UtteranceOracle {
    let v = words + 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = UtteranceOracle::new(v);
    let mut frontier = vec![Vec::<usize>::new()];
    for _ in 0..=max_len {
        let mut next = Vec::new();
        for p in frontier {
            let mut raw = vec![0.0; v];
            raw[EOS] = rng.gen_range(0.05..1.0);
            for t in 3..v {
                raw[t] = rng.gen_range(0.05..1.0);
            }
            let z: f64 = raw.iter().sum();
            let lp = raw
                .iter()
                .map(|&x| if x == 0.0 { f64::NEG_INFINITY } else { (x / z).ln() })
                .collect();
            u.insert(&p, lp).unwrap();
            for t in 3..v {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        frontier = next;
    }
    u
}

/// Exhaustive search over every sequence of at most `max_len` tokens.
pub fn brute_force_fusion(
    u: &UtteranceOracle,
    lm: &TransformerLM,
    words: usize,
    max_len: usize,
    lm_weight: f64,
    eos_penalty: f64,
) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut layer = vec![Vec::<usize>::new()];
    for _ in 0..=max_len {
        let mut next = Vec::new();
        for s in &layer {
            let mut am = 0.0;
            for k in 0..=s.len() {
                let tok = if k == s.len() { EOS } else { s[k] };
                am += u.scores(&s[..k]).unwrap()[tok];
            }
            let mut toks = vec![BOS];
            toks.extend(s);
            toks.push(EOS);
            let score = am + lm_weight * lm.sequence_log_prob(&toks).unwrap() - eos_penalty;
            let better = match &best {
                None => true,
                Some((bs, b)) => score > *b || (score == *b && s < bs),
            };
            if better {
                best = Some((s.clone(), score));
            }
            if s.len() < max_len {
                for t in 3..3 + words {
                    let mut q = s.clone();
                    q.push(t);
                    next.push(q);
                }
            }
        }
        layer = next;
    }
    best.unwrap()
}

/// Denominator floor for relative gradient error; central differences
/// carry about 1e-10 absolute noise.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Largest relative error between analytic and central-difference
/// gradients over every parameter of `model` on `tokens`.
pub fn gradient_check(model: &TransformerLM, tokens: &[usize], step: f64) -> (f64, String) {
    use tlm::{Graph, Reduction};
    let loss = |m: &TransformerLM| -> f64 {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let (logits, _) = m
            .forward_graph(&mut g, &vars, &tokens[..tokens.len() - 1])
            .unwrap();
        let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).collect();
        let l = g.cross_entropy(logits, &targets, Reduction::Mean).unwrap();
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let (logits, _) = model
        .forward_graph(&mut g, &vars, &tokens[..tokens.len() - 1])
        .unwrap();
    let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).collect();
    let l = g.cross_entropy(logits, &targets, Reduction::Mean).unwrap();
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = vars.all().iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0, String::new());
    let mut probe = model.clone();
    for (pi, name) in names.iter().enumerate() {
        let n = probe.parameters_mut()[pi].numel();
        for i in 0..n {
            let orig = probe.parameters_mut()[pi].data()[i];
            probe.parameters_mut()[pi].data_mut()[i] = orig + step;
            let plus = loss(&probe);
            probe.parameters_mut()[pi].data_mut()[i] = orig - step;
            let minus = loss(&probe);
            probe.parameters_mut()[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {a}, numeric {numeric}"));
            }
        }
    }
    worst
}
