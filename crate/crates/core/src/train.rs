//! Plain SGD with new-bob learning-rate control, global gradient-norm
//! clipping and sentence-level perplexity evaluation.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Reduction, Var};
use crate::model::TransformerLM;
use crate::tensor::Tensor;
use crate::text::{make_batches, prediction_count, Batch};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewBobConfig {
    /// Minimum relative dev-perplexity improvement that counts as progress.
    pub threshold: f64,
    pub decay: f64,
    /// Sub-epochs without progress before decaying.
    pub patience: usize,
}

impl Default for NewBobConfig {
    fn default() -> Self {
        NewBobConfig {
            threshold: 0.002,
            decay: 0.5,
            patience: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub newbob: NewBobConfig,
    pub sub_epochs_per_epoch: usize,
    /// Sentences per update.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Best-dev model is written here whenever it improves.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            clip_norm: 1.0,
            newbob: NewBobConfig::default(),
            sub_epochs_per_epoch: 10,
            batch_size: 32,
            max_epochs: 1,
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 9] = [
        "learning_rate",
        "clip_norm",
        "newbob_threshold",
        "newbob_decay",
        "newbob_patience",
        "sub_epochs_per_epoch",
        "batch_size",
        "max_epochs",
        "seed",
    ];

    /// Default clipping threshold: 0.1 for models with tied layers, else 1.
    pub fn for_model(model: &TransformerLM) -> Self {
        TrainConfig {
            clip_norm: if model.config().tied_layers { 0.1 } else { 1.0 },
            ..TrainConfig::default()
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.newbob.decay > 0.0 && self.newbob.decay < 1.0) {
            return Err(Error::Config("newbob_decay must lie in (0, 1)".into()));
        }
        if self.sub_epochs_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "sub_epochs_per_epoch and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let float = || -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
        };
        let int = || -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "learning_rate" => self.learning_rate = float()?,
            "clip_norm" => self.clip_norm = float()?,
            "newbob_threshold" => self.newbob.threshold = float()?,
            "newbob_decay" => self.newbob.decay = float()?,
            "newbob_patience" => self.newbob.patience = int()?,
            "sub_epochs_per_epoch" => self.sub_epochs_per_epoch = int()?,
            "batch_size" => self.batch_size = int()?,
            "max_epochs" => self.max_epochs = int()?,
            "seed" => self.seed = int()? as u64,
            other => {
                return Err(Error::Config(format!(
                    "unknown training key `{other}`; valid keys: {}",
                    TrainConfig::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

/// Learning-rate controller that decays when dev perplexity stalls.
#[derive(Clone, Debug)]
pub struct NewBob {
    cfg: NewBobConfig,
    lr: f64,
    best: f64,
    stalled: usize,
}

impl NewBob {
    pub fn new(cfg: NewBobConfig, lr: f64) -> Self {
        NewBob {
            cfg,
            lr,
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records a dev perplexity; returns true if it is a new best.
    pub fn observe(&mut self, dev_ppl: f64) -> bool {
        let improved_enough = if self.best.is_finite() {
            (self.best - dev_ppl) / self.best >= self.cfg.threshold
        } else {
            dev_ppl.is_finite()
        };
        if improved_enough {
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled >= self.cfg.patience.max(1) {
                self.lr *= self.cfg.decay;
                self.stalled = 0;
            }
        }
        let is_best = dev_ppl < self.best;
        if is_best {
            self.best = dev_ppl;
        }
        is_best
    }
}

/// Scales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the factor applied.
pub fn clip_gradients(params: &mut [&mut Tensor], clip_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm.partial_cmp(&clip_norm) != Some(std::cmp::Ordering::Greater) {
        return 1.0;
    }
    let factor = clip_norm / norm;
    for p in params.iter_mut() {
        if let Some(g) = p.grad() {
            let scaled: Vec<f64> = g.iter().map(|v| v * factor).collect();
            p.zero_grad();
            p.accumulate_grad(&scaled);
        }
    }
    factor
}

/// Global L2 norm of all populated gradients.
pub fn gradient_norm(model: &TransformerLM) -> f64 {
    model
        .parameters()
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn batch_loss(
    model: &TransformerLM,
    g: &mut Graph,
    vars: &crate::model::ModelVars,
    batch: &Batch,
) -> Result<(Var, f64)> {
    let mut total: Option<Var> = None;
    for (inputs, targets) in batch.rows() {
        let (logits, _) = model.forward_graph(g, vars, inputs)?;
        let nll = g.cross_entropy(logits, targets, Reduction::Sum)?;
        total = Some(match total {
            Some(t) => g.add(t, nll)?,
            None => nll,
        });
    }
    let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    let sum = g.value(total).item()?;
    let count = batch.token_count() as f64;
    Ok((g.scale(total, 1.0 / count), sum))
}

/// Computes the token-mean loss of `batch` and accumulates its gradients into
/// the model's parameters. Returns the summed negative log-likelihood.
pub fn accumulate_batch_gradients(model: &mut TransformerLM, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let (loss, sum) = batch_loss(model, &mut g, &vars, batch)?;
    g.backward(loss)?;
    vars.accumulate_into(&g, model);
    Ok(sum)
}

fn sgd_step(model: &mut TransformerLM, lr: f64) {
    for p in model.parameters_mut() {
        if let Some(g) = p.grad().map(<[f64]>::to_vec) {
            if lr != 0.0 {
                p.data_mut().iter_mut().zip(&g).for_each(|(w, d)| *w -= lr * d);
            }
        }
        p.zero_grad();
    }
}

/// One SGD update on `batch`. Returns the summed NLL before the update.
pub fn train_step(model: &mut TransformerLM, batch: &Batch, lr: f64, clip_norm: f64) -> Result<f64> {
    model.zero_grad();
    let nll = accumulate_batch_gradients(model, batch)?;
    if !nll.is_finite() {
        return Err(Error::Diverged(format!("non-finite batch loss {nll}")));
    }
    clip_gradients(&mut model.parameters_mut(), clip_norm);
    sgd_step(model, lr);
    Ok(nll)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub sub_epoch: usize,
    pub train_ppl: f64,
    pub dev_ppl: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "sub_epoch\ttrain_ppl\tdev_ppl\tlearning_rate\twall_seconds";

    pub fn push(&mut self, row: LogRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.sub_epoch < row.sub_epoch));
        self.rows.push(row);
    }

    pub fn format_row(row: &LogRow) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.3}",
            row.sub_epoch, row.train_ppl, row.dev_ppl, row.learning_rate, row.wall_seconds
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", Self::format_row(r));
        }
        s
    }
}

/// Per-token perplexity with the decoder state reset at every sentence.
pub fn evaluate_perplexity(model: &TransformerLM, corpus: &[Vec<usize>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for s in corpus {
        nll -= model.sequence_log_prob(s)?;
        count += prediction_count(s);
    }
    if count == 0 {
        return Err(Error::Data(
            "cannot evaluate perplexity on an empty corpus".into(),
        ));
    }
    Ok((nll / count as f64).exp())
}

/// Trains with new-bob control for `cfg.max_epochs` epochs, each split into
/// `cfg.sub_epochs_per_epoch` sub-epochs. Returns the best-dev model.
pub fn train(
    mut model: TransformerLM,
    corpus: &[Vec<usize>],
    dev: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(TransformerLM, TrainLog)> {
    train_with_observer(&mut model, corpus, dev, cfg, |_| {})
}

/// Like [`train`], calling `observer` after every sub-epoch. `model` holds the
/// last-iterate parameters afterwards.
pub fn train_with_observer(
    model: &mut TransformerLM,
    corpus: &[Vec<usize>],
    dev: &[Vec<usize>],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&LogRow),
) -> Result<(TransformerLM, TrainLog)> {
    cfg.validate()?;
    if corpus.iter().all(|s| s.len() < 2) {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut schedule = NewBob::new(cfg.newbob, cfg.learning_rate);
    let mut best = model.clone();
    let mut log = TrainLog::default();
    let mut sub_epoch = 0;
    for _epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let per = order.len().div_ceil(cfg.sub_epochs_per_epoch).max(1);
        for part in order.chunks(per) {
            sub_epoch += 1;
            let lr = schedule.learning_rate();
            let mut batches = make_batches(corpus, part, cfg.batch_size);
            batches.shuffle(&mut rng);
            let (mut nll, mut count) = (0.0, 0usize);
            for (bi, batch) in batches.iter().enumerate() {
                nll += train_step(model, batch, lr, cfg.clip_norm).map_err(|e| match e {
                    Error::Diverged(msg) => Error::Diverged(format!(
                        "{msg} in sub-epoch {sub_epoch}, batch {bi}; best model retained{}",
                        cfg.checkpoint_path
                            .as_ref()
                            .map_or(String::new(), |p| format!(" at {}", p.display()))
                    )),
                    other => other,
                })?;
                count += batch.token_count();
            }
            let dev_ppl = evaluate_perplexity(model, dev)?;
            if schedule.observe(dev_ppl) {
                best = model.clone();
                if let Some(path) = &cfg.checkpoint_path {
                    checkpoint::save_checkpoint(&best, path)?;
                }
            }
            let row = LogRow {
                sub_epoch,
                train_ppl: (nll / count.max(1) as f64).exp(),
                dev_ppl,
                learning_rate: lr,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            observer(&row);
            log.push(row);
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::{BOS, EOS};

    fn grads(values: &[&[f64]]) -> Vec<Tensor> {
        values
            .iter()
            .map(|g| {
                let mut t = Tensor::zeros(vec![g.len()]);
                t.accumulate_grad(g);
                t
            })
            .collect()
    }

    fn norm(ts: &[Tensor]) -> f64 {
        ts.iter()
            .flat_map(|t| t.grad().unwrap().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn clipping_cases() {
        let mut ts = grads(&[&[1.2, 0.0], &[1.6]]);
        let f = clip_gradients(&mut ts.iter_mut().collect::<Vec<_>>(), 0.1);
        assert!((f - 0.05).abs() < 1e-15);
        assert!((norm(&ts) - 0.1).abs() < 1e-12);

        let mut ts = grads(&[&[0.3, 0.4]]);
        assert_eq!(clip_gradients(&mut ts.iter_mut().collect::<Vec<_>>(), 1.0), 1.0);
        assert_eq!(ts[0].grad().unwrap(), &[0.3, 0.4]);

        let mut ts = grads(&[&[0.0, 0.0]]);
        assert_eq!(clip_gradients(&mut ts.iter_mut().collect::<Vec<_>>(), 1.0), 1.0);
        assert!(ts[0].grad().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn newbob_decays_after_plateau_only() {
        let mut nb = NewBob::new(NewBobConfig::default(), 1.0);
        for ppl in [100.0, 80.0, 60.0] {
            nb.observe(ppl);
            assert_eq!(nb.learning_rate(), 1.0);
        }
        nb.observe(59.99);
        assert_eq!(nb.learning_rate(), 0.5);
        nb.observe(70.0);
        assert_eq!(nb.learning_rate(), 0.25);
        nb.observe(40.0);
        assert_eq!(nb.learning_rate(), 0.25);

        let mut patient = NewBob::new(
            NewBobConfig {
                patience: 2,
                ..NewBobConfig::default()
            },
            1.0,
        );
        patient.observe(10.0);
        patient.observe(10.0);
        assert_eq!(patient.learning_rate(), 1.0);
        patient.observe(10.0);
        assert_eq!(patient.learning_rate(), 0.5);
    }

    #[test]
    fn evaluator_conventions() {
        let mut m = TransformerLM::new(ModelConfig::new(1, 8, 4, 2, 7), 1).unwrap();
        for p in m.output.weight.data_mut() {
            *p = 0.0;
        }
        let corpus = vec![vec![BOS, 3, 4, EOS], vec![BOS, EOS], vec![BOS, 6, 6, 6, EOS]];
        let ppl = evaluate_perplexity(&m, &corpus).unwrap();
        assert!((ppl - 7.0).abs() < 1e-12);
        assert!(matches!(evaluate_perplexity(&m, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let m = TransformerLM::new(ModelConfig::new(1, 8, 4, 2, 6), 2).unwrap();
        let corpus: Vec<Vec<usize>> = (0..6).map(|i| vec![BOS, 3 + i % 3, 4, EOS]).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            sub_epochs_per_epoch: 3,
            batch_size: 2,
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let mut last = m.clone();
        let (_, log) = train_with_observer(&mut last, &corpus, &corpus, &cfg, |_| {}).unwrap();
        assert_eq!(last, m);
        assert!(log.rows.windows(2).all(|w| w[0].dev_ppl == w[1].dev_ppl));
    }

    #[test]
    fn invalid_train_config() {
        let bad = TrainConfig {
            newbob: NewBobConfig {
                decay: 1.5,
                ..NewBobConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut cfg = TrainConfig::default();
        assert!(cfg
            .set("momentum", "0.9")
            .unwrap_err()
            .to_string()
            .contains("valid keys"));
        cfg.set("clip_norm", "0.1").unwrap();
        assert_eq!(cfg.clip_norm, 0.1);
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = TransformerLM::new(ModelConfig::new(1, 8, 4, 2, 6), 2).unwrap();
        m.output.bias.as_mut().unwrap().data_mut()[3] = f64::NAN;
        let corpus = vec![vec![BOS, 3, EOS]];
        let err = train(m, &corpus, &corpus, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
    }
}
