use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use tlm::analysis::write_dump;
use tlm::checkpoint::{load_checkpoint, save_checkpoint};
use tlm::fusion::{decode, format_nbest};
use tlm::text::{build_vocab, BOS, EOS};
use tlm::train::train_with_observer;
use tlm::{
    diagonality_report, dump_attention, evaluate_perplexity, param_count as count_params, parse_lattice,
    rescore as rescore_lattice, AcousticOracle, BpeModel, ModelConfig, Tokenizer, TrainConfig, TrainLog,
    TransformerLM, Vocabulary,
};

use crate::settings::{CliError, CliResult, Group, Settings};
use crate::{
    BpeApplyArgs, BpeLearnArgs, DumpAttnArgs, EvalArgs, FuseArgs, ParamCountArgs, RescoreArgs, TokenizerArgs,
    TrainArgs,
};

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Run(tlm::Error::Data(format!("{}: {e}", path.display()))))
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).map_err(|e| CliError::Run(tlm::Error::Data(format!("{}: {e}", path.display()))))
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    Ok(Vocabulary::from_file_string(&read(path)?)?)
}

fn load_tokenizer(args: &TokenizerArgs) -> CliResult<Tokenizer> {
    let vocab = load_vocab(&args.vocab)?;
    Ok(match &args.bpe {
        Some(p) => Tokenizer::Bpe {
            model: BpeModel::from_file_string(&read(p)?)?,
            vocab,
        },
        None => Tokenizer::Word(vocab),
    })
}

/// Loads a checkpoint and checks that it was trained over `vocab`.
fn load_model(path: &Path, vocab: &Vocabulary) -> CliResult<TransformerLM> {
    let model = load_checkpoint(path)?;
    if model.vocab_size() != vocab.len() {
        return Err(CliError::Run(tlm::Error::Config(format!(
            "model has {} outputs but the vocabulary holds {} tokens",
            model.vocab_size(),
            vocab.len()
        ))));
    }
    Ok(model)
}

/// Fixes `vocab_size` to the vocabulary unless the settings name another
/// value, which is then an error.
fn model_config(settings: &Settings, vocab: &Vocabulary) -> CliResult<ModelConfig> {
    let base = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let cfg = settings.model(base)?;
    if cfg.vocab_size != vocab.len() {
        return Err(CliError::Usage(format!(
            "vocab_size={} disagrees with the {}-token vocabulary",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let settings = Settings::load(
        a.config.config.as_deref(),
        &a.config.overrides,
        &[Group::Model, Group::Train],
    )?;
    let train_text = read(&a.train)?;
    let dev_text = read(&a.dev)?;
    let bpe = a
        .bpe
        .as_deref()
        .map(read)
        .transpose()?
        .map(|t| BpeModel::from_file_string(&t))
        .transpose()?;
    let max_vocab = a.max_vocab.unwrap_or(usize::MAX);
    let tokenizer = match (a.vocab.as_deref(), bpe) {
        (Some(v), Some(model)) => Tokenizer::Bpe {
            model,
            vocab: load_vocab(v)?,
        },
        (Some(v), None) => Tokenizer::Word(load_vocab(v)?),
        (None, Some(model)) => {
            let segmented: Vec<String> = train_text
                .lines()
                .map(|l| model.apply_line(l).join(" "))
                .collect();
            let vocab = build_vocab(&segmented.join("\n"), max_vocab)?;
            Tokenizer::Bpe { model, vocab }
        }
        (None, None) => Tokenizer::Word(build_vocab(&train_text, max_vocab)?),
    };
    write(&a.vocab_out, &tokenizer.vocab().to_file_string())?;

    let model_cfg = model_config(&settings, tokenizer.vocab())?;
    let mut train_cfg = TrainConfig {
        clip_norm: if model_cfg.tied_layers { 0.1 } else { 1.0 },
        ..TrainConfig::default()
    };
    train_cfg = settings.train(train_cfg)?;
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    let model = TransformerLM::new(model_cfg, train_cfg.seed)?;
    let corpus = tokenizer.encode_corpus(&train_text);
    let dev = tokenizer.encode_corpus(&dev_text);
    eprintln!(
        "{} parameters, {} training sentences, {} dev sentences",
        model.num_parameters(),
        corpus.len(),
        dev.len()
    );
    eprintln!("{}", TrainLog::HEADER);

    let mut last = model.clone();
    let (best, log) = train_with_observer(&mut last, &corpus, &dev, &train_cfg, |row| {
        eprintln!("{}", TrainLog::format_row(row))
    })?;
    save_checkpoint(&best, &a.model)?;
    if let Some(path) = &a.log {
        write(path, &log.to_tsv())?;
    }
    println!("dev_perplexity\t{}", evaluate_perplexity(&best, &dev)?);
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let tokenizer = load_tokenizer(&a.tokenizer)?;
    let model = load_model(&a.model, tokenizer.vocab())?;
    let corpus = tokenizer.encode_corpus(&read(&a.text)?);
    let predictions: usize = corpus.iter().map(|s| s.len().saturating_sub(1)).sum();
    let ppl = evaluate_perplexity(&model, &corpus)?;
    println!(
        "perplexity\t{ppl}\tsentences\t{}\tpredictions\t{predictions}",
        corpus.len()
    );
    Ok(())
}

pub fn rescore(a: RescoreArgs) -> CliResult<()> {
    let settings = Settings::load(a.config.config.as_deref(), &a.config.overrides, &[Group::Rescore])?;
    let cfg = settings.rescore()?;
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let mut out = String::new();
    for path in &a.lattices {
        let lat = parse_lattice(&read(path)?, &vocab).map_err(|e| match e {
            tlm::Error::Data(m) | tlm::Error::Structure(m) => {
                tlm::Error::Data(format!("{}: {m}", path.display()))
            }
            e => e,
        })?;
        if lat.unknown_words() > 0 {
            eprintln!(
                "{}: {} arcs carry out-of-vocabulary words",
                path.display(),
                lat.unknown_words()
            );
        }
        let best = rescore_lattice(&lat, &model, &cfg)?;
        let name = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
        let _ = writeln!(out, "{name}\t{}", best.to_tsv_line());
    }
    write(&a.out, &out)
}

pub fn fuse(a: FuseArgs) -> CliResult<()> {
    let settings = Settings::load(a.config.config.as_deref(), &a.config.overrides, &[Group::Fusion])?;
    let cfg = settings.fusion()?;
    if a.nbest == 0 {
        return Err(CliError::Usage("--nbest must be at least 1".into()));
    }
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.model, &vocab)?;
    let oracle = AcousticOracle::load(&a.scores, &vocab)?;
    let mut out = String::new();
    for (utt, scores) in oracle.utterances() {
        let mut result = decode(scores, &model, &cfg)?;
        result.nbest.truncate(a.nbest);
        out.push_str(&format_nbest(utt, &result, &vocab)?);
    }
    write(&a.out, &out)
}

pub fn dump_attn(a: DumpAttnArgs) -> CliResult<()> {
    let tokenizer = load_tokenizer(&a.tokenizer)?;
    let vocab = tokenizer.vocab();
    let settings = Settings::load(a.config.config.as_deref(), &a.config.overrides, &[Group::Model])?;
    let model = match &a.model {
        Some(path) => {
            if !settings.is_empty() {
                return Err(CliError::Usage("model keys apply only without --model".into()));
            }
            load_model(path, vocab)?
        }
        None => TransformerLM::new(model_config(&settings, vocab)?, a.seed.unwrap_or(0))?,
    };
    let mut inputs = tokenizer.encode_sentence(&a.sentence);
    if inputs.last() == Some(&EOS) {
        inputs.pop();
    }
    let labels = inputs
        .iter()
        .map(|&t| vocab.token(t).map(String::from))
        .collect::<tlm::Result<Vec<_>>>()?;
    debug_assert_eq!(inputs.first(), Some(&BOS));

    let dump = dump_attention(&model, &inputs, labels.clone())?;
    let mut written = write_dump(&dump, &a.out_dir, &a.stem)?;

    let report = diagonality_report(&dump, a.window);
    let report_path = a.out_dir.join(format!("{}.diag.tsv", a.stem));
    write(&report_path, &report.to_tsv())?;
    written.push(report_path);

    let log_probs = model.log_probs_parallel(&inputs)?;
    let mut lp = String::new();
    for (t, label) in labels.iter().enumerate() {
        let row: Vec<String> = log_probs.row(t).iter().map(f64::to_string).collect();
        let _ = writeln!(lp, "{t}\t{label}\t{}", row.join("\t"));
    }
    let lp_path = a.out_dir.join(format!("{}.logprobs.tsv", a.stem));
    write(&lp_path, &lp)?;
    written.push(lp_path);

    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn bpe_learn(a: BpeLearnArgs) -> CliResult<()> {
    let corpus = read(&a.input)?;
    let model = BpeModel::learn(&corpus, a.merges);
    if model.merges().len() < a.merges {
        eprintln!(
            "learned {} merges; no pair repeats after that",
            model.merges().len()
        );
    }
    write(&a.out, &model.to_file_string())
}

pub fn bpe_apply(a: BpeApplyArgs) -> CliResult<()> {
    let model = BpeModel::from_file_string(&read(&a.bpe)?)?;
    let mut out = String::new();
    for line in read(&a.input)?.lines() {
        out.push_str(&model.apply_line(line).join(" "));
        out.push('\n');
    }
    write(&a.out, &out)
}

pub fn param_count(a: ParamCountArgs) -> CliResult<()> {
    let settings = Settings::load(a.config.config.as_deref(), &a.config.overrides, &[Group::Model])?;
    let cfg = settings.model(ModelConfig::default())?;
    let n = count_params(&cfg);
    println!("{n}\t{:.2}M", n as f64 / 1e6);
    Ok(())
}
