use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::CliError;

/// Transformer language models: training, evaluation, lattice rescoring,
/// shallow-fusion decoding and attention analysis.
#[derive(Parser, Debug)]
#[command(name = "tlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flat `key=value` configuration shared by the configurable subcommands.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Configuration file with one `key=value` per line
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set layers=4`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Tokenizer files written by `train`.
#[derive(Args, Debug)]
pub struct TokenizerArgs {
    /// Vocabulary file, one token per line
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// BPE merge list; segments words into subword units
    #[arg(long, value_name = "FILE")]
    pub bpe: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and save the checkpoint with the best dev perplexity
    Train(TrainArgs),
    /// Print the perplexity of a model on a text file
    Eval(EvalArgs),
    /// Rescore word lattices and print the best path for each
    Rescore(RescoreArgs),
    /// Decode utterances from acoustic scores with shallow fusion
    Fuse(FuseArgs),
    /// Write per-layer attention weights as CSV and PGM heatmaps
    DumpAttn(DumpAttnArgs),
    /// Learn BPE merges from a corpus
    BpeLearn(BpeLearnArgs),
    /// Segment a corpus with learned BPE merges
    BpeApply(BpeApplyArgs),
    /// Print the parameter count of a configuration
    ParamCount(ParamCountArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training text, one sentence per line
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Development text for learning-rate control and model selection
    #[arg(long, value_name = "FILE")]
    pub dev: PathBuf,
    /// Where to write the best checkpoint
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Where to write the vocabulary
    #[arg(long, value_name = "FILE")]
    pub vocab_out: PathBuf,
    /// Existing vocabulary to use instead of building one from `--train`
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// BPE merge list; the vocabulary then holds subword units
    #[arg(long, value_name = "FILE")]
    pub bpe: Option<PathBuf>,
    /// Most frequent tokens to keep when building the vocabulary
    #[arg(long, value_name = "N")]
    pub max_vocab: Option<usize>,
    /// Per-sub-epoch log as TSV
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Seed for initialization and data order; overrides the `seed` key
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Text to evaluate, one sentence per line
    #[arg(long, value_name = "FILE")]
    pub text: PathBuf,
}

#[derive(Args, Debug)]
pub struct RescoreArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Word vocabulary of the model
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Lattice files; repeatable
    #[arg(long = "lattice", value_name = "FILE", required = true)]
    pub lattices: Vec<PathBuf>,
    /// Output TSV: lattice, words, LM scores, total score
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Acoustic score file
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Output TSV: utterance, rank, words, score, acoustic, LM
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Hypotheses to keep per utterance
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub nbest: usize,
}

#[derive(Args, Debug)]
pub struct DumpAttnArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint; without it a randomly initialized model is used
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Sentence to analyse
    #[arg(long)]
    pub sentence: String,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// File name stem for the outputs
    #[arg(long, default_value = "attn")]
    pub stem: String,
    /// Window for the local attention mass
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    /// Seed for the random model
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BpeLearnArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Number of merges to learn
    #[arg(long, value_name = "N")]
    pub merges: usize,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BpeApplyArgs {
    #[arg(long, value_name = "FILE")]
    pub bpe: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParamCountArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Rescore(a) => commands::rescore(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::DumpAttn(a) => commands::dump_attn(a),
        Command::BpeLearn(a) => commands::bpe_learn(a),
        Command::BpeApply(a) => commands::bpe_apply(a),
        Command::ParamCount(a) => commands::param_count(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tlm: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Run(_) => ExitCode::FAILURE,
            }
        }
    }
}
