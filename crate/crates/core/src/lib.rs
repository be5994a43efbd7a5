//! Autoregressive Transformer language models built on a small `f64`
//! autodiff core, with push-forward lattice rescoring, shallow-fusion beam
//! search and attention-weight analysis.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod lattice;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod train;

pub use analysis::{diagonality_report, dump_attention, AttentionDump};
pub use error::{Error, Result};
pub use fusion::{AcousticOracle, FusionConfig};
pub use graph::{Graph, Reduction, Var};
pub use lattice::{parse_lattice, rescore, Lattice, RescoreConfig};
pub use model::{param_count, DecoderState, ModelConfig, TransformerLM};
pub use nn::{Activation, PeMode};
pub use tensor::Tensor;
pub use text::{BpeModel, Tokenizer, Vocabulary};
pub use train::{evaluate_perplexity, train, TrainConfig, TrainLog};
