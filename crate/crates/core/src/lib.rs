//! Memory-driven Transformer for generating long, patterned reports from
//! patch features: a relational memory carried across decoding steps and
//! layer norms whose scale and shift are predicted from that memory.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`Tape`]).

pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod generation;
pub mod layers;
pub mod mcln;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod params;
pub mod syndata;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use generation::{DecodeConfig, Hypothesis};
pub use memory::{MemoryParams, MemoryState};
pub use metrics::{MetricsReport, NlgScores};
pub use model::{AblationMode, Model, ModelConfig};
pub use params::{Initializer, ParamId, ParamStore};
pub use syndata::{DataConfig, SyntheticSample};
pub use tensor::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
pub use train::{Dataset, RunConfig};
pub use vocab::Vocab;
