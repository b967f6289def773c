//! Sparse data diffusion.
//!
//! Continuous data whose entries are often exactly zero is diffused together
//! with one binary "sparsity bit" per dimension. At sampling time the bits
//! gate the dense values, so generated points contain exact zeros.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use codec::{DataBatch, ExtendedState, ScaleMode, ScaleSpec};
pub use data::{DatasetHandle, SyntheticKind, SyntheticSpec};
pub use error::{Result, SddError};
pub use metrics::{EvalOptions, MetricsReport};
pub use numerics::{Matrix, Rng};
pub use sampler::{SampleConfig, SamplerKind};
pub use schedule::NoiseSchedule;
pub use trainer::{TrainConfig, Trainer};
