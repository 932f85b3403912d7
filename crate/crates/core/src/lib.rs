//! AggPose: a multi-resolution transformer for top-down keypoint heatmap
//! regression, with its heatmap codec, checkpoints and training loop.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

pub use checkpoint::{load_partial, Checkpoint, LoadPolicy, LoadReport};
pub use config::ModelConfig;
pub use error::{CoreError, Result};
pub use model::{Model, ModelOutput, Network};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use train::{TrainConfig, Trainer};
