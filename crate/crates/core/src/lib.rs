//! Conditional multi-scale normalizing flows for grid-sequence forecasting.

pub mod checkpoint;
pub mod conditioner;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;
pub mod verify;

pub use checkpoint::{Checkpoint, TrainState};
pub use conditioner::{Conditioner, MemoryState};
pub use config::RunConfig;
pub use data::{GridMeta, GridSequence};
pub use error::{Error, Result};
pub use flow::FlowState;
pub use model::{bits_per_dim, CondAdapt, ModelConfig, StFlow};
pub use optim::{Adam, AdamConfig};
pub use params::{Ctx, ParamId, ParamStore};
pub use train::Trainer;
