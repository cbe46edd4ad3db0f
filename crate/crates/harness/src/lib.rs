//! Command implementations behind the `tipool` binary: dataset generation,
//! training in the TI, augmentation and MIL regimes, evaluation, gradient
//! checking, the rotation-count sweep and canonical-instance export.

pub mod canonical;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Regime, TrainConfig};
pub use error::{HarnessError, Result};
pub use train::{RunSummary, Trainer};
