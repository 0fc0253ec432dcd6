//! The toy detector, its training loop and evaluation.

mod config;
pub mod data;
pub mod detector;
pub mod metrics;
pub mod proposals;
pub mod train;

pub use config::{ProposalConfig, TrainConfig};
pub use data::{Dataset, Proposal, Sample};
pub use detector::{Detector, BG_CLASS, FG_CLASS};
pub use metrics::{evaluate, Detection, Metrics};
pub use proposals::propose;
pub use train::{train, Checkpoint, IterRecord, MetricsRow, RunData, TrainOutput};
