//! Generalized source-free domain adaptation: a split network whose
//! bottleneck features are gated by per-domain sparse attention, adapted to
//! unlabeled target data with a local-structure clustering loss while the
//! channels claimed by other domains are protected.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod lsc;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod sda;

pub use error::{Error, Result};
