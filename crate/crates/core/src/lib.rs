//! Video person re-identification from appearance and gait.
//!
//! Three networks share one input sequence: an appearance network (global and
//! foreground-masked branches over a CNN backbone), a set-based gait network over aligned
//! silhouettes, and a channel-attention fusion module over their concatenation.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
