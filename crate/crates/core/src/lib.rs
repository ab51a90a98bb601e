//! Federated meta-learning for RSSI fingerprint indoor localization.
//!
//! Every client owns a three-part network: a task-specific encoder that maps
//! its own access-point space onto a shared latent space, a meta-model shared
//! across the federation, and a task-specific location mapper. Clients train
//! the full network on their support set, then upload the query-set gradient
//! of the shared part; the server folds these into the meta-model. New tasks
//! start from the trained meta-model and adapt in a few gradient steps.
//!
//! The crate is `no_std` (with `alloc`). File formats, parallel execution and
//! the command line live in the `femloc` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod theory;

pub use error::{Error, ErrorKind, Result};
pub use linalg::Matrix;
