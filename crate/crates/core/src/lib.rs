//! Simulator for federated structured pruning.
//!
//! A server holds a [`VarStore`](var_store::VarStore) of named tensors. Every
//! few rounds it scores slices (rows, columns or their halves) of the
//! prunable matrices, masks the least important ones, and sends clients only
//! the kept slices. Clients train the reduced model; their deltas are
//! expanded back to full shape and averaged. Near the end the model is
//! physically reduced and trained with plain federated averaging.
//!
//! Everything is seeded: equal configs give byte-identical metrics.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod importance;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod var_store;

pub use config::{parse_config, RunConfig};
pub use engine::{run_experiment, ExperimentOutput, Simulation};
pub use error::{FedPruneError, Result};
