//! Communication-efficient personalized federated learning for graph
//! classification, simulated on one machine.
//!
//! Each client keeps a shared low-rank channel `W` and a private sparse
//! channel `S`; only quantized and truncated updates of `W` travel, and
//! communication happens on a random subset of rounds.

pub mod compress;
pub mod fedcore;
pub mod gnn;
pub mod graphdata;
pub mod harness;
pub mod linalg;
pub mod rng;
