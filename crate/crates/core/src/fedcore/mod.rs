//! Federated training state machines: dual-channel clients with correction
//! terms, the compressing server, communication skipping with client
//! sampling and dropout, and FedAvg/FedProx baselines.

mod client;
mod round;
mod server;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compress::{CodecError, Scheme, Sparsifier};
use crate::gnn::{GnnError, ModelParams};
use crate::graphdata::GraphDataset;
use crate::linalg::LinalgError;

pub use client::{
    client_uplink, finetune_sparse, fedprox_local_step, local_train_round, sgd_epochs,
    update_correction, update_correction_proxskip, UPLINK_PREFIX_H, UPLINK_PREFIX_W,
};
pub use round::{fedavg_round, run_round, ClientRoundStat, Federation, RoundRecord};
pub use server::{dropout_filter, sample_clients, server_aggregate, AggregateStats};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("client {client} diverged in round {round} (non-finite parameters; step size too large?)")]
    DivergenceDetected { client: usize, round: u64 },
    #[error("aggregated model is non-finite in round {round}")]
    ServerDivergence { round: u64 },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("no payloads to aggregate")]
    NoPayloads,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, FedError>;

/// How the correction term `h` evolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// `h` stays zero.
    Off,
    /// `h ← h + (Θ_view − W)/η` after local training, every round.
    #[default]
    EveryRound,
    /// `h ← h + (p/η)(Θ_new − W)` only on communicated rounds, with the
    /// server stepping by `η/p`.
    ProxSkip,
}

/// Training algorithm driven by [`Federation::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Cefgl,
    FedAvg,
    FedProx,
    /// Sparse channel only: no shared channel, no communication.
    LocalSparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub eta: f64,
    pub alpha: f64,
    pub nu: f64,
    pub sparsifier: Sparsifier,
    pub local_epochs: usize,
    pub finetune_epochs: usize,
    /// Graphs per step; 0 means the whole training set.
    pub batch_size: usize,
    pub mu_prox: f64,
    pub correction: CorrectionMode,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            alpha: 0.6,
            nu: 0.5,
            sparsifier: Sparsifier::Threshold { cut: 1e-3 },
            local_epochs: 1,
            finetune_epochs: 1,
            batch_size: 0,
            mu_prox: 1e-2,
            correction: CorrectionMode::EveryRound,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedError::BadConfig(m));
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        for (name, v) in [("alpha", self.alpha), ("nu", self.nu), ("mu_prox", self.mu_prox)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        match self.sparsifier {
            Sparsifier::Threshold { cut } if !(cut.is_finite() && cut >= 0.0) => {
                bad(format!("cut_sparse must be >= 0, got {cut}"))
            }
            Sparsifier::TopK { beta } if !(0.0..=1.0).contains(&beta) => {
                bad(format!("beta must lie in [0, 1], got {beta}"))
            }
            _ => Ok(()),
        }
    }
}

/// A client's train/validation/test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: GraphDataset,
    pub val: GraphDataset,
    pub test: GraphDataset,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Low-rank (shared) channel.
    pub w: ModelParams,
    /// Sparse (private) channel.
    pub s: ModelParams,
    /// Correction term.
    pub h: ModelParams,
    /// Latest global parameters seen by this client.
    pub theta_view: ModelParams,
    pub data: Arc<ClientData>,
    pub cfg: ClientConfig,
}

impl ClientState {
    /// Client starting from `theta`, with `h = 0` and sparse channel `s`.
    pub fn new(
        id: usize,
        theta: &ModelParams,
        s: ModelParams,
        data: Arc<ClientData>,
        cfg: ClientConfig,
    ) -> Result<Self> {
        theta.check_congruent(&s)?;
        Ok(Self {
            id,
            w: theta.clone(),
            h: theta.zeros_like(),
            theta_view: theta.clone(),
            s,
            data,
            cfg,
        })
    }

    /// Parameters used for inference: `Θ_view + S`.
    pub fn personalized(&self) -> Result<ModelParams> {
        Ok(crate::gnn::combine(&self.theta_view, &self.s)?)
    }
}

/// Seeds of the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub coin: u64,
    pub sampling: u64,
    pub dropout: u64,
    /// Mini-batch order.
    pub local: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed,
            coin: seed,
            sampling: seed,
            dropout: seed,
            local: seed,
        }
    }
}

/// Simulated network used to turn bits into wall time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub bandwidth_bps: f64,
    pub latency_s: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            bandwidth_bps: 100e6,
            latency_s: 0.02,
        }
    }
}

impl NetworkModel {
    pub fn wall_time(&self, bits: u64, messages: usize) -> f64 {
        bits as f64 / self.bandwidth_bps + self.latency_s * messages as f64
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta: ModelParams,
    /// Index of the next round.
    pub t: u64,
    pub p: f64,
    pub rho: f64,
    pub tau_lowrank: f64,
    pub r_bits: u8,
    pub downlink: Scheme,
    pub seeds: Seeds,
    /// Beta(a, b) drop rate per round, if dropout is simulated.
    pub dropout: Option<(f64, f64)>,
    pub network: NetworkModel,
}

impl ServerState {
    pub fn new(theta: ModelParams, seeds: Seeds) -> Self {
        Self {
            theta,
            t: 0,
            p: 0.5,
            rho: 1.0,
            tau_lowrank: 1e-4,
            r_bits: 4,
            downlink: Scheme::Quantized,
            seeds,
            dropout: None,
            network: NetworkModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedError::BadConfig(m));
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1], got {}", self.p));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.tau_lowrank.is_finite() && self.tau_lowrank >= 0.0) {
            return bad(format!("tau_lowrank must be >= 0, got {}", self.tau_lowrank));
        }
        if !(1..=32).contains(&self.r_bits) {
            return bad(format!("r_bits must lie in 1..=32, got {}", self.r_bits));
        }
        if let Some((a, b)) = self.dropout {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return bad(format!("dropout Beta parameters must be > 0, got ({a}, {b})"));
            }
        }
        if !(self.network.bandwidth_bps > 0.0 && self.network.latency_s >= 0.0) {
            return bad("network bandwidth must be > 0 and latency >= 0".into());
        }
        Ok(())
    }
}
