//! Server-side aggregation and participant selection.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{client::UPLINK_PREFIX_H, client::UPLINK_PREFIX_W, FedError, Result};
use crate::compress::CompressedPayload;
use crate::gnn::ModelParams;
use crate::linalg::{truncate_matrix, Matrix, ThresholdMode};

/// Retained ranks of the rank-truncated (non-vector) tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    /// `(name, retained rank, full rank min(rows, cols))`
    pub ranks: Vec<(String, usize, usize)>,
    /// `(rows, cols)` per entry of `ranks`.
    pub shapes: Vec<(usize, usize)>,
}

impl AggregateStats {
    /// Fraction of singular values kept over all truncated tensors.
    pub fn lowrank_ratio(&self) -> f64 {
        let full: usize = self.ranks.iter().map(|r| r.2).sum();
        let kept: usize = self.ranks.iter().map(|r| r.1).sum();
        if full == 0 {
            1.0
        } else {
            kept as f64 / full as f64
        }
    }

    /// Parameters of the factored form `k(m + n + 1)` relative to the dense
    /// `m·n`, over all truncated tensors.
    pub fn factor_fraction(&self) -> f64 {
        let dense: usize = self.shapes.iter().map(|(m, n)| m * n).sum();
        let factored: usize = self
            .ranks
            .iter()
            .zip(&self.shapes)
            .map(|(r, (m, n))| r.1 * (m + n + 1))
            .sum();
        if dense == 0 {
            1.0
        } else {
            factored as f64 / dense as f64
        }
    }
}

/// Weighted aggregate of client uplinks followed by per-tensor truncation:
/// `Θ_M = T_τ(Σ wᵢ·Wᵢ_M − η·Σ wᵢ·hᵢ_M)` with `wᵢ ∝ sample size`.
/// Vector-shaped tensors (biases) are never truncated.
pub fn server_aggregate(
    payloads: &[(usize, &CompressedPayload)],
    eta: f64,
    tau_lowrank: f64,
) -> Result<(ModelParams, AggregateStats)> {
    if payloads.is_empty() {
        return Err(FedError::NoPayloads);
    }
    let total: usize = payloads.iter().map(|(n, _)| n).sum();
    let weight = |n: usize| {
        if total == 0 {
            1.0 / payloads.len() as f64
        } else {
            n as f64 / total as f64
        }
    };
    let decoded: Vec<(f64, Vec<(String, Matrix)>)> = payloads
        .iter()
        .map(|(n, p)| (weight(*n), p.reconstruct()))
        .collect();

    let mut out = Vec::with_capacity(ModelParams::NAMES.len());
    let mut stats = AggregateStats::default();
    for name in ModelParams::NAMES {
        let w_key = format!("{UPLINK_PREFIX_W}{name}");
        let h_key = format!("{UPLINK_PREFIX_H}{name}");
        let mut acc: Option<Matrix> = None;
        for (wt, tensors) in &decoded {
            let find = |key: &str| {
                tensors
                    .iter()
                    .find(|(n, _)| n == key)
                    .map(|(_, m)| m)
                    .ok_or_else(|| FedError::BadConfig(format!("payload lacks tensor {key}")))
            };
            let (w, h) = (find(&w_key)?, find(&h_key)?);
            let acc = acc.get_or_insert_with(|| Matrix::zeros(w.rows(), w.cols()));
            acc.axpy(*wt, w)?;
            acc.axpy(-eta * wt, h)?;
        }
        let m = acc.expect("at least one payload");
        let vector = m.rows().min(m.cols()) <= 1;
        let (m, rank) = truncate_matrix(&m, ThresholdMode::Relative, tau_lowrank)?;
        if !vector {
            stats.ranks.push((name.to_owned(), rank, m.rows().min(m.cols())));
            stats.shapes.push(m.shape());
        }
        out.push((name, m));
    }
    Ok((ModelParams::from_named(out)?, stats))
}

/// `⌈K·ρ⌉` distinct client ids, sorted.
pub fn sample_clients<R: Rng + ?Sized>(k: usize, rho: f64, rng: &mut R) -> Vec<usize> {
    // The tolerance keeps e.g. 10 · 0.3 = 3.0000000000000004 at 3.
    let m = ((k as f64 * rho - 1e-9).ceil() as usize).clamp(usize::from(k > 0), k);
    let mut ids = rand::seq::index::sample(rng, k, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Draws one drop rate `q ~ Beta(a, b)` and drops each participant
/// independently with probability `q`. Returns the survivors in order.
pub fn dropout_filter<R: Rng + ?Sized>(
    participants: &[usize],
    beta_a: f64,
    beta_b: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let dist = Beta::new(beta_a, beta_b)
        .map_err(|e| FedError::BadConfig(format!("dropout Beta({beta_a}, {beta_b}): {e}")))?;
    if participants.is_empty() {
        return Ok(Vec::new());
    }
    let q: f64 = dist.sample(rng);
    Ok(participants
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= q)
        .collect())
}
