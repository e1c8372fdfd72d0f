//! One federated round: coin, sampling, dropout, local work, aggregation
//! and downlink.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{
    client_uplink, finetune_sparse, local_train_round, sgd_epochs, update_correction,
    update_correction_proxskip,
};
use super::server::{dropout_filter, sample_clients, server_aggregate, AggregateStats};
use super::{Algorithm, ClientState, CorrectionMode, FedError, Result, ServerState};
use crate::compress::{dense_bits, encode_payload, CodecConfig, CompressedPayload, Scheme};
use crate::gnn::{evaluate, ModelParams};
use crate::linalg::{weighted_sum, Matrix};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStat {
    pub id: usize,
    /// Mean local training loss, for clients that trained this round.
    pub train_loss: Option<f64>,
    /// Accuracy of `Θ_view + S` on the client's test set.
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    /// Fraction of non-zero entries in `S`.
    pub s_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u64,
    pub communicated: bool,
    pub participants: Vec<usize>,
    pub dropped: Vec<usize>,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    /// Simulated transfer time in seconds.
    pub wall_time: f64,
    pub mean_test_accuracy: Option<f64>,
    pub mean_train_loss: Option<f64>,
    pub mean_s_density: f64,
    /// Present on rounds that ran the truncating aggregation.
    pub lowrank_ratio: Option<f64>,
    pub factor_fraction: Option<f64>,
    pub clients: Vec<ClientRoundStat>,
}

impl RoundRecord {
    pub fn total_bits(&self) -> u64 {
        self.uplink_bits + self.downlink_bits
    }
}

struct Selection {
    participants: Vec<usize>,
    survivors: Vec<usize>,
    dropped: Vec<usize>,
}

fn select(server: &ServerState, k: usize) -> Result<Selection> {
    let t = server.t;
    let participants =
        sample_clients(k, server.rho, &mut rng::stream(server.seeds.sampling, "sample", &[t]));
    let survivors = match server.dropout {
        None => participants.clone(),
        Some((a, b)) => dropout_filter(
            &participants,
            a,
            b,
            &mut rng::stream(server.seeds.dropout, "dropout", &[t]),
        )?,
    };
    let dropped = participants
        .iter()
        .copied()
        .filter(|id| !survivors.contains(id))
        .collect();
    Ok(Selection {
        participants,
        survivors,
        dropped,
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn check_ids(clients: &[ClientState]) -> Result<()> {
    if clients.is_empty() {
        return Err(FedError::BadConfig("no clients".into()));
    }
    if clients.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(FedError::BadConfig("client ids must be 0..K in order".into()));
    }
    Ok(())
}

fn evaluate_clients(
    clients: &[ClientState],
    losses: &[(usize, Option<f64>)],
) -> Result<Vec<ClientRoundStat>> {
    clients
        .par_iter()
        .map(|c| {
            let eval = if c.data.test.is_empty() {
                None
            } else {
                Some(evaluate(&c.personalized()?, &c.data.test)?)
            };
            Ok(ClientRoundStat {
                id: c.id,
                train_loss: losses.iter().find(|(id, _)| *id == c.id).and_then(|l| l.1),
                test_accuracy: eval.map(|e| e.accuracy),
                test_loss: eval.map(|e| e.mean_loss),
                s_density: c.s.count_nonzero() as f64 / c.s.num_params() as f64,
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finish(
    server: &mut ServerState,
    clients: &[ClientState],
    communicated: bool,
    sel: Selection,
    losses: Vec<(usize, Option<f64>)>,
    bits: (u64, u64),
    messages: usize,
    stats: Option<AggregateStats>,
) -> Result<RoundRecord> {
    let stats_per_client = evaluate_clients(clients, &losses)?;
    let record = RoundRecord {
        t: server.t,
        communicated,
        participants: sel.participants,
        dropped: sel.dropped,
        uplink_bits: bits.0,
        downlink_bits: bits.1,
        wall_time: server.network.wall_time(bits.0 + bits.1, messages),
        mean_test_accuracy: mean(stats_per_client.iter().map(|s| s.test_accuracy)),
        mean_train_loss: mean(losses.iter().map(|l| l.1)),
        mean_s_density: stats_per_client.iter().map(|s| s.s_density).sum::<f64>()
            / stats_per_client.len() as f64,
        lowrank_ratio: stats.as_ref().map(AggregateStats::lowrank_ratio),
        factor_fraction: stats.as_ref().map(AggregateStats::factor_fraction),
        clients: stats_per_client,
    };
    server.t += 1;
    Ok(record)
}

fn downlink_codec(server: &ServerState) -> CodecConfig {
    match server.downlink {
        Scheme::Dense => CodecConfig::dense(),
        Scheme::Quantized => CodecConfig::quantized(server.r_bits),
        Scheme::LowRankQuantized => CodecConfig::low_rank(server.r_bits, server.tau_lowrank),
    }
}

fn encode_params(p: &ModelParams, cfg: &CodecConfig) -> Result<CompressedPayload> {
    Ok(encode_payload(p.tensors(), cfg)?)
}

/// One CEFGL round. Survivors train `W`, fine-tune `S`, update `h` and,
/// if the coin says so, upload; the server then aggregates, truncates and
/// sends the quantized `Θ` to every client. On skipped rounds survivors
/// adopt their own `W` as `Θ_view` and nothing is billed.
pub fn run_round(server: &mut ServerState, clients: &mut [ClientState]) -> Result<RoundRecord> {
    check_ids(clients)?;
    server.validate()?;
    let t = server.t;
    let communicated = rng::stream(server.seeds.coin, "coin", &[t]).random::<f64>() < server.p;
    let sel = select(server, clients.len())?;
    let (seed, r_bits) = (server.seeds.local, server.r_bits);

    let outputs: Vec<(usize, Option<f64>, Option<CompressedPayload>)> = clients
        .par_iter_mut()
        .filter(|c| sel.survivors.contains(&c.id))
        .map(|c| {
            let loss = local_train_round(c, seed, t)?;
            finetune_sparse(c, seed, t)?;
            if c.cfg.correction == CorrectionMode::EveryRound {
                update_correction(c)?;
            }
            // Finite but huge entries overflow the codec norm.
            if !c.h.frobenius_norm().is_finite() || !c.w.frobenius_norm().is_finite() {
                return Err(FedError::DivergenceDetected { client: c.id, round: t });
            }
            let payload = if communicated {
                Some(client_uplink(c, r_bits)?)
            } else {
                None
            };
            Ok((c.id, loss, payload))
        })
        .collect::<Result<_>>()?;

    let losses: Vec<(usize, Option<f64>)> = outputs.iter().map(|(id, l, _)| (*id, *l)).collect();
    if !communicated || outputs.is_empty() {
        if !communicated {
            for c in clients.iter_mut().filter(|c| sel.survivors.contains(&c.id)) {
                c.theta_view = c.w.clone();
            }
        }
        return finish(server, clients, communicated, sel, losses, (0, 0), 0, None);
    }

    let eta = clients[0].cfg.eta;
    let proxskip = clients[0].cfg.correction == CorrectionMode::ProxSkip;
    let server_eta = if proxskip { eta / server.p } else { eta };
    let uploads: Vec<(usize, &CompressedPayload)> = outputs
        .iter()
        .map(|(id, _, p)| (clients[*id].data.train.len(), p.as_ref().expect("communicated")))
        .collect();
    let uplink_bits: u64 = uploads.iter().map(|(_, p)| p.bits()).sum();
    let (theta, stats) = server_aggregate(&uploads, server_eta, server.tau_lowrank)?;
    if !theta.frobenius_norm().is_finite() {
        return Err(FedError::ServerDivergence { round: t });
    }
    server.theta = theta;

    let down = encode_params(&server.theta, &downlink_codec(server))?;
    let received = ModelParams::from_named(down.reconstruct())?;
    let downlink_bits = down.bits() * clients.len() as u64;
    for c in clients.iter_mut() {
        if proxskip && sel.survivors.contains(&c.id) {
            update_correction_proxskip(c, &received, server.p)?;
        }
        c.theta_view = received.clone();
        c.w = received.clone();
    }
    let messages = uploads.len() + clients.len();
    finish(
        server,
        clients,
        true,
        sel,
        losses,
        (uplink_bits, downlink_bits),
        messages,
        Some(stats),
    )
}

/// One FedAvg (`mu_prox = 0`) or FedProx round: every round communicates,
/// survivors run `E` epochs of SGD and the server takes the dense weighted
/// average of their `W`.
pub fn fedavg_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    mu_prox: f64,
) -> Result<RoundRecord> {
    check_ids(clients)?;
    server.validate()?;
    let t = server.t;
    let sel = select(server, clients.len())?;
    let seed = server.seeds.local;
    let losses: Vec<(usize, Option<f64>)> = clients
        .par_iter_mut()
        .filter(|c| sel.survivors.contains(&c.id))
        .map(|c| Ok((c.id, sgd_epochs(c, mu_prox, seed, t)?)))
        .collect::<Result<_>>()?;
    if losses.is_empty() {
        return finish(server, clients, true, sel, losses, (0, 0), 0, None);
    }
    let total: usize = sel.survivors.iter().map(|&i| clients[i].data.train.len()).sum();
    let weight = |i: usize| {
        if total == 0 {
            1.0 / sel.survivors.len() as f64
        } else {
            clients[i].data.train.len() as f64 / total as f64
        }
    };
    let mut named: Vec<(&str, Matrix)> = Vec::new();
    for name in ModelParams::NAMES {
        let terms: Vec<(f64, &Matrix)> = sel
            .survivors
            .iter()
            .map(|&i| (weight(i), clients[i].w.get(name).expect("known name")))
            .collect();
        named.push((name, weighted_sum(terms)?));
    }
    server.theta = ModelParams::from_named(named)?;
    let uplink_bits: u64 = sel
        .survivors
        .iter()
        .map(|&i| dense_bits(clients[i].w.tensors()))
        .sum();
    let downlink_bits = dense_bits(server.theta.tensors()) * clients.len() as u64;
    for c in clients.iter_mut() {
        c.theta_view = server.theta.clone();
        c.w = server.theta.clone();
    }
    let messages = sel.survivors.len() + clients.len();
    finish(
        server,
        clients,
        true,
        sel,
        losses,
        (uplink_bits, downlink_bits),
        messages,
        None,
    )
}

/// Sparse-channel-only round: survivors fine-tune `S` on `Θ_view + S`
/// with nothing shared.
fn local_sparse_round(server: &mut ServerState, clients: &mut [ClientState]) -> Result<RoundRecord> {
    check_ids(clients)?;
    server.validate()?;
    let t = server.t;
    let sel = select(server, clients.len())?;
    let seed = server.seeds.local;
    let losses: Vec<(usize, Option<f64>)> = clients
        .par_iter_mut()
        .filter(|c| sel.survivors.contains(&c.id))
        .map(|c| {
            finetune_sparse(c, seed, t)?;
            Ok((c.id, None))
        })
        .collect::<Result<_>>()?;
    finish(server, clients, false, sel, losses, (0, 0), 0, None)
}

/// Server plus clients, advanced one round at a time.
#[derive(Debug, Clone)]
pub struct Federation {
    pub algorithm: Algorithm,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Federation {
    pub fn step(&mut self) -> Result<RoundRecord> {
        match self.algorithm {
            Algorithm::Cefgl => run_round(&mut self.server, &mut self.clients),
            Algorithm::FedAvg => fedavg_round(&mut self.server, &mut self.clients, 0.0),
            Algorithm::FedProx => {
                let mu = self.clients.first().map_or(0.0, |c| c.cfg.mu_prox);
                fedavg_round(&mut self.server, &mut self.clients, mu)
            }
            Algorithm::LocalSparse => local_sparse_round(&mut self.server, &mut self.clients),
        }
    }
}
