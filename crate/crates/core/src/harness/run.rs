//! Building a federation from a config and running it.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSource, ExperimentConfig, Variant};
use super::{HarnessError, Result};
use crate::fedcore::{
    Algorithm, ClientData, ClientState, FedError, Federation, RoundRecord, Seeds, ServerState,
};
use crate::gnn::{init_params, ArchConfig, ModelParams};
use crate::graphdata::{
    load_tu_dataset, partition_clients, split_dataset, synth_generate, ClientPartition,
    GraphDataset,
};
use crate::rng;

/// Client datasets of a run together with a digest of how they were cut.
pub struct PreparedData {
    pub clients: Vec<ClientData>,
    pub feature_dim: usize,
    pub classes: usize,
    pub partition_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn partition_digest(pool: &[GraphDataset], part: &ClientPartition) -> String {
    let mut h = Sha256::new();
    for d in pool {
        h.update(format!("{}:{}:{};", d.name, d.len(), d.num_classes).as_bytes());
    }
    for (client, idx) in &part.assignments {
        h.update(format!("{client}=").as_bytes());
        for i in idx {
            h.update(format!("{i},").as_bytes());
        }
        h.update(b";");
    }
    hex(&h.finalize())
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let pool: Vec<GraphDataset> = match &cfg.source {
        DataSource::Synthetic(spec) => vec![synth_generate(spec, cfg.seeds.data)?],
        DataSource::Tu(paths) => paths
            .iter()
            .map(load_tu_dataset)
            .collect::<std::result::Result<_, _>>()?,
    };
    let part = partition_clients(&pool, cfg.clients, cfg.partition, cfg.seeds.data)?;
    let partition_hash = partition_digest(&pool, &part);
    let feature_dim = pool.iter().map(|d| d.feature_dim).max().unwrap_or(1);
    // One shared head sized for the largest label space.
    let classes = pool.iter().map(|d| d.num_classes).max().unwrap_or(1);
    let clients = part
        .materialize(&pool)
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let d = d.padded(feature_dim);
            let split_seed = rng::stream(cfg.seeds.data, "client-split", &[i as u64]).random();
            let (train, val, test) = split_dataset(&d, cfg.split, split_seed)?;
            Ok(ClientData { train, val, test })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        clients,
        feature_dim,
        classes,
        partition_hash,
    })
}

/// A federation at round 0 plus the partition digest.
pub fn build_federation(cfg: &ExperimentConfig) -> Result<(Federation, String)> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let arch = ArchConfig::new(data.feature_dim, cfg.hidden, data.classes)?;
    let init = init_params(&arch, cfg.seeds.init)?;
    let mut client_cfg = cfg.client;
    let (theta, s0, algorithm) = match cfg.variant {
        Variant::Full => (init.clone(), init.zeros_like(), cfg.algorithm),
        Variant::WOnly => {
            client_cfg.finetune_epochs = 0;
            (init.clone(), init.zeros_like(), cfg.algorithm)
        }
        Variant::SOnly => {
            let mut s = init.clone();
            let mut mats: Vec<_> = s.tensors_mut().into_iter().map(|(_, m)| m).collect();
            client_cfg.sparsifier.apply_many(&mut mats);
            (init.zeros_like(), s, Algorithm::LocalSparse)
        }
    };
    client_cfg.validate().map_err(|e| HarnessError::Config {
        key: "client".into(),
        reason: e.to_string(),
    })?;
    let clients = data
        .clients
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, &theta, s0.clone(), Arc::new(d), client_cfg))
        .collect::<std::result::Result<Vec<_>, FedError>>()?;
    let mut server = ServerState::new(theta, cfg.seeds);
    server.p = cfg.p;
    server.rho = cfg.rho;
    server.tau_lowrank = cfg.tau_lowrank;
    server.r_bits = cfg.r_bits;
    server.downlink = cfg.downlink;
    server.dropout = cfg.dropout;
    server.network = cfg.network;
    Ok((
        Federation {
            algorithm,
            server,
            clients,
        },
        data.partition_hash,
    ))
}

/// Aggregates of one run, all derived from its round records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Seeds,
    pub partition_hash: String,
    pub rounds: u64,
    pub communicated_rounds: u64,
    pub total_uplink_bits: u64,
    pub total_downlink_bits: u64,
    pub total_wall_time: f64,
    /// Mean and standard deviation over clients at the last round.
    pub final_mean_accuracy: Option<f64>,
    pub final_std_accuracy: Option<f64>,
    /// Mean client accuracy averaged over the last `min(10, T)` rounds.
    pub tail_mean_accuracy: Option<f64>,
    pub lowrank_ratio: Vec<Option<f64>>,
    pub s_density: Vec<f64>,
    #[serde(skip)]
    pub records: Vec<RoundRecord>,
}

pub const TAIL_ROUNDS: usize = 10;

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

impl RunSummary {
    pub fn from_records(seeds: Seeds, partition_hash: String, records: Vec<RoundRecord>) -> Self {
        let last: Vec<f64> = records
            .last()
            .map(|r| r.clients.iter().filter_map(|c| c.test_accuracy).collect())
            .unwrap_or_default();
        let (final_mean_accuracy, final_std_accuracy) = mean_std(&last);
        let tail: Vec<f64> = records
            .iter()
            .rev()
            .take(TAIL_ROUNDS)
            .filter_map(|r| r.mean_test_accuracy)
            .collect();
        Self {
            seeds,
            partition_hash,
            rounds: records.len() as u64,
            communicated_rounds: records.iter().filter(|r| r.communicated).count() as u64,
            total_uplink_bits: records.iter().map(|r| r.uplink_bits).sum(),
            total_downlink_bits: records.iter().map(|r| r.downlink_bits).sum(),
            total_wall_time: records.iter().map(|r| r.wall_time).sum(),
            final_mean_accuracy,
            final_std_accuracy,
            tail_mean_accuracy: mean_std(&tail).0,
            lowrank_ratio: records.iter().map(|r| r.lowrank_ratio).collect(),
            s_density: records.iter().map(|r| r.mean_s_density).collect(),
            records,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.total_uplink_bits + self.total_downlink_bits
    }

    /// Checks every aggregate against a recomputation from the records.
    pub fn verify(&self) -> Result<()> {
        let again = Self::from_records(self.seeds, self.partition_hash.clone(), self.records.clone());
        if &again != self {
            return Err(HarnessError::Inconsistent(
                "summary aggregates disagree with the round records".into(),
            ));
        }
        Ok(())
    }
}

/// Runs `fed` for `rounds` rounds, passing each record to `sink`.
pub fn drive(
    fed: &mut Federation,
    rounds: u64,
    mut sink: impl FnMut(&Federation, &RoundRecord) -> Result<()>,
) -> Result<Vec<RoundRecord>> {
    let mut records = Vec::with_capacity(rounds as usize);
    for _ in 0..rounds {
        let t = fed.server.t;
        let record = fed.step().map_err(|source| HarnessError::Round { round: t, source })?;
        sink(fed, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Runs all `cfg.rounds` rounds in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let (mut fed, hash) = build_federation(cfg)?;
    let records = drive(&mut fed, cfg.rounds, |_, _| Ok(()))?;
    Ok(RunSummary::from_records(cfg.seeds, hash, records))
}

/// Config for repeat `i`: every seed shifted by `i`.
pub fn repeat_config(cfg: &ExperimentConfig, i: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    let s = &mut c.seeds;
    for v in [
        &mut s.data,
        &mut s.init,
        &mut s.coin,
        &mut s.sampling,
        &mut s.dropout,
        &mut s.local,
    ] {
        *v = v.wrapping_add(i as u64);
    }
    c
}

/// Mean and standard deviation over repeats of the final mean accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: Vec<RunSummary>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
}

pub fn run_repeated(cfg: &ExperimentConfig) -> Result<RepeatSummary> {
    let runs = (0..cfg.repeats)
        .into_par_iter()
        .map(|i| run_experiment(&repeat_config(cfg, i)))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<f64> = runs.iter().filter_map(|r| r.final_mean_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&finals);
    Ok(RepeatSummary {
        runs,
        mean_accuracy,
        std_accuracy,
    })
}

/// Sweepable knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TauLowrank,
    CutSparse,
    Beta,
    P,
    RBits,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "tau_lowrank" => SweepAxis::TauLowrank,
            "cut_sparse" => SweepAxis::CutSparse,
            "beta" => SweepAxis::Beta,
            "p" => SweepAxis::P,
            "r_bits" => SweepAxis::RBits,
            _ => {
                return Err(HarnessError::Config {
                    key: "axis".into(),
                    reason: format!(
                        "unknown axis {name:?} (tau_lowrank, cut_sparse, beta, p, r_bits)"
                    ),
                })
            }
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::TauLowrank => "server.tau_lowrank",
            SweepAxis::CutSparse => "client.cut_sparse",
            SweepAxis::Beta => "client.beta",
            SweepAxis::P => "server.p",
            SweepAxis::RBits => "server.r_bits",
        }
    }

    pub fn name(self) -> &'static str {
        self.key().split('.').nth(1).expect("dotted key")
    }
}

/// Config for one sweep point.
pub fn sweep_config(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.set(axis.key(), value)?;
    c.validate()?;
    Ok(c)
}

/// One run per value with shared seeds. Fails if the partitions differ.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<RunSummary>> {
    let configs = values
        .iter()
        .map(|v| sweep_config(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let runs = configs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>>>()?;
    check_paired(&runs)?;
    Ok(runs)
}

pub fn check_paired(runs: &[RunSummary]) -> Result<()> {
    if let Some(first) = runs.first() {
        if runs.iter().any(|r| r.partition_hash != first.partition_hash) {
            return Err(HarnessError::Inconsistent(
                "sweep points saw different data partitions".into(),
            ));
        }
    }
    Ok(())
}

/// Parameters a client would use for inference.
pub fn personalized_models(fed: &Federation) -> Result<Vec<ModelParams>> {
    fed.clients
        .iter()
        .map(|c| Ok(c.personalized()?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::parse_str(
            "data.synth.n_graphs = 40\npartition.clients = 2\nrun.rounds = 3\nserver.p = 1\nclient.eta = 0.05\n",
            None,
        )
        .unwrap()
    }

    #[test]
    fn one_round_one_record() {
        let mut cfg = small();
        cfg.rounds = 1;
        let s = run_experiment(&cfg).unwrap();
        assert_eq!(s.rounds, 1);
        assert_eq!(s.communicated_rounds, 1);
        s.verify().unwrap();
    }

    #[test]
    fn runs_are_reproducible() {
        let a = run_experiment(&small()).unwrap();
        let b = run_experiment(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn tampered_summary_fails_verification() {
        let mut s = run_experiment(&small()).unwrap();
        s.total_uplink_bits += 1;
        assert!(s.verify().is_err());
    }

    #[test]
    fn sweep_shares_partition() {
        let runs = run_sweep(&small(), SweepAxis::RBits, &["4".into(), "32".into()]).unwrap();
        assert_eq!(runs.len(), 2);
        assert!(runs[0].total_bits() < runs[1].total_bits());
        assert!(sweep_config(&small(), SweepAxis::P, "2").is_err());
    }

    #[test]
    fn variants_build() {
        for v in ["w_only", "s_only"] {
            let mut cfg = small();
            cfg.set("run.variant", v).unwrap();
            let (fed, _) = build_federation(&cfg).unwrap();
            if v == "s_only" {
                assert_eq!(fed.algorithm, Algorithm::LocalSparse);
                assert_eq!(fed.server.theta.frobenius_norm(), 0.0);
                assert!(fed.clients[0].s.count_nonzero() > 0);
            } else {
                assert_eq!(fed.clients[0].cfg.finetune_epochs, 0);
            }
        }
    }
}
