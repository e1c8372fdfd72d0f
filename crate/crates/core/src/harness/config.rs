//! Flat `section.key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::compress::{Scheme, Sparsifier};
use crate::fedcore::{Algorithm, ClientConfig, CorrectionMode, NetworkModel, Seeds};
use crate::gnn::ArchConfig;
use crate::graphdata::{PartitionMode, SynthSpec};

pub const SEED_ENV: &str = "CEFGL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// One directory per source dataset.
    Tu(Vec<PathBuf>),
}

/// Which parameter channels are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No sparse channel (`F = 0`, `S = 0`).
    WOnly,
    /// No shared channel: `Θ = 0`, only `S` is trained, nothing is sent.
    SOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub split: (f64, f64, f64),
    pub partition: PartitionMode,
    pub clients: usize,
    pub hidden: usize,
    pub algorithm: Algorithm,
    pub variant: Variant,
    pub client: ClientConfig,
    pub p: f64,
    pub rho: f64,
    pub tau_lowrank: f64,
    pub r_bits: u8,
    pub downlink: Scheme,
    pub dropout: Option<(f64, f64)>,
    pub network: NetworkModel,
    pub rounds: u64,
    /// Number of seeds for repeated runs (`seed`, `seed + 1`, ...).
    pub repeats: usize,
    pub seeds: Seeds,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint after every this many rounds (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SynthSpec::preset(200, 2, 0.8)),
            split: (0.8, 0.1, 0.1),
            partition: PartitionMode::Iid,
            clients: 10,
            hidden: ArchConfig::DEFAULT_HIDDEN,
            algorithm: Algorithm::Cefgl,
            variant: Variant::Full,
            client: ClientConfig::default(),
            p: 0.5,
            rho: 1.0,
            tau_lowrank: 1e-4,
            r_bits: 4,
            downlink: Scheme::Quantized,
            dropout: None,
            network: NetworkModel::default(),
            rounds: 200,
            repeats: 5,
            seeds: Seeds::all(0),
            out_dir: None,
            checkpoint_every: 0,
        }
    }
}

fn cfg_err(key: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.to_owned(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| cfg_err(key, format!("cannot parse {v:?}")))
}

fn real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() {
        return Err(cfg_err(key, "must be finite"));
    }
    Ok(x)
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|t| real(key, t.trim())).collect()
}

fn synth(cfg: &mut ExperimentConfig) -> &mut SynthSpec {
    if !matches!(cfg.source, DataSource::Synthetic(_)) {
        cfg.source = DataSource::Synthetic(SynthSpec::preset(200, 2, 0.8));
    }
    match &mut cfg.source {
        DataSource::Synthetic(s) => s,
        DataSource::Tu(_) => unreachable!(),
    }
}

/// Keys accepted by [`ExperimentConfig::set`].
pub const KEYS: &[&str] = &[
    "data.source",
    "data.tu_paths",
    "data.synth.n_graphs",
    "data.synth.classes",
    "data.synth.purity",
    "data.synth.nodes_min",
    "data.synth.nodes_max",
    "data.synth.feature_dim",
    "data.synth.noise",
    "data.split",
    "partition.mode",
    "partition.clients",
    "partition.skew",
    "partition.min_per_client",
    "model.hidden",
    "run.algorithm",
    "run.variant",
    "run.rounds",
    "run.repeats",
    "run.out",
    "run.checkpoint_every",
    "client.eta",
    "client.alpha",
    "client.nu",
    "client.sparsifier",
    "client.cut_sparse",
    "client.beta",
    "client.local_epochs",
    "client.finetune_epochs",
    "client.batch_size",
    "client.mu_prox",
    "client.correction",
    "server.p",
    "server.rho",
    "server.tau_lowrank",
    "server.r_bits",
    "server.downlink",
    "server.dropout",
    "net.bandwidth_bps",
    "net.latency_s",
    "seed",
    "seed.data",
    "seed.init",
    "seed.coin",
    "seed.sampling",
    "seed.dropout",
    "seed.local",
];

impl ExperimentConfig {
    /// Parses config text on top of the defaults. Relative `data.tu_paths`
    /// and `run.out` entries resolve against `base`.
    pub fn parse_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                cfg_err(&format!("line {}", i + 1), format!("expected `key = value`, got {line:?}"))
            })?;
            let (k, v) = (k.trim(), v.trim());
            match (k, base) {
                ("data.tu_paths" | "run.out", Some(base)) => {
                    let resolved: Vec<String> = v
                        .split(',')
                        .map(|p| base.join(p.trim()).to_string_lossy().into_owned())
                        .collect();
                    cfg.set(k, &resolved.join(","))?;
                }
                _ => cfg.set(k, v)?,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.source" => match v {
                "synthetic" | "synth" => {
                    synth(self);
                }
                "tu" => {
                    if !matches!(self.source, DataSource::Tu(_)) {
                        self.source = DataSource::Tu(Vec::new());
                    }
                }
                _ => return Err(cfg_err(key, "expected `synthetic` or `tu`")),
            },
            "data.tu_paths" => {
                self.source = DataSource::Tu(
                    v.split(',')
                        .map(|p| PathBuf::from(p.trim()))
                        .filter(|p| !p.as_os_str().is_empty())
                        .collect(),
                );
            }
            "data.synth.n_graphs" => synth(self).n_graphs = num(key, v)?,
            "data.synth.classes" | "data.synth.purity" => {
                let s = synth(self);
                let purity = match s.classes.first().map(|m| &m.0[..]) {
                    Some([(_, w), ..]) => *w,
                    _ => 0.8,
                };
                let (n_classes, purity) = if key.ends_with("classes") {
                    (num::<usize>(key, v)?, purity)
                } else {
                    (s.classes.len(), real(key, v)?)
                };
                if !(0.0..=1.0).contains(&purity) {
                    return Err(cfg_err(key, "purity must lie in [0, 1]"));
                }
                let preset = SynthSpec::preset(s.n_graphs, n_classes, purity);
                s.classes = preset.classes;
            }
            "data.synth.nodes_min" => synth(self).nodes_min = num(key, v)?,
            "data.synth.nodes_max" => synth(self).nodes_max = num(key, v)?,
            "data.synth.feature_dim" => synth(self).feature_dim = num(key, v)?,
            "data.synth.noise" => synth(self).noise = real(key, v)?,
            "data.split" => match list(key, v)?[..] {
                [a, b, c] => self.split = (a, b, c),
                _ => return Err(cfg_err(key, "expected three comma-separated ratios")),
            },
            "partition.mode" => {
                self.partition = match v {
                    "iid" => PartitionMode::Iid,
                    "label_skew" => match self.partition {
                        p @ PartitionMode::LabelSkew { .. } => p,
                        _ => PartitionMode::LabelSkew {
                            skew: 0.5,
                            min_per_client: 2,
                        },
                    },
                    "cross_dataset" => PartitionMode::CrossDataset,
                    _ => return Err(cfg_err(key, "expected iid, label_skew or cross_dataset")),
                }
            }
            "partition.clients" => self.clients = num(key, v)?,
            "partition.skew" | "partition.min_per_client" => {
                let (mut skew, mut min) = match self.partition {
                    PartitionMode::LabelSkew {
                        skew,
                        min_per_client,
                    } => (skew, min_per_client),
                    _ => (0.5, 2),
                };
                if key.ends_with("skew") {
                    skew = real(key, v)?;
                } else {
                    min = num(key, v)?;
                }
                self.partition = PartitionMode::LabelSkew {
                    skew,
                    min_per_client: min,
                };
            }
            "model.hidden" => self.hidden = num(key, v)?,
            "run.algorithm" => {
                self.algorithm = match v {
                    "cefgl" => Algorithm::Cefgl,
                    "fedavg" => Algorithm::FedAvg,
                    "fedprox" => Algorithm::FedProx,
                    _ => return Err(cfg_err(key, "expected cefgl, fedavg or fedprox")),
                }
            }
            "run.variant" => {
                self.variant = match v {
                    "full" => Variant::Full,
                    "w_only" => Variant::WOnly,
                    "s_only" => Variant::SOnly,
                    _ => return Err(cfg_err(key, "expected full, w_only or s_only")),
                }
            }
            "run.rounds" => self.rounds = num(key, v)?,
            "run.repeats" => self.repeats = num(key, v)?,
            "run.out" => self.out_dir = Some(PathBuf::from(v)),
            "run.checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "client.eta" => self.client.eta = real(key, v)?,
            "client.alpha" => self.client.alpha = real(key, v)?,
            "client.nu" => self.client.nu = real(key, v)?,
            "client.sparsifier" => {
                self.client.sparsifier = match (v, self.client.sparsifier) {
                    ("threshold", s @ Sparsifier::Threshold { .. }) => s,
                    ("threshold", _) => Sparsifier::Threshold { cut: 1e-3 },
                    ("topk", s @ Sparsifier::TopK { .. }) => s,
                    ("topk", _) => Sparsifier::TopK { beta: 0.1 },
                    _ => return Err(cfg_err(key, "expected threshold or topk")),
                }
            }
            "client.cut_sparse" => {
                self.client.sparsifier = Sparsifier::Threshold {
                    cut: real(key, v)?,
                }
            }
            "client.beta" => {
                self.client.sparsifier = Sparsifier::TopK {
                    beta: real(key, v)?,
                }
            }
            "client.local_epochs" => self.client.local_epochs = num(key, v)?,
            "client.finetune_epochs" => self.client.finetune_epochs = num(key, v)?,
            "client.batch_size" => self.client.batch_size = num(key, v)?,
            "client.mu_prox" => self.client.mu_prox = real(key, v)?,
            "client.correction" => {
                self.client.correction = match v {
                    "off" => CorrectionMode::Off,
                    "every_round" => CorrectionMode::EveryRound,
                    "proxskip" => CorrectionMode::ProxSkip,
                    _ => return Err(cfg_err(key, "expected off, every_round or proxskip")),
                }
            }
            "server.p" => self.p = real(key, v)?,
            "server.rho" => self.rho = real(key, v)?,
            "server.tau_lowrank" => self.tau_lowrank = real(key, v)?,
            "server.r_bits" => self.r_bits = num(key, v)?,
            "server.downlink" => {
                self.downlink = match v {
                    "dense" => Scheme::Dense,
                    "quantized" => Scheme::Quantized,
                    "low_rank" => Scheme::LowRankQuantized,
                    _ => return Err(cfg_err(key, "expected dense, quantized or low_rank")),
                }
            }
            "server.dropout" => {
                self.dropout = match v {
                    "off" | "" => None,
                    _ => match list(key, v)?[..] {
                        [a, b] => Some((a, b)),
                        _ => return Err(cfg_err(key, "expected `off` or `a, b`")),
                    },
                }
            }
            "net.bandwidth_bps" => self.network.bandwidth_bps = real(key, v)?,
            "net.latency_s" => self.network.latency_s = real(key, v)?,
            "seed" => self.seeds = Seeds::all(num(key, v)?),
            "seed.data" => self.seeds.data = num(key, v)?,
            "seed.init" => self.seeds.init = num(key, v)?,
            "seed.coin" => self.seeds.coin = num(key, v)?,
            "seed.sampling" => self.seeds.sampling = num(key, v)?,
            "seed.dropout" => self.seeds.dropout = num(key, v)?,
            "seed.local" => self.seeds.local = num(key, v)?,
            _ => return Err(cfg_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, ok: bool, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(cfg_err(key, why.to_owned()))
            }
        };
        range("server.p", (0.0..=1.0).contains(&self.p), "must lie in [0, 1]")?;
        range("server.rho", self.rho > 0.0 && self.rho <= 1.0, "must lie in (0, 1]")?;
        range("server.tau_lowrank", self.tau_lowrank >= 0.0, "must be >= 0")?;
        range("server.r_bits", (1..=32).contains(&self.r_bits), "must lie in 1..=32")?;
        range("run.rounds", self.rounds >= 1, "must be >= 1")?;
        range("run.repeats", self.repeats >= 1, "must be >= 1")?;
        range("partition.clients", self.clients >= 1, "must be >= 1")?;
        range("model.hidden", self.hidden >= 1, "must be >= 1")?;
        range("client.eta", self.client.eta > 0.0, "must be > 0")?;
        range("client.alpha", self.client.alpha >= 0.0, "must be >= 0")?;
        range("client.nu", self.client.nu >= 0.0, "must be >= 0")?;
        range("client.mu_prox", self.client.mu_prox >= 0.0, "must be >= 0")?;
        match self.client.sparsifier {
            Sparsifier::Threshold { cut } => range("client.cut_sparse", cut >= 0.0, "must be >= 0")?,
            Sparsifier::TopK { beta } => {
                range("client.beta", (0.0..=1.0).contains(&beta), "must lie in [0, 1]")?
            }
        }
        if let PartitionMode::LabelSkew { skew, .. } = self.partition {
            range("partition.skew", skew > 0.0, "must be > 0")?;
        }
        if let Some((a, b)) = self.dropout {
            range("server.dropout", a > 0.0 && b > 0.0, "Beta parameters must be > 0")?;
        }
        range(
            "net.bandwidth_bps",
            self.network.bandwidth_bps > 0.0,
            "must be > 0",
        )?;
        range("net.latency_s", self.network.latency_s >= 0.0, "must be >= 0")?;
        let (a, b, c) = self.split;
        range(
            "data.split",
            [a, b, c].iter().all(|r| *r >= 0.0) && (a + b + c - 1.0).abs() <= 1e-9,
            "ratios must be >= 0 and sum to 1",
        )?;
        match &self.source {
            DataSource::Tu(paths) => {
                range("data.tu_paths", !paths.is_empty(), "at least one directory is required")?;
                for p in paths {
                    range(
                        "data.tu_paths",
                        p.is_dir(),
                        &format!("{} is not a directory", p.display()),
                    )?;
                }
                let cross = self.partition == PartitionMode::CrossDataset;
                range(
                    "data.tu_paths",
                    if cross { paths.len() == self.clients } else { paths.len() == 1 },
                    "cross_dataset needs one path per client; other modes need exactly one",
                )?;
            }
            DataSource::Synthetic(s) => {
                range("data.synth.n_graphs", s.n_graphs >= s.classes.len(), "must be >= classes")?;
                range(
                    "data.synth.nodes_min",
                    s.nodes_min >= 1 && s.nodes_min <= s.nodes_max,
                    "need 1 <= nodes_min <= nodes_max",
                )?;
                range("data.synth.feature_dim", s.feature_dim >= 1, "must be >= 1")?;
                range("data.synth.noise", s.noise >= 0.0, "must be >= 0")?;
                range(
                    "partition.mode",
                    self.partition != PartitionMode::CrossDataset,
                    "cross_dataset needs TU sources",
                )?;
            }
        }
        Ok(())
    }

    /// Overrides every seed with `CEFGL_SEED` when it is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seeds = Seeds::all(num(SEED_ENV, v.trim())?);
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.source {
            DataSource::Synthetic(sp) => {
                kv("data.source", "synthetic".into());
                kv("data.synth.n_graphs", sp.n_graphs.to_string());
                kv("data.synth.classes", sp.classes.len().to_string());
                let purity = sp.classes.first().map_or(0.8, |m| m.0[0].1);
                kv("data.synth.purity", purity.to_string());
                kv("data.synth.nodes_min", sp.nodes_min.to_string());
                kv("data.synth.nodes_max", sp.nodes_max.to_string());
                kv("data.synth.feature_dim", sp.feature_dim.to_string());
                kv("data.synth.noise", sp.noise.to_string());
            }
            DataSource::Tu(paths) => {
                kv("data.source", "tu".into());
                let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                kv("data.tu_paths", joined.join(","));
            }
        }
        kv("data.split", format!("{},{},{}", self.split.0, self.split.1, self.split.2));
        match self.partition {
            PartitionMode::Iid => kv("partition.mode", "iid".into()),
            PartitionMode::LabelSkew {
                skew,
                min_per_client,
            } => {
                kv("partition.mode", "label_skew".into());
                kv("partition.skew", skew.to_string());
                kv("partition.min_per_client", min_per_client.to_string());
            }
            PartitionMode::CrossDataset => kv("partition.mode", "cross_dataset".into()),
        }
        kv("partition.clients", self.clients.to_string());
        kv("model.hidden", self.hidden.to_string());
        let algorithm = match self.algorithm {
            Algorithm::Cefgl | Algorithm::LocalSparse => "cefgl",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
        };
        kv("run.algorithm", algorithm.into());
        let variant = match self.variant {
            Variant::Full => "full",
            Variant::WOnly => "w_only",
            Variant::SOnly => "s_only",
        };
        kv("run.variant", variant.into());
        kv("run.rounds", self.rounds.to_string());
        kv("run.repeats", self.repeats.to_string());
        if let Some(out) = &self.out_dir {
            kv("run.out", out.display().to_string());
        }
        kv("run.checkpoint_every", self.checkpoint_every.to_string());
        let c = &self.client;
        kv("client.eta", c.eta.to_string());
        kv("client.alpha", c.alpha.to_string());
        kv("client.nu", c.nu.to_string());
        match c.sparsifier {
            Sparsifier::Threshold { cut } => kv("client.cut_sparse", cut.to_string()),
            Sparsifier::TopK { beta } => kv("client.beta", beta.to_string()),
        }
        kv("client.local_epochs", c.local_epochs.to_string());
        kv("client.finetune_epochs", c.finetune_epochs.to_string());
        kv("client.batch_size", c.batch_size.to_string());
        kv("client.mu_prox", c.mu_prox.to_string());
        let correction = match c.correction {
            CorrectionMode::Off => "off",
            CorrectionMode::EveryRound => "every_round",
            CorrectionMode::ProxSkip => "proxskip",
        };
        kv("client.correction", correction.into());
        kv("server.p", self.p.to_string());
        kv("server.rho", self.rho.to_string());
        kv("server.tau_lowrank", self.tau_lowrank.to_string());
        kv("server.r_bits", self.r_bits.to_string());
        let downlink = match self.downlink {
            Scheme::Dense => "dense",
            Scheme::Quantized => "quantized",
            Scheme::LowRankQuantized => "low_rank",
        };
        kv("server.downlink", downlink.into());
        kv(
            "server.dropout",
            self.dropout.map_or("off".into(), |(a, b)| format!("{a},{b}")),
        );
        kv("net.bandwidth_bps", self.network.bandwidth_bps.to_string());
        kv("net.latency_s", self.network.latency_s.to_string());
        let sd = &self.seeds;
        kv("seed.data", sd.data.to_string());
        kv("seed.init", sd.init.to_string());
        kv("seed.coin", sd.coin.to_string());
        kv("seed.sampling", sd.sampling.to_string());
        kv("seed.dropout", sd.dropout.to_string());
        kv("seed.local", sd.local.to_string());
        s
    }
}

/// Reads a config file, resolving relative paths against its directory and
/// applying the `CEFGL_SEED` override.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut cfg = ExperimentConfig::parse_str(&text, path.parent())?;
    cfg.apply_env_seed()?;
    Ok(cfg)
}
