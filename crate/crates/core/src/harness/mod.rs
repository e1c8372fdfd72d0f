//! Experiment orchestration: configuration, runs, sweeps, metrics and
//! checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod run;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::compress::CodecError;
use crate::fedcore::{FedError, Federation};
use crate::gnn::GnnError;
use crate::graphdata::DataError;

pub use checkpoint::{
    config_digest, load_checkpoint, restore, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{parse_config, DataSource, ExperimentConfig, Variant, KEYS, SEED_ENV};
pub use metrics::{
    emit_metrics, load_summary, read_records, write_summary, MetricsSink, CHECKPOINT_FILE,
    CONFIG_FILE, ROUNDS_FILE, SUMMARY_CSV, SUMMARY_JSON, TIMING_FILE,
};
pub use run::{
    build_federation, check_paired, drive, personalized_models, prepare_data, repeat_config,
    run_experiment, run_repeated, run_sweep, sweep_config, PreparedData, RepeatSummary,
    RunSummary, SweepAxis, TAIL_ROUNDS,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("round {round}: {source}")]
    Round {
        round: u64,
        #[source]
        source: FedError,
    },
    #[error("checkpoint version {found} (this build reads {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("inconsistent results: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// Process exit code: 2 config, 3 divergence, 4 I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Round {
                source: FedError::DivergenceDetected { .. } | FedError::ServerDivergence { .. },
                ..
            }
            | HarnessError::Fed(FedError::DivergenceDetected { .. } | FedError::ServerDivergence { .. }) => 3,
            HarnessError::Io { .. } | HarnessError::Csv(_) => 4,
            HarnessError::Data(DataError::MissingFile(_) | DataError::Io(_)) => 4,
            HarnessError::Data(DataError::BadSpec(_) | DataError::BadMode(_) | DataError::BadRatios(_)) => 2,
            _ => 1,
        }
    }
}

fn run_into(
    cfg: &ExperimentConfig,
    dir: &Path,
    fed: &mut Federation,
    hash: String,
    rounds: u64,
    resume: bool,
) -> Result<RunSummary> {
    let mut sink = MetricsSink::open(dir, resume)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let every = cfg.checkpoint_every;
    let new = drive(fed, rounds, |fed, r| {
        sink.record(r)?;
        if every > 0 && (r.t + 1) % every == 0 {
            sink.flush()?;
            save_checkpoint(fed, cfg, &ck_path)?;
        }
        Ok(())
    })?;
    sink.flush()?;
    save_checkpoint(fed, cfg, &ck_path)?;
    let records = if resume {
        read_records(&dir.join(ROUNDS_FILE))?
    } else {
        new
    };
    let summary = RunSummary::from_records(cfg.seeds, hash, records);
    write_summary(&summary, dir)?;
    Ok(summary)
}

/// Runs `cfg` and writes every output file into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let (mut fed, hash) = build_federation(cfg)?;
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|source| HarnessError::Io {
        path: cfg_path,
        source,
    })?;
    run_into(cfg, dir, &mut fed, hash, cfg.rounds, false)
}

/// Continues a run in `dir` from its checkpoint until `cfg.rounds` rounds
/// exist, appending to its records.
pub fn resume_from_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let (mut fed, hash) = build_federation(cfg)?;
    let ck = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    restore(&mut fed, ck, cfg)?;
    // Drop records written after the checkpoint.
    let rounds_path = dir.join(ROUNDS_FILE);
    let kept: Vec<_> = read_records(&rounds_path)?
        .into_iter()
        .filter(|r| r.t < fed.server.t)
        .collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&rounds_path, text).map_err(|source| HarnessError::Io {
        path: rounds_path.clone(),
        source,
    })?;
    let remaining = cfg.rounds.saturating_sub(fed.server.t);
    run_into(cfg, dir, &mut fed, hash, remaining, true)
}
