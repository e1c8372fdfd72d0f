//! Run outputs: `rounds.jsonl`, `summary.csv`, `summary.json` and a
//! separate `timing.jsonl` with real elapsed time.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::run::RunSummary;
use super::{HarnessError, Result};
use crate::fedcore::RoundRecord;

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.resolved";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Appends one JSON line per round as the run progresses.
pub struct MetricsSink {
    dir: PathBuf,
    rounds: BufWriter<File>,
    timing: BufWriter<File>,
    started: Instant,
    last: Instant,
}

impl MetricsSink {
    /// Creates `dir` and starts fresh files, or appends when `resume` is set.
    pub fn open(dir: &Path, resume: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let file = if resume {
                fs::OpenOptions::new().append(true).create(true).open(&path)
            } else {
                File::create(&path)
            };
            Ok(BufWriter::new(file.map_err(io_err(&path))?))
        };
        let now = Instant::now();
        Ok(Self {
            dir: dir.to_path_buf(),
            rounds: open(ROUNDS_FILE)?,
            timing: open(TIMING_FILE)?,
            started: now,
            last: now,
        })
    }

    pub fn record(&mut self, r: &RoundRecord) -> Result<()> {
        let path = self.dir.join(ROUNDS_FILE);
        let line = serde_json::to_string(r)?;
        writeln!(self.rounds, "{line}").map_err(io_err(&path))?;
        let now = Instant::now();
        let timing = serde_json::json!({
            "t": r.t,
            "round_seconds": (now - self.last).as_secs_f64(),
            "elapsed_seconds": (now - self.started).as_secs_f64(),
        });
        self.last = now;
        let tpath = self.dir.join(TIMING_FILE);
        writeln!(self.timing, "{timing}").map_err(io_err(&tpath))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        let path = self.dir.join(ROUNDS_FILE);
        self.rounds.flush().map_err(io_err(&path))?;
        self.timing.flush().map_err(io_err(&path))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct CsvRow {
    round: u64,
    communicated: bool,
    participants: usize,
    dropped: usize,
    uplink_bits: u64,
    downlink_bits: u64,
    wall_time: f64,
    mean_acc: Option<f64>,
    mean_train_loss: Option<f64>,
    lowrank_ratio: Option<f64>,
    factor_fraction: Option<f64>,
    s_density: f64,
}

/// Writes the whole summary: JSON lines, CSV and aggregates.
pub fn emit_metrics(summary: &RunSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rounds_path = dir.join(ROUNDS_FILE);
    let mut out = BufWriter::new(File::create(&rounds_path).map_err(io_err(&rounds_path))?);
    for r in &summary.records {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(io_err(&rounds_path))?;
    }
    out.flush().map_err(io_err(&rounds_path))?;
    write_summary(summary, dir)
}

/// Writes `summary.csv` and `summary.json` (the JSON lines are left alone).
pub fn write_summary(summary: &RunSummary, dir: &Path) -> Result<()> {
    let csv_path = dir.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &summary.records {
        w.serialize(CsvRow {
            round: r.t,
            communicated: r.communicated,
            participants: r.participants.len(),
            dropped: r.dropped.len(),
            uplink_bits: r.uplink_bits,
            downlink_bits: r.downlink_bits,
            wall_time: r.wall_time,
            mean_acc: r.mean_test_accuracy,
            mean_train_loss: r.mean_train_loss,
            lowrank_ratio: r.lowrank_ratio,
            factor_fraction: r.factor_fraction,
            s_density: r.mean_s_density,
        })?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    let json_path = dir.join(SUMMARY_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(summary)?).map_err(io_err(&json_path))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(path))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

/// Reloads a run directory and checks `summary.json` against the records.
pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let json_path = dir.join(SUMMARY_JSON);
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let mut summary: RunSummary = serde_json::from_str(&text)?;
    summary.records = read_records(&dir.join(ROUNDS_FILE))?;
    summary.verify()?;
    Ok(summary)
}
