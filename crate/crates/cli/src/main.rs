//! Command-line front end: run experiments, sweep one knob, inspect a run
//! directory, or write the TU fixture.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cefgl::graphdata::write_fixture;
use cefgl::harness::{
    check_paired, load_summary, parse_config, repeat_config, resume_from_dir, run_to_dir,
    sweep_config, ExperimentConfig, HarnessError, Result, RunSummary, SweepAxis,
};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "cefgl", version, about = "Personalized federated graph learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `run.out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run one experiment per value of a single knob, with shared seeds.
    Sweep {
        config: PathBuf,
        /// One of tau_lowrank, cut_sparse, beta, p, r_bits.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the aggregates of a finished run directory.
    Inspect { dir: PathBuf },
    /// Write the two-graph TU fixture into a directory.
    MakeFixture { dir: PathBuf },
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn describe(s: &RunSummary) -> String {
    let acc = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    format!(
        "rounds {} (communicated {}), bits up {} down {}, wall {:.3}s, final acc {} ± {}, tail acc {}",
        s.rounds,
        s.communicated_rounds,
        s.total_uplink_bits,
        s.total_downlink_bits,
        s.total_wall_time,
        acc(s.final_mean_accuracy),
        acc(s.final_std_accuracy),
        acc(s.tail_mean_accuracy),
    )
}

fn run_one(cfg: &ExperimentConfig, dir: &Path, resume: bool) -> Result<RunSummary> {
    info!("running into {}", dir.display());
    if resume {
        resume_from_dir(cfg, dir)
    } else {
        run_to_dir(cfg, dir)
    }
}

fn cmd_run(config: &Path, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let cfg = parse_config(config)?;
    let out = out_dir(&cfg, out);
    if cfg.repeats <= 1 {
        let s = run_one(&cfg, &out, resume)?;
        println!("{}", describe(&s));
        return Ok(());
    }
    let mut finals = Vec::new();
    for i in 0..cfg.repeats {
        let dir = out.join(format!("seed-{i}"));
        let s = run_one(&repeat_config(&cfg, i), &dir, resume)?;
        println!("seed-{i}: {}", describe(&s));
        finals.extend(s.final_mean_accuracy);
    }
    if !finals.is_empty() {
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let std = (finals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!("over {} repeats: final acc {mean:.4} ± {std:.4}", finals.len());
    }
    Ok(())
}

fn cmd_sweep(config: &Path, axis: &str, values: &[String], out: Option<PathBuf>) -> Result<()> {
    let cfg = parse_config(config)?;
    let axis = SweepAxis::parse(axis)?;
    let out = out_dir(&cfg, out);
    let points = values
        .iter()
        .map(|v| Ok((v, sweep_config(&cfg, axis, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let runs = std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .iter()
            .map(|(v, c)| {
                let dir = out.join(format!("{}={v}", axis.name()));
                scope.spawn(move || run_to_dir(c, &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    check_paired(&runs)?;
    for ((v, _), s) in points.iter().zip(&runs) {
        println!("{}={v}: {}", axis.name(), describe(s));
    }
    Ok(())
}

fn cmd_inspect(dir: &Path) -> Result<()> {
    let s = load_summary(dir)?;
    println!("{}", describe(&s));
    println!("partition {}", s.partition_hash);
    let ratios: Vec<f64> = s.lowrank_ratio.iter().flatten().copied().collect();
    if let Some(last) = ratios.last() {
        println!("low-rank ratio: last {last:.4}, mean {:.4}", ratios.iter().sum::<f64>() / ratios.len() as f64);
    }
    if let Some(d) = s.s_density.last() {
        println!("sparse density: last {d:.4}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, resume } => cmd_run(&config, out, resume),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => cmd_sweep(&config, &axis, &values, out),
        Command::Inspect { dir } => cmd_inspect(&dir),
        Command::MakeFixture { dir } => write_fixture(&dir)
            .map_err(HarnessError::from)
            .map(|()| println!("fixture written to {}", dir.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
