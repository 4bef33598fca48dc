//! `structlora`: run toy experiments, property audits, sweeps and reports.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use structlora::audit::{run_suite, Suite};
use structlora::harness::{
    render_report, summarize, train, Checkpoint, ExperimentConfig, RunResult, CSV_HEADER,
};

const EXIT_AUDIT: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "structlora",
    version,
    about = "Gated, graph-coordinated low-rank adapters at toy scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write results, metrics and a checkpoint.
    Run {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
        #[arg(short = 'o', long = "out", default_value = "runs")]
        out: PathBuf,
        /// Override a config key, e.g. `--set seed=7`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run each listed seed instead of the configured one.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run a fixed-seed property suite.
    Audit {
        suite: String,
        /// Where a replay file is written on failure.
        #[arg(short = 'o', long = "out", default_value = ".")]
        out: PathBuf,
    },
    /// One run per value of a config key (and per seed).
    Sweep {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(short = 'o', long = "out", default_value = "sweep")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Summarise every `run_*.json` in a directory.
    Report { dir: PathBuf },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Divergence(String),
    Audit(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Divergence(_) => EXIT_DIVERGENCE,
            Failure::Audit(_) => EXIT_AUDIT,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Divergence(m) | Failure::Audit(m) => m,
        }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<structlora::Error> for Failure {
    fn from(e: structlora::Error) -> Self {
        match e {
            structlora::Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(io_failure(path))
}

fn run_tag(cfg: &ExperimentConfig, extra: &str) -> String {
    format!("{}{extra}_seed{}", cfg.variant, cfg.seed)
}

fn metrics_csv(result: &RunResult) -> String {
    let mut csv = format!("{CSV_HEADER}\n");
    for row in result.csv_rows() {
        csv.push_str(&row);
        csv.push('\n');
    }
    csv
}

fn execute(cfg: &ExperimentConfig, out: &Path, extra: &str) -> Result<RunResult, Failure> {
    let trained = train(cfg)?;
    let tag = run_tag(cfg, extra);
    let checkpoint = Checkpoint::capture(cfg, &trained.network)?;
    let json = serde_json::to_string_pretty(&trained.result)
        .map_err(|e| Failure::Config(e.to_string()))?;
    write(&out.join(format!("run_{tag}.json")), &json)?;
    write(
        &out.join(format!("metrics_{tag}.csv")),
        &metrics_csv(&trained.result),
    )?;
    write(
        &out.join(format!("checkpoint_{tag}.json")),
        &checkpoint.to_json()?,
    )?;
    Ok(trained.result)
}

fn with_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<ExperimentConfig> {
    if seeds.is_empty() {
        vec![cfg.clone()]
    } else {
        seeds.iter().map(|s| cfg.with_seed(*s)).collect()
    }
}

fn cmd_run(path: &Path, out: &Path, overrides: &[String], seeds: &[u64]) -> Result<(), Failure> {
    let cfg = config::resolve(path, overrides)?;
    std::fs::create_dir_all(out).map_err(io_failure(out))?;
    let results = with_seeds(&cfg, seeds)
        .par_iter()
        .map(|c| execute(c, out, ""))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &results {
        println!(
            "{} seed {}: task_score={:.4} energy={:.6e} cos_adj={} ({:.2}s)",
            r.config.variant,
            r.config.seed,
            r.final_task_score,
            r.final_energy,
            r.final_cos_adj.map_or("n/a".into(), |c| format!("{c:.4}")),
            r.wall_time_secs
        );
    }
    Ok(())
}

fn cmd_audit(suite: &str, out: &Path) -> Result<(), Failure> {
    let suite: Suite = suite.parse()?;
    let report = run_suite(suite)?;
    print!("{}", report.render_table());
    if report.passed() {
        println!("all cases passed");
        return Ok(());
    }
    std::fs::create_dir_all(out).map_err(io_failure(out))?;
    let replay = out.join(format!("audit_{suite}_replay.json"));
    write(&replay, &report.replay_json()?)?;
    Err(Failure::Audit(format!(
        "{} case(s) failed; inputs written to {}",
        report.failures().len(),
        replay.display()
    )))
}

const SWEEP_HEADER: &str = "axis,value,variant,seed,final_task_score,final_task_loss,final_energy,final_cos_adj,extra_cost_pct";

fn cmd_sweep(
    path: &Path,
    axis: &str,
    values: &[String],
    out: &Path,
    overrides: &[String],
    seeds: &[u64],
) -> Result<(), Failure> {
    let values: Vec<&str> = values
        .iter()
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Failure::Config("sweep needs at least one value".into()));
    }
    let base = config::resolve(path, overrides)?;
    let mut jobs = Vec::new();
    for v in &values {
        let cfg = config::apply_overrides(&base, &[format!("{axis}={v}")])?;
        cfg.validate()?;
        for c in with_seeds(&cfg, seeds) {
            jobs.push((v.to_string(), c));
        }
    }
    std::fs::create_dir_all(out).map_err(io_failure(out))?;
    let results = jobs
        .par_iter()
        .map(|(v, c)| execute(c, out, &format!("_{axis}{v}")).map(|r| (v.clone(), r)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for (v, r) in &results {
        csv.push_str(&format!(
            "{axis},{v},{},{},{},{},{},{},{}\n",
            r.config.variant,
            r.config.seed,
            r.final_task_score,
            r.final_task_loss,
            r.final_energy,
            r.final_cos_adj.map(|c| c.to_string()).unwrap_or_default(),
            r.overhead.extra_cost_pct
        ));
    }
    write(&out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), Failure> {
    let entries = std::fs::read_dir(dir).map_err(io_failure(dir))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Config(format!(
            "no run_*.json results in {}",
            dir.display()
        )));
    }
    let mut results = Vec::with_capacity(files.len());
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(io_failure(f))?;
        let r: RunResult = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", f.display())))?;
        results.push(r);
    }
    let table = render_report(&results);
    let mut csv = String::from("variant,runs,task_score,energy,cos_adj,extra_cost_pct\n");
    for row in summarize(&results) {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.variant,
            row.runs,
            row.task_score,
            row.energy,
            row.cos_adj.map(|c| c.to_string()).unwrap_or_default(),
            row.extra_cost_pct
        ));
    }
    write(&dir.join("report.txt"), &table)?;
    write(&dir.join("report.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            config,
            out,
            overrides,
            seeds,
        } => cmd_run(config, out, overrides, seeds),
        Command::Audit { suite, out } => cmd_audit(suite, out),
        Command::Sweep {
            config,
            axis,
            values,
            out,
            overrides,
            seeds,
        } => cmd_sweep(config, axis, values, out, overrides, seeds),
        Command::Report { dir } => cmd_report(dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
