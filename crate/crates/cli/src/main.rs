use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pfedgrp::config::{parse_config, RunConfig};
use pfedgrp::report::{self, IaaSeries};
use pfedgrp::{run_experiment, MethodId, RunRecord};
use rayon::prelude::*;

const WORKERS_ENV: &str = "PFEDGRP_WORKERS";

#[derive(Parser)]
#[command(name = "pfedgrp", version, about = "Federated continual learning simulator with generative replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) pair of a configuration and write results.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a configuration, then print the effective version.
    Validate { config: PathBuf },
    /// Rebuild summary.json and iaa.svg from an existing iaa.csv and print a table.
    Report { out_dir: PathBuf },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let cfg = parse_config(path)
        .with_context(|| format!("configuration {}", path.display()))
        .map_err(Failure::Config)?;
    cfg.validate()
        .with_context(|| format!("configuration {}", path.display()))
        .map_err(Failure::Config)?;
    Ok(cfg)
}

fn run_dir_name(method: MethodId, seed: u64) -> String {
    format!("{method}_seed{seed}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(config: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    let store = cfg
        .load_store()
        .with_context(|| "loading dataset")
        .map_err(Failure::Config)?;
    let experiment = cfg.experiment();

    std::fs::create_dir_all(out_dir.join("runs"))
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(runtime)?;
    write_file(&out_dir.join("config.json"), &(cfg.to_json() + "\n")).map_err(runtime)?;

    let jobs: Vec<(MethodId, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    eprintln!(
        "running {} job(s) on {} worker(s), writing to {}",
        jobs.len(),
        rayon::current_num_threads(),
        out_dir.display()
    );
    let started = Instant::now();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(method, seed)| -> Result<RunRecord> {
            let record = run_experiment(&store, method, &experiment, seed)
                .with_context(|| format!("{method}, seed {seed}"))?;
            let t = record.timings;
            eprintln!(
                "{method} seed {seed}: AA {:.4}, AFM {}, {:.1}s (materialize {:.2}, local {:.2}, aggregate {:.2}, evaluate {:.2})",
                record.aa(),
                record.afm().map_or("n/a".to_string(), |v| format!("{v:.4}")),
                t.materialize + t.local + t.aggregate + t.evaluate,
                t.materialize,
                t.local,
                t.aggregate,
                t.evaluate
            );
            let dir = out_dir.join("runs").join(run_dir_name(method, seed));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let json = serde_json::to_string_pretty(&record)? + "\n";
            write_file(&dir.join("record.json"), &json)?;
            report::emit_results(std::slice::from_ref(&record), &dir)?;
            Ok(record)
        })
        .collect::<Result<_>>()
        .map_err(runtime)?;

    let files = report::emit_results(&records, &out_dir).map_err(runtime)?;
    eprintln!("finished in {:.1}s", started.elapsed().as_secs_f64());
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_validate(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    println!("{}", cfg.to_json());
    Ok(())
}

fn cmd_report(out_dir: &Path) -> Result<(), Failure> {
    let series: Vec<IaaSeries> = report::read_iaa_csv(&out_dir.join("iaa.csv")).map_err(runtime)?;
    let (summary, _) = report::write_outputs(&series, out_dir).map_err(runtime)?;
    println!("{:<16} {:<20} {:>5} {:>9} {:>9} {:>9} {:>9}", "method", "scenario", "seeds", "AA", "AA sd", "AFM", "AFM sd");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for m in &summary.methods {
        println!(
            "{:<16} {:<20} {:>5} {:>9.4} {:>9} {:>9} {:>9}",
            m.method.name(),
            m.scenario,
            m.seeds,
            m.aa_mean,
            cell(m.aa_std),
            cell(m.afm_mean),
            cell(m.afm_std)
        );
    }
    Ok(())
}

fn configure_pool() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let workers: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(runtime)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_pool().and_then(|()| match &cli.command {
        Command::Run { config, out } => cmd_run(config, out.clone()),
        Command::Validate { config } => cmd_validate(config),
        Command::Report { out_dir } => cmd_report(out_dir),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.exit_code())
        }
    }
}
