use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use flowdens::runner;
use flowdens::{Error, ExperimentConfig, Report};

/// Exit status when a checked quantity exceeds its bound plus slack.
const BOUND_FAILED: u8 = 3;
const CONFIG_ERROR: u8 = 2;
const RUN_ERROR: u8 = 1;

#[derive(Parser)]
#[command(
    name = "flowdens",
    version,
    about = "Run density and convergence experiments for SDE flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Replace the seed given in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; output does not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory. Falls back to the config's `output`, then
    /// `FLOWDENS_OUT`, then `./out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Recompute every closed-form oracle and compare.
    OracleSuite {
        /// Monte-Carlo samples for the sampled oracle.
        #[arg(long, default_value_t = 10_000_000)]
        samples: usize,
    },
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Stability { .. } | Error::UnknownField(_) => Failure::Config(e.into()),
            e => Failure::Run(e.into()),
        }
    }
}

fn output_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .or_else(|| std::env::var_os("FLOWDENS_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.check()?;
    Ok(cfg)
}

fn print_report(report: &Report) {
    for r in &report.rows {
        let verdict = match r.pass() {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "",
        };
        let bound = r.bound.map(|b| format!(" bound {b:.6e}")).unwrap_or_default();
        println!("{:<28} {:.6e} ± {:.1e}{bound} {verdict}", r.quantity, r.value, r.stderr);
    }
    for n in &report.notes {
        println!("note: {n}");
    }
}

fn execute(cli: &Cli) -> Result<u8, Failure> {
    match &cli.command {
        Command::Validate { config } => {
            let cfg = load(cli, config)?;
            println!(
                "{}: {} experiment `{}`, seed {}",
                config.display(),
                cfg.kind.name(),
                cfg.id(),
                cfg.seed
            );
            Ok(0)
        }
        Command::Run { config } => {
            let cfg = load(cli, config)?;
            let out = output_dir(cli, Some(&cfg));
            let outcome = runner::run(&cfg, &out)?;
            print_report(&outcome.report);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(if outcome.report.passed() { 0 } else { BOUND_FAILED })
        }
        Command::OracleSuite { samples } => {
            let seed = cli.seed.unwrap_or(1);
            let cfg = ExperimentConfig::from_toml(&format!(
                "kind = \"oracle_suite\"\nseed = {seed}\n[oracle_suite]\nmc_samples = {samples}\n"
            ))?;
            let outcome = runner::run(&cfg, &output_dir(cli, None))?;
            print_report(&outcome.report);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            // A disagreeing oracle is a broken build, not a statistical miss.
            Ok(if outcome.report.passed() { 0 } else { RUN_ERROR })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")
        {
            eprintln!("error: {e:#}");
            return ExitCode::from(RUN_ERROR);
        }
    }
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(CONFIG_ERROR)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(RUN_ERROR)
        }
    }
}
