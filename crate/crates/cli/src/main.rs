use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use airfl::flcore::round::Variant;
use airfl::harness::{self, ExperimentConfig, SweepAxis, DATA_ROOT_ENV};

#[derive(Parser)]
#[command(name = "airfl", version, about = "Federated learning over a simulated MIMO AirComp uplink")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one variant for one seed.
    Run(RunArgs),
    /// Sweep one axis across variants and seeds.
    Sweep(SweepArgs),
    /// Summarise a sweep directory.
    Report {
        /// Sweep output directory (reads summary.csv, else metrics files).
        dir: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list for sweeps.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Directory holding the datasets.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// snr, K, N_r, labels_per_device or M.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "proposed")]
    variants: Vec<String>,
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = &c.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(r) = c.rounds {
        cfg.rounds = r;
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    if let Some(d) = &c.data_root {
        cfg.dataset.root = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run(a) => {
            let mut cfg = load(&a.common)?;
            if let Some(v) = &a.variant {
                cfg.variant = v.parse()?;
            }
            let res = harness::run_experiment(&cfg)
                .with_context(|| format!("run failed; partial metrics in {}", cfg.output.display()))?;
            println!(
                "{} seed {}: {} rounds, accuracy {:.4}, rounds to converge {}",
                res.variant,
                res.seed,
                res.records.len(),
                res.converged_accuracy(),
                res.rounds_to_converge().map_or("-".into(), |r| r.to_string())
            );
        }
        Cmd::Sweep(a) => {
            let cfg = load(&a.common)?;
            let axis: SweepAxis = a.axis.parse()?;
            let variants = a
                .variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<airfl::Result<Vec<_>>>()?;
            let rows = harness::sweep(&cfg, axis, &a.values, &variants, Some(&cfg.output))?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            print!("{}", harness::report(&rows)?.render());
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see summary.csv", rows.len());
            }
        }
        Cmd::Report { dir } => {
            let summary = dir.join("summary.csv");
            let rows = if summary.exists() {
                harness::read_summary(&summary)?
            } else {
                harness::summarize_metrics(&dir)?
            };
            if rows.is_empty() {
                bail!("no runs found under {}", dir.display());
            }
            print!("{}", harness::report(&rows)?.render());
        }
        Cmd::Config(c) => print!("{}", load(&c)?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
