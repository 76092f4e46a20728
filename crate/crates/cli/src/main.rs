use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use relab_cli::{compare_schemes, exit_code, render_report, run_experiment, sweep_ae, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "relab", version, about = "Random-erasure defenses against model inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Dotted-key override, e.g. `--set policy.a_hi=0.3`; repeatable.
    #[arg(long = "set", value_name = "K=V")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Until {
    Data,
    Train,
    Attack,
    Eval,
    Analyze,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic private and public splits.
    GenData(Common),
    /// Train the evaluation model, decoder and target.
    Train(Common),
    /// Invert the target and save reconstructions.
    Attack(Common),
    /// Compute metrics.json for the configured run.
    Eval(Common),
    /// Compute metrics plus featspace.json and projection.csv.
    Analyze(Common),
    /// Run the pipeline up to a chosen stage (all stages by default).
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "analyze")]
        until: Until,
    },
    /// Sweep the erased-area level over repeats and write summary.csv.
    Sweep(Common),
    /// Compare erasure schemes at matched concealment levels.
    CompareSchemes(Common),
    /// Print a table for a run or sweep directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding summary.csv or metrics.json; defaults to the output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_overrides(&c.sets)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(cfg: &ExperimentConfig, until: Stage) -> Result<()> {
    let outcome = run_experiment(cfg, until)?;
    println!("wrote {}", outcome.run_dir.join("manifest.json").display());
    if let Some(m) = outcome.metrics {
        println!("{}", serde_json::to_string_pretty(&m)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => stage(&resolve(&c)?, Stage::Data),
        Command::Train(c) => stage(&resolve(&c)?, Stage::Train),
        Command::Attack(c) => stage(&resolve(&c)?, Stage::Attack),
        Command::Eval(c) => stage(&resolve(&c)?, Stage::Eval),
        Command::Analyze(c) => stage(&resolve(&c)?, Stage::Analyze),
        Command::Run { common, until } => {
            let until = match until {
                Until::Data => Stage::Data,
                Until::Train => Stage::Train,
                Until::Attack => Stage::Attack,
                Until::Eval => Stage::Eval,
                Until::Analyze => Stage::Analyze,
            };
            stage(&resolve(&common)?, until)
        }
        Command::Sweep(c) => {
            let cfg = resolve(&c)?;
            let report = sweep_ae(&cfg, c.jobs)?;
            print!("{}", render_report(&cfg.out)?);
            if !report.verdict.passes {
                log::warn!("sweep trend does not meet the configured thresholds");
            }
            Ok(())
        }
        Command::CompareSchemes(c) => {
            let cfg = resolve(&c)?;
            compare_schemes(&cfg, c.jobs)?;
            print!("{}", render_report(&cfg.out)?);
            Ok(())
        }
        Command::Report { common, dir } => {
            let dir = match dir {
                Some(d) => d,
                None => resolve(&common)?.out,
            };
            print!("{}", render_report(&dir).with_context(|| format!("reporting on {}", dir.display()))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
