//! `dac`: generate cohorts, train, evaluate and adapt policies in a
//! workspace rooted at `$DAC_WORKSPACE` (default: the current directory).
//!
//! Exit status is 0 on success, 2 for invalid input or artifacts, 3 when
//! training diverges and 1 for I/O failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dac_core::config::RunConfig;
use dac_core::report::headline_table;
use dac_core::trainer::Ablation;
use dac_core::workspace::{TrainOptions, Workspace};
use dac_core::{DacError, Result};

#[derive(Parser)]
#[command(name = "dac", version, about = "Deconfounding actor-critic for ventilator-setting policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key-value config file (defaults apply to unset keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,

    /// Train without one ingredient of the method.
    #[arg(long, global = true, value_enum)]
    ablate: Option<Ablate>,

    /// Print results of evaluate, adapt and verify as JSON.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured cohort.
    Generate,
    /// Pre-train the estimators and train the policy (resumes if interrupted).
    Train,
    /// Adapt the trained policy to a cohort with shifted dynamics.
    Adapt,
    /// Score policy, behavior clone and clinicians on the test folds.
    Evaluate,
    /// Render figures from the stored evaluation.
    Report,
    /// Re-hash every artifact of the configured run.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablate {
    /// No risk-matched resampling.
    Rsp,
    /// No deconfounding weights.
    Dcf,
    /// No short-term reward.
    Short,
    /// No long-term reward.
    Long,
}

impl Ablate {
    fn name(self) -> &'static str {
        match self {
            Ablate::Rsp => "rsp",
            Ablate::Dcf => "dcf",
            Ablate::Short => "short",
            Ablate::Long => "long",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(a) = cli.ablate {
        config.pipeline.train.ablation = Ablation::single(a.name())?;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let ws = Workspace::from_env();
    match cli.command {
        Command::Generate => {
            let dir = ws.generate(&config, cli.force)?;
            println!("data {} written to {}", config.data_id(), dir.display());
        }
        Command::Train => {
            let s = ws.train(&config, TrainOptions { force: cli.force, stop_after: None })?;
            if let Some(epoch) = s.resumed_at {
                println!("resumed run {} after epoch {epoch}", s.run_id);
            }
            if s.pretrained_reused {
                println!("reused pre-trained estimators");
            }
            let best = match (s.best_epoch, s.best_wis) {
                (Some(e), Some(w)) => format!("best validation WIS {w:.3} at epoch {e}"),
                _ => "no epochs run".to_string(),
            };
            println!("run {} trained for {} epochs, {best}; artifacts in {}", s.run_id, s.epochs, s.dir.display());
        }
        Command::Adapt => {
            let s = ws.adapt(&config, cli.force)?;
            if cli.json {
                println!("{}", serde_json::to_string(&s.points)?);
                return Ok(());
            }
            println!("{:>8} {:>8} {:>8} {:>9} {:>8}", "fraction", "patients", "adapted", "zero-shot", "scratch");
            for p in &s.points {
                let scratch = p.scratch.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{:>8.2} {:>8} {:>8.3} {:>9.3} {:>8}",
                    p.fraction, p.target_patients, p.adapted, p.zero_shot, scratch
                );
            }
            println!("artifacts in {}", s.dir.display());
        }
        Command::Evaluate => {
            let report = ws.evaluate(&config)?;
            if cli.json {
                println!("{}", serde_json::to_string(&report)?);
            } else {
                print!("{}", headline_table(&report));
            }
        }
        Command::Report => {
            for path in ws.report(&config)? {
                println!("{}", path.display());
            }
        }
        Command::Verify => {
            let checked = ws.verify(&config)?;
            if cli.json {
                let manifests: Vec<_> = checked.iter().map(|(_, m)| m).collect();
                println!("{}", serde_json::to_string(&manifests)?);
                return Ok(());
            }
            for (dir, manifest) in checked {
                println!("ok {} {} ({} files) {}", manifest.kind, manifest.id, manifest.files.len(), dir.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &DacError) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
