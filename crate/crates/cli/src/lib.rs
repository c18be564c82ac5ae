//! Command-line driver: `gen-data`, `distill`, `adapt`, `eval` and `grad-check`.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "usbd", version, about = "Source-free graph domain adaptation through a distilled structural basis")]
#[command(after_help = "Any config leaf can be overridden with a dotted flag, e.g. --distill.lambda1 0.5")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled source and an unlabeled target domain.
    GenData(Common),
    /// Distill a synthetic basis from the source domain.
    Distill {
        #[command(flatten)]
        common: Common,
        /// TUDataset directory holding SOURCE_* files, instead of the configured source.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Train the target proxy on the basis and label the target graphs.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        basis: PathBuf,
        /// TUDataset directory holding TARGET_* files, instead of the configured target.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Score predictions against held-out labels.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare every backward rule against finite differences.
    GradCheck {
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

fn experiment(common: &Common, overrides: &[(String, String)]) -> Result<config::ExperimentConfig, CliError> {
    let mut all = overrides.to_vec();
    if let Some(seed) = common.seed {
        all.push(("seed".into(), seed.to_string()));
    }
    let mut cfg = config::load(common.config.as_deref(), &all)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Parses `args` (without the program name) and runs the command.
pub fn run(args: Vec<String>) -> Result<(), CliError> {
    let (rest, overrides) = config::split_overrides(args)?;
    let cli = Cli::try_parse_from(std::iter::once("usbd".to_string()).chain(rest)).map_err(|e| {
        if e.use_stderr() {
            CliError::Config(e.to_string())
        } else {
            // --help and --version
            print!("{e}");
            CliError::Help
        }
    })?;
    let no_overrides = |name: &str| {
        if overrides.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("{name} takes no config overrides")))
        }
    };
    match cli.command {
        Command::GenData(common) => {
            let cfg = experiment(&common, &overrides)?;
            let manifest = commands::gen_data(&cfg)?;
            println!("wrote {}", manifest.display());
        }
        Command::Distill { common, source } => {
            let cfg = experiment(&common, &overrides)?;
            let s = commands::cmd_distill(&cfg, source.as_deref())?;
            println!(
                "distilled K={} in {:.1}s: epsilon_resid {:.4}, radius {:.4}, worst probe gap {:.4}",
                s.basis.k(),
                s.seconds,
                s.covering.epsilon_resid,
                s.covering.radius,
                s.probes.worst_gap
            );
            println!("wrote {}", s.basis_path.display());
        }
        Command::Adapt { common, basis, target } => {
            let cfg = experiment(&common, &overrides)?;
            let s = commands::cmd_adapt(&cfg, &basis, target.as_deref())?;
            println!(
                "fingerprint {:.4} over {} graphs, covering discrepancy {:.4}",
                s.fingerprint.value, s.fingerprint.n_graphs, s.covering_discrepancy
            );
            println!("wrote {}", cfg.out.join("predictions.txt").display());
        }
        Command::Eval { predictions, labels, out } => {
            no_overrides("eval")?;
            let s = commands::cmd_eval(&predictions, &labels, &out)?;
            println!("accuracy {:.6} ({}/{})", s.accuracy, s.correct, s.total);
        }
        Command::GradCheck { fault } => {
            no_overrides("grad-check")?;
            let results = commands::cmd_grad_check(fault.as_deref())?;
            print!("{}", commands::oracle_table(&results));
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Numerical(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}
