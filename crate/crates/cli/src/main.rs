use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segrobust_cli::commands;
use segrobust_cli::{ExperimentConfig, Overrides, Result};

#[derive(Debug, Parser)]
#[command(name = "segrobust", version, about = "Adversarial robustness experiments for a 3D segmentation U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for data generation and training, overriding both config seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic phantoms and the train/test manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured defense and write checkpoint(s) and the log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Attack one subject and write the adversarial volume.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subject: String,
    },
    /// Score checkpoints on the test split; writes CSVs and plots.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Redraw plots from existing aggregate CSVs.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let overrides = Overrides {
        out: common.out.clone(),
        seed: common.seed,
    };
    let cfg = ExperimentConfig::load(&common.config, &overrides)?;
    cfg.persist()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load(&common)?;
            let m = commands::gen_data(&cfg)?;
            println!("wrote {} train and {} test subjects to {}", m.train.len(), m.test.len(), commands::data_dir(&cfg).display());
        }
        Command::Train { common } => {
            let cfg = load(&common)?;
            let out = commands::train(&cfg)?;
            for c in &out.checkpoints {
                println!("checkpoint {}", c.display());
            }
            println!("log {} ({} epochs)", out.log.display(), out.epochs);
        }
        Command::Attack { common, checkpoint, subject } => {
            let cfg = load(&common)?;
            let out = commands::attack(&cfg, &checkpoint, &subject)?;
            println!("{out}");
            println!("wrote {}", out.path.display());
        }
        Command::Evaluate { common, checkpoints } => {
            let cfg = load(&common)?;
            let out = commands::evaluate(&cfg, &checkpoints)?;
            for p in out.csvs.iter().chain(&out.plots) {
                println!("wrote {}", p.display());
            }
        }
        Command::Report { common } => {
            let cfg = load(&common)?;
            for p in commands::report(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

