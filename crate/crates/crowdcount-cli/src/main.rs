use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use crowdcount_cli::commands::{self, AppError, AppResult, Stage};
use crowdcount_cli::config::RunConfig;

/// Crowd-density estimation on synthetic scenes: generate data, train the
/// staged pipeline, and evaluate counting accuracy.
#[derive(Parser)]
#[command(name = "crowdcount", version)]
struct Cli {
    /// Run-configuration file (`key = value` lines, `#` comments).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed; overrides the configured value.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Artifact directory; overrides the configured value.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overwrite artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dot-scene corpus with images and ground truth.
    Synth {
        /// Number of scenes (defaults to the configured corpus size).
        #[arg(long, value_name = "N")]
        n: Option<usize>,
    },
    /// Train one stage of the pipeline.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Estimate the count of one PGM image and write its density map.
    Infer {
        /// Path to a binary (P5) PGM image.
        image: PathBuf,
    },
    /// Evaluate trained bundles on the held-out corpus slice.
    Eval {
        /// Evaluate all four configurations instead of just the configured one.
        #[arg(long)]
        ablation: bool,
    },
    /// Finite-difference gradient checks for every layer and the composite model.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    /// Global context estimator (whole-image density class).
    Gce,
    /// Local context estimator (patch density class).
    Lce,
    /// End-to-end density-map estimator with frozen context nets.
    Full,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Gce => Stage::Gce,
            StageArg::Lce => Stage::Lce,
            StageArg::Full => Stage::Full,
        }
    }
}

fn dispatch(cli: Cli) -> AppResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    match cli.command {
        Command::Synth { n } => commands::cmd_synth(&cfg, n, cli.force),
        Command::Train { stage } => commands::cmd_train(&cfg, stage.into()),
        Command::Infer { image } => commands::cmd_infer(&cfg, &image),
        Command::Eval { ablation } => commands::cmd_eval(&cfg, ablation),
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(AppError::Usage(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(AppError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn main() {
    std::process::exit(run());
}
