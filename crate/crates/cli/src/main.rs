use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod failure;

use config::{Overrides, Run};
use failure::Failure;

#[derive(Parser)]
#[command(name = "attrib-ens", version, about = "Training data attribution with efficient ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; never changes outputs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the ensemble members and write a manifest.
    Train(Common),
    /// Attribute with the configured ensemble.
    Attribute {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Linear datamodeling score of an attribution.
    Lds {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/attribution.tda`.
        #[arg(long)]
        attribution: Option<PathBuf>,
        /// Loaded if present, otherwise built and written here.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Run every point of the config's sweep and write a frontier CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Predicted training and serving costs and the parameter count.
    Costs(Common),
    /// Leave-one-out oracle scores.
    Oracle(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Costs(c) | Command::Oracle(c) => c,
            Command::Attribute { common, .. } | Command::Lds { common, .. } | Command::Sweep { common, .. } => common,
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = cli.command.common();
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Config(format!("cannot start {jobs} workers: {e}")))?;
    }
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
    };
    let run = Run::load(&common.config, &overrides)?;
    match &cli.command {
        Command::Train(_) => commands::train(&run),
        Command::Attribute { manifest, .. } => commands::attribute(&run, manifest.as_deref()),
        Command::Lds {
            attribution,
            ground_truth,
            ..
        } => commands::lds(&run, attribution.as_deref(), ground_truth.as_deref()),
        Command::Sweep { ground_truth, .. } => commands::sweep(&run, ground_truth.as_deref()),
        Command::Costs(_) => commands::costs(&run),
        Command::Oracle(_) => commands::oracle(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATTRIB_ENS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("attrib-ens: {f}");
            f.exit_code()
        }
    }
}
