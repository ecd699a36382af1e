use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use noisegrid_core::pipeline::{self, Method, PipelineConfig};
use noisegrid_core::Error;

/// Localize tampered patches in scientific images from noise inconsistencies.
#[derive(Parser, Debug)]
#[command(name = "noisegrid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = "NOISEGRID_JOBS")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the manipulated corpus, masks, manifest and split.
    Synth(Common),
    /// Extract patch features and labels for every corpus image.
    Features(Common),
    /// Train the patch classifier on the training split.
    Train(Common),
    /// Write score maps and heatmaps for images (default: the test split).
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: Vec<PathBuf>,
    },
    /// Report AUC, F1 and accuracy on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = MethodArg::Ours)]
        method: MethodArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Ours,
    Noi,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::UnknownGenerator(_) => 1,
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn setup(common: &Common) -> Result<PipelineConfig, Error> {
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth(common) => {
            let s = pipeline::cmd_synth(&setup(&common)?)?;
            for (kind, n) in &s.counts {
                println!("{kind}: {n}");
            }
            println!("train: {}  test: {}  manifest: {}", s.train, s.test, s.manifest.display());
        }
        Command::Features(common) => {
            let s = pipeline::cmd_features(&setup(&common)?)?;
            println!("extracted: {}  cached: {}  too small: {}", s.extracted, s.cached, s.too_small);
        }
        Command::Train(common) => {
            let s = pipeline::cmd_train(&setup(&common)?)?;
            println!(
                "trained on {} patches ({} tampered); best epoch {} of {}; model: {}",
                s.samples,
                s.positives,
                s.best_epoch,
                s.epochs_run,
                s.model.display()
            );
        }
        Command::Predict { common, image } => {
            for p in pipeline::cmd_predict(&setup(&common)?, &image)? {
                println!("{} -> {}", p.image.display(), p.scores.display());
            }
        }
        Command::Eval { common, method } => {
            let method = match method {
                MethodArg::Ours => Method::Ours,
                MethodArg::Noi => Method::Noi,
            };
            let s = pipeline::cmd_eval(&setup(&common)?, method)?;
            print!("{}", s.report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
