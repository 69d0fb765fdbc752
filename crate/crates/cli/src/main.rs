use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kkl_tune::commands::{self, Context, EvalArgs, TrainArgs};
use kkl_tune::{CliError, CliResult, ExperimentConfig};

const LOG_ENV: &str = "KKL_TUNE_LOG";

#[derive(Parser)]
#[command(name = "kkl-tune", version, about = "Learned KKL observers with a tunable filter frequency")]
struct Cli {
    /// TOML experiment config; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `system.name`.
    #[arg(long, global = true)]
    system: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Backward-forward training pairs over the frequency grid.
    Generate,
    /// Train a supervised or autoencoder observer.
    Train {
        /// Dataset CSV (meta JSON alongside); `<out>/dataset.csv` by default.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train on one frequency of the dataset only.
        #[arg(long)]
        fine_tune: Option<f64>,
    },
    /// Sweep the noise-sensitivity criterion and report its argmin.
    Tune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulate noisy test trajectories and run the observer.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "omega")]
        omegas: Vec<f64>,
        #[arg(long = "sigma")]
        sigmas: Vec<f64>,
        /// Initial state as comma-separated coordinates; repeatable.
        #[arg(long = "x0", value_parser = parse_point)]
        x0: Vec<Vec<f64>>,
    },
    /// Reconstruction error over a grid of the state domain.
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "omega")]
        omegas: Vec<f64>,
    },
    /// Measure the decay rate of the filter-state error.
    Contraction {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "omega")]
        omegas: Vec<f64>,
        #[arg(long = "x0", value_parser = parse_point)]
        x0: Vec<Vec<f64>>,
    },
}

fn parse_point(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

fn init_logging() -> CliResult<()> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    if !["error", "warn", "info", "debug"].contains(&level.as_str()) {
        return Err(CliError::Config(format!("{LOG_ENV}: expected error, warn, info or debug, got {level:?}")));
    }
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    Ok(())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(name) = &cli.system {
        cfg.system.name = name.clone();
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    init_logging()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads: must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let ctx = Context::new(load_config(&cli)?, cli.out.clone())?;
    log::debug!("config digest {}", ctx.digest);
    match cli.command {
        Command::Generate => commands::cmd_generate(&ctx),
        Command::Train { dataset, resume, fine_tune } => commands::cmd_train(&ctx, &TrainArgs { dataset, resume, fine_tune }),
        Command::Tune { checkpoint } => commands::cmd_tune(&ctx, checkpoint.as_deref()),
        Command::Evaluate { checkpoint, omegas, sigmas, x0 } => {
            commands::cmd_evaluate(&ctx, &EvalArgs { checkpoint, omegas, sigmas, x0 })
        }
        Command::Heatmap { checkpoint, omegas } => commands::cmd_heatmap(&ctx, checkpoint.as_deref(), &omegas),
        Command::Contraction { checkpoint, omegas, x0 } => commands::cmd_contraction(&ctx, checkpoint.as_deref(), &omegas, &x0),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(kkl::KklError::BlowUp { .. }) = e {
                eprintln!("hint: saturate the dynamics outside the domain of interest, e.g. --system van-der-pol-sat");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
