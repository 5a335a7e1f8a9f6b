mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "bigg", version, about = "Query-plan cost models: data generation, training, evaluation")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overwrite an existing output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic catalog and labeled plan dataset.
    GenData(commands::GenDataArgs),
    /// Train a cost model on a dataset.
    Train(commands::TrainArgs),
    /// Cost-estimation report (Q-error, Spearman, timing) on one split.
    Eval(commands::EvalArgs),
    /// Plan-selection report over candidate sets.
    Select(commands::SelectArgs),
    /// Finite-difference gradient checks for every model kind.
    Gradcheck(commands::GradcheckArgs),
    /// Inference timing per checkpoint.
    Bench(commands::BenchArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    if let Some(j) = g.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    let seed = g.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    match cli.command {
        Command::GenData(a) => commands::gen_data(g, cfg, &a),
        Command::Train(a) => commands::train(g, cfg, &a),
        Command::Eval(a) => commands::eval(g, cfg, &a),
        Command::Select(a) => commands::select(g, cfg, &a),
        Command::Gradcheck(a) => commands::gradcheck(g, cfg, &a),
        Command::Bench(a) => commands::bench(g, cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.global.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
