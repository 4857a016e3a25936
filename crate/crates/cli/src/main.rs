mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multi-rate compressive sensing codec with a cascaded pyramid reconstructor.
///
/// Settings come from the `--config` file; flags given on the command line
/// override the file, and the file overrides built-in defaults.
#[derive(Parser, Debug)]
#[command(name = "lapran", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory holding run directories.
    #[arg(long, global = true, env = "LAPRAN_RUN_DIR", default_value = "runs")]
    pub run_dir: PathBuf,
    /// Only report errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print per-stage measurement counts and compression ratios.
    Budget(commands::BudgetArgs),
    /// Encode an image into an MRCS measurement file.
    Encode(commands::EncodeArgs),
    /// Reconstruct an image pyramid from an MRCS file.
    Reconstruct(commands::ReconstructArgs),
    /// Train the pyramid stage by stage, resuming where a run left off.
    Train(commands::TrainArgs),
    /// Evaluate a trained bundle on the test split.
    Eval(commands::EvalArgs),
    /// Compare per-stage test MSE with and without measurement fusion.
    Ablate(commands::AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    let result = match cli.command {
        Command::Budget(args) => commands::budget(&cli.global, &args),
        Command::Encode(args) => commands::encode(&cli.global, &args),
        Command::Reconstruct(args) => commands::reconstruct(&cli.global, &args),
        Command::Train(args) => commands::train(&cli.global, &args),
        Command::Eval(args) => commands::eval(&cli.global, &args),
        Command::Ablate(args) => commands::ablate(&cli.global, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
