mod commands;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(name = "geodyn", version, about = "Landmark-dynamics liveness models: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output of the run.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic landmark dataset with photometric features.
    Synth(commands::SynthArgs),
    /// Train the graph network on movement labels.
    TrainGcn(commands::TrainGcnArgs),
    /// Train the fusion head on a frozen graph network.
    TrainFusion(commands::TrainFusionArgs),
    /// Score a split and report error rates.
    Eval(commands::EvalArgs),
    /// Verify analytic gradients of every layer against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Export per-node activation maps.
    Activations(commands::ActivationsArgs),
}

fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("GEODYN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Validation(format!(
                "GEODYN_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    geodyn::tensor::set_threads(threads_from_env()?);
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainGcn(a) => commands::train_gcn(a),
        Command::TrainFusion(a) => commands::train_fusion(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Activations(a) => commands::activations(a),
    }
}

fn main() -> ExitCode {
    logging::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = run(cli);
    logging::flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
