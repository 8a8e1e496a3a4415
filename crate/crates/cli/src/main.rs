//! `se3flow`: generate datasets, train Flow 1 / Flow 2, synthesize reflow
//! pairs, evaluate and ablate checkpoints, and tabulate external results.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or input, 3 numeric
//! failure, 4 partial evaluation (some seeds failed).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "se3flow", version, about = "Rectified flow policies on SE(3)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train and test datasets for a task.
    Generate(GenerateArgs),
    /// Train Flow 1 (stage 1) or the reflow refinement Flow 2 (stage 2).
    Train(TrainArgs),
    /// Integrate a Flow-1 checkpoint to produce reflow pairs.
    SynthesizeReflow(ReflowArgs),
    /// Evaluate a checkpoint at one or more step budgets.
    Eval(EvalArgs),
    /// Step-budget ablation table with fixed-step RK4.
    Ablate(AblateArgs),
    /// Import external results and print them side by side.
    ImportExternal(ImportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $SE3FLOW_OUT or ./out].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// rotating_triangle, door_opening or painting.
    #[arg(long)]
    task: String,
    /// Training demonstrations [default: the task's published count].
    #[arg(long)]
    n: Option<usize>,
    /// Held-out test demonstrations [default: n / 5, at least 1].
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, default_value_t = 3407)]
    seed: u64,
    /// Also write JSON copies.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// 1 for Flow 1, 2 for Flow 2.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Training dataset.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Flow-1 checkpoint to refine (stage 2).
    #[arg(long)]
    flow1: Option<PathBuf>,
    /// Reflow pairs from `synthesize-reflow` (stage 2); synthesized on the fly when absent.
    #[arg(long)]
    reflow: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mix_ratio: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReflowArgs {
    #[command(flatten)]
    common: Common,
    /// Flow-1 checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: Option<PathBuf>,
    /// Pairs to draw [default: one per training action].
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated step budgets [default: 1,2,10,50,100].
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    /// Comma-separated seeds [default: 3407..3416].
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// euler, rk4 or rk45 [default: rk4].
    #[arg(long)]
    solver: Option<String>,
    /// autoregressive or joint.
    #[arg(long)]
    chaining: Option<String>,
    /// Label used in the reports [default: the checkpoint's stage].
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// External results to show next to the ablation.
    #[arg(long)]
    external: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// CSV with columns task,model,steps,seed,trajectory_mean.
    #[arg(long)]
    file: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::SynthesizeReflow(a) => commands::synthesize_reflow(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::ImportExternal(a) => commands::import_external(a),
    };
    match outcome {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Partial(n)) => {
            eprintln!("warning: {n} evaluation run(s) failed and were excluded");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
