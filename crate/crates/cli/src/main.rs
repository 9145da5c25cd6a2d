mod commands;
mod error;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "lamo", version, about = "Latent Mamba Operator: data, training, evaluation and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test datasets and a manifest.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
    /// Time sequential and parallel scans.
    BenchScan(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Darcy,
    Seq1d,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Grid as HxW. For seq1d, H must be 1 and W is the sequence length.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    n_train: usize,
    #[arg(long)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// seq1d task: diffusion, advection or advection2.
    #[arg(long, default_value = "advection2")]
    task: String,
    /// seq1d explicit steps between input and target.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// seq1d diffusion or Courant number.
    #[arg(long, default_value_t = 1.0)]
    coef: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.ldst and test.ldst.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 1 gives a fully sequential run.
    #[arg(long)]
    threads: Option<usize>,
    /// `key=value` overrides applied after the config file.
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An LDST file, or a directory whose test.ldst is used.
    #[arg(long)]
    data: PathBuf,
    /// Per-sample CSV; defaults to eval.csv next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "single")]
    precision: String,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096,16384")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    state: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
        Command::BenchScan(a) => commands::bench_scan(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
