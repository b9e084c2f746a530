use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod report;
mod train;

/// Exit codes.
const USAGE: u8 = 1;
pub const VERIFY_FAILED: u8 = 2;
const RUNTIME: u8 = 3;

/// Error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: USAGE, error: error.into() }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self { code: RUNTIME, error: error.into() }
    }
}

pub type CmdResult = Result<u8, Failure>;

#[derive(Parser, Debug)]
#[command(name = "stapo", version, about = "Group policy optimization lab over verifiable arithmetic tasks")]
struct Cli {
    /// Worker threads for rollouts and checks (overrides STAPO_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a prompt dataset as JSON lines.
    Generate(GenerateArgs),
    /// Train a tabular policy and write metrics, checkpoint and token counts.
    Train(train::TrainArgs),
    /// Run the numerical verification suite and write a JSON report.
    Verify(report::VerifyArgs),
    /// Aggregate a token trace into phase-cell statistics.
    Classify(report::ClassifyArgs),
    /// Split metrics.jsonl into one (step, value) CSV per quantity.
    Analyze(report::AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Task as mod:M:L or mod:M:L:OPS, OPS drawn from "+-*".
    #[arg(long)]
    task: String,
    #[arg(long, short = 'n', default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn generate(args: GenerateArgs) -> CmdResult {
    let task: stapo_core::tasks::ArithmeticTask = args.task.parse().map_err(Failure::usage)?;
    let prompts = task.generate_prompts(args.n, args.seed);
    match args.out {
        Some(path) => {
            stapo_core::tasks::save_prompts(&path, &prompts).map_err(Failure::runtime)?;
            log::info!("wrote {} prompts to {}", prompts.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            stapo_core::domain::write_jsonl(stdout.lock(), &prompts).map_err(Failure::runtime)?;
        }
    }
    Ok(0)
}

fn worker_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("STAPO_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(anyhow::anyhow!("STAPO_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = worker_count(cli.threads)? {
        if n == 0 {
            return Err(Failure::usage(anyhow::anyhow!("thread count must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(Failure::runtime)?;
    }
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train::run(a),
        Command::Verify(a) => report::verify(a),
        Command::Classify(a) => report::classify(a),
        Command::Analyze(a) => report::analyze(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
