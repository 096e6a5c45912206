use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aub_cli::commands;
use aub_cli::config::Loaded;

/// Flow-based alignment of k distributions.
#[derive(Parser)]
#[command(name = "aub", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the dataset bundle.
    GenData(Common),
    /// Train and write best/final checkpoints and the epoch trace.
    Train(Common),
    /// Evaluate a checkpoint on the test splits.
    Eval(Common),
    /// Map rows of a CSV from one domain to another.
    Translate(Common),
    /// Train and evaluate several configs and tabulate them.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let (cmd, args) = match cli.command {
        Command::GenData(a) => ("gen-data", a),
        Command::Train(a) => ("train", a),
        Command::Eval(a) => ("eval", a),
        Command::Translate(a) => ("translate", a),
        Command::Compare(a) => ("compare", a),
    };
    let loaded = Loaded::read(&args.config, args.seed)?;
    let out = loaded.out_dir(args.out.as_deref());
    log::info!("{cmd}: config {} -> {}", args.config.display(), out.display());
    let ckpt = args.checkpoint.as_deref();
    match cmd {
        "gen-data" => commands::gen_data(&loaded, &out),
        "train" => commands::train(&loaded, &out),
        "eval" => commands::eval(&loaded, &out, ckpt),
        "translate" => commands::translate_cmd(&loaded, &out, ckpt),
        _ => commands::compare(&loaded, &out, args.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(stdout) => {
            print!("{stdout}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
