mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tpgr::{ErrorKind, Result, TpgrError};

use crate::commands::Run;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "tpgr", version, about = "Tree-structured policy gradient recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a rating log and cache it in the run directory.
    Ingest(Args),
    /// Write dataset statistics and the consecutive-rating profile.
    Analyze(Args),
    /// Build item representations and the balanced clustering tree.
    Cluster(Args),
    /// Train the policy with REINFORCE against the simulator.
    Train(Args),
    /// Evaluate the trained policy and the baselines on test users.
    Eval(Args),
    /// Time decisions and training steps across tree depths.
    Bench(Args),
    /// Generate a synthetic rating log.
    Synth(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, as `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn load_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TpgrError::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Ok(seed) = std::env::var("TPGR_SEED") {
        cfg.set("seed", &seed)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<String>> {
    let (name, args, f): (&'static str, &Args, fn(&mut Run) -> Result<()>) = match &cli.command {
        Command::Ingest(a) => ("ingest", a, commands::ingest),
        Command::Analyze(a) => ("analyze", a, commands::analyze),
        Command::Cluster(a) => ("cluster", a, commands::cluster),
        Command::Train(a) => ("train", a, commands::train_cmd),
        Command::Eval(a) => ("eval", a, commands::eval_cmd),
        Command::Bench(a) => ("bench", a, commands::bench_cmd),
        Command::Synth(a) => ("synth", a, commands::synth),
    };
    let cfg = load_config(args)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| TpgrError::InvalidArgument(e.to_string()))?;
    }
    let mut run = Run::new(&cfg, name)?;
    f(&mut run)?;
    run.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(artifacts) => {
            for a in artifacts {
                println!("{a}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, tag) = match e.kind() {
                ErrorKind::Config => (2, "config"),
                ErrorKind::Data => (3, "data"),
                ErrorKind::Numeric => (4, "numeric"),
            };
            let msg = e.to_string().replace('\n', " ");
            eprintln!("tpgr: error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}
