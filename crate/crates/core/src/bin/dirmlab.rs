use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use dirmlab::runner::{self, ExecOptions, RunConfig, CHECKPOINT_FILE};
use dirmlab::Result;

#[derive(Parser)]
#[command(name = "dirmlab", version, about = "Synthetic BEV detection-head laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Model seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Directory holding train.jsonl and eval.jsonl (defaults to --out).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Run on a single thread.
    #[arg(long, global = true)]
    serial: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval frame files.
    Gen,
    /// Train a head and write the checkpoint and training log.
    Train,
    /// Evaluate a checkpoint on the eval frames.
    Eval {
        /// Checkpoint path (defaults to <out>/model.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every `cell.*` of the configuration over all `seeds`.
    Ablate,
    /// Center-error and quality-split diagnostics for one or more checkpoints.
    Diag {
        /// `LABEL=PATH` or `PATH`; repeatable.
        #[arg(long)]
        checkpoint: Vec<String>,
        /// Include a head that outputs the ground truth exactly.
        #[arg(long)]
        oracle: bool,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set_pair(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    let opts = ExecOptions { serial: cli.serial };
    let data = cli.data.clone().unwrap_or_else(|| cli.out.clone());
    match &cli.command {
        Command::Gen => {
            runner::cmd_gen(&cfg, &cli.out)?;
            println!("wrote {} train and {} eval frames to {}", cfg.train_frames, cfg.eval_frames, cli.out.display());
        }
        Command::Train => {
            let path = runner::cmd_train(&cfg, &data, &cli.out, opts)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { checkpoint } => {
            let ck = checkpoint.clone().unwrap_or_else(|| cli.out.join(CHECKPOINT_FILE));
            let report = runner::cmd_eval(&cfg, &ck, &data, &cli.out, opts)?;
            print!("{}", report.to_csv());
        }
        Command::Ablate => {
            let runs = runner::cmd_ablate(&cfg, &cli.out, opts)?;
            let failed = runs.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} runs, {failed} failed; wrote {}", runs.len(), cli.out.join(runner::ABLATION_FILE).display());
        }
        Command::Diag { checkpoint, oracle } => {
            let cks: Vec<(String, PathBuf)> = checkpoint
                .iter()
                .enumerate()
                .map(|(k, s)| match s.split_once('=') {
                    Some((label, path)) => (label.to_string(), PathBuf::from(path)),
                    None => (format!("model{k}"), PathBuf::from(s)),
                })
                .collect();
            runner::cmd_diag(&cfg, &cks, *oracle, &data, &cli.out, opts)?;
            println!("wrote diagnostics to {}", cli.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.serial {
        // A one-thread global pool keeps every code path single-threaded.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
