use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "ssadv",
    version,
    about = "Adversarial training with self-supervised auxiliary tasks"
)]
pub struct Cli {
    /// TOML experiment config
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out`)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override, `key=value`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Adversarial training (modes T0-T3, T_rotonly)
    Train {
        /// Continue from `<out>/state.ckpt` if present
        #[arg(long)]
        resume: bool,
    },
    /// Adversarial self-supervised pre-training
    Pretrain {
        #[arg(long)]
        resume: bool,
    },
    /// PGD-attack the test split at the config's epsilon and save the
    /// adversarial set
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output dataset container (default `<out>/adversarial.ckpt`)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Standard and robust accuracy of one checkpoint over the ε grid
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report CSV (default `<out>/report.csv`)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate several checkpoints and emit difference-vs-baseline data
    Sweep {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// Baseline model id (default: the first checkpoint)
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Generate corrupted test sets, optionally evaluating a checkpoint on them
    Corrupt {
        /// Checkpoint to evaluate on the generated sets
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Also evaluate under a PGD attack at the config's epsilon
        #[arg(long, requires = "eval")]
        attacked: bool,
    },
    /// Merge report CSVs, deduplicating rows by key
    ReportMerge {
        #[arg(long)]
        output: PathBuf,
        #[arg(num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
