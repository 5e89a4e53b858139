use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "promptfuse", version, about = "Multimodal intent classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that resolves an experiment config.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config (JSON). A `run.json` from an earlier run also works.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as a feature archive.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Synthetic-data seed (overrides `data.synthetic.seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint, history and test metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training seed (overrides `train.seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of the configured data.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory or `checkpoint.bin` file.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write `metrics.json` here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Full model against each single-component removal, over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of training seeds (overrides `seeds`).
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Identical runs that differ only in the prompt mode.
    ComparePrompts {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Draw SVG bar charts from the CSV tables in a results directory.
    Plot {
        #[arg(long, value_name = "DIR")]
        results: PathBuf,
        /// Where to write the charts (defaults to the results directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Check a feature archive's structure, sizes and checksums.
    ValidateArchive {
        #[arg(value_name = "DIR")]
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for promptfuse::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => promptfuse::Split::Train,
            SplitArg::Val => promptfuse::Split::Val,
            SplitArg::Test => promptfuse::Split::Test,
        }
    }
}
