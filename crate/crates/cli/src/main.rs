//! `cemb`: generate datasets, train, evaluate, check gradients and compare
//! conditioned against unconditioned fine-tuning.
//!
//! Exit codes: 0 success, 1 user or configuration error, 2 internal error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::StageSel;

#[derive(Debug, Parser)]
#[command(name = "cemb", version, about = "Condition-embedded box-prompt segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (PGM images, masks, manifest.csv).
    Generate(GenerateArgs),
    /// Run the pretrain and/or fine-tune stage; writes history.csv and best.ckpt.
    Train(TrainArgs),
    /// Score a checkpoint on a split; writes metrics.csv / metrics.json.
    Eval(EvalArgs),
    /// Run the gradient-check battery.
    Gradcheck(GradcheckArgs),
    /// Conditioned versus unconditioned fine-tuning over several seeds.
    Ablate(AblateArgs),
}

/// Flags that override keys of the JSON run config.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or manifest.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Synthetic spec (JSON); the default heterogeneous spec when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long, value_enum)]
    pub stage: Option<StageSel>,
    /// Checkpoint to start from; required for `--stage finetune`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Fine-tune without the condition block.
    #[arg(long)]
    pub unconditioned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitSel {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or manifest.csv; defaults to the checkpoint's data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitSel,
    /// Run config to check the checkpoint against.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split seed; defaults to the checkpoint's.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write image | ground truth | prediction PGMs per sample.
    #[arg(long)]
    pub overlays: bool,
    /// Skip the condition block even if the checkpoint has one.
    #[arg(long)]
    pub unconditioned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeSel {
    F64,
    F32,
    Both,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub dtype: DTypeSel,
    /// Also run a check with a deliberately wrong backward rule.
    #[arg(long)]
    pub fixture: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e
                .chain()
                .any(|c| c.downcast_ref::<cemb_core::Error>().is_some_and(|x| x.is_internal()));
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}
