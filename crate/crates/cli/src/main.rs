//! `edpa`: generate synthetic scenes, pretrain a victim, optimise patches,
//! fine-tune defenses and measure everything.
//!
//! Every subcommand accepts `--seed`, `--config FILE` (key=value lines) and
//! `--out`. Failures exit with a code per error category: 2 for bad input
//! or configuration, 3 for malformed files, 4 for I/O, 5 for numerical
//! breakdowns.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edpa::{EdpaError, Result};

#[derive(Parser)]
#[command(name = "edpa", version, about = "Embedding-disruption patch attack laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed; overrides any `seed` key in the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    /// key=value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Pin the patch's top-left corner at `Y,X` instead of drawing a
    /// random position per sample.
    #[arg(long, value_name = "Y,X")]
    pub fixed_position: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        /// Dataset spec (key=value); merged under --config.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Jointly pretrain encoders and action head.
    Pretrain {
        /// Dataset directories; samples are concatenated.
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        data: Vec<PathBuf>,
        /// Held-out dataset used to calibrate the failure threshold.
        #[arg(long)]
        calibrate: Option<PathBuf>,
        /// Clean failure rate the threshold is calibrated to.
        #[arg(long, default_value_t = 0.1)]
        target_fr: f64,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log (default: <out>.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Optimise a universal patch against a checkpoint.
    Attack {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Final patch (EDT1 plus JSON sidecar).
        #[arg(long)]
        out: PathBuf,
        /// Snapshot directory (default: <out>.trajectory).
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// JSON-lines attack log (default: <out>.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Adversarially fine-tune the visual encoder of a checkpoint.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Fine-tuned checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log (default: <out>.log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Failure rates under clean, random-patch and optimised-patch conditions.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Optimised patch; enables the `edpa` condition.
        #[arg(long)]
        patch: Option<PathBuf>,
        /// Conditions to run (default: clean, random, and edpa with --patch).
        #[arg(long, value_delimiter = ',')]
        conditions: Vec<String>,
        /// Evaluation seeds (default: --seed or 0).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Metrics file: `.jsonl` for JSON lines, anything else for CSV.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a patch on its source setup and on another dataset or model.
    Transfer {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Target dataset (default: --data).
        #[arg(long)]
        target_data: Option<PathBuf>,
        /// Target checkpoint (default: --ckpt).
        #[arg(long)]
        target_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep patch size or loss weighting.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
        /// Patch training data.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation data.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sweep values (default: the standard grid for --kind).
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Seeds per point (default: --seed or 0).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Patch/token cosine heatmaps for one sample.
    Heatmap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        patch: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AblationKind {
    Size,
    Alpha1,
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("EDPA_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(EdpaError::Config(format!(
                "EDPA_THREADS={v:?}: expected a positive integer"
            ))),
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    edpa::parallel::init_threads(threads_from_env()?);
    use Command::*;
    match cli.command {
        GenData { spec, out, common } => commands::gen_data(&common, spec.as_deref(), &out),
        Pretrain {
            data,
            calibrate,
            target_fr,
            out,
            log,
            common,
        } => commands::pretrain(&common, &data, calibrate.as_deref(), target_fr, &out, log),
        Attack {
            data,
            ckpt,
            out,
            trajectory,
            log,
            common,
        } => commands::attack(&common, &data, &ckpt, &out, trajectory, log),
        Finetune {
            data,
            ckpt,
            out,
            log,
            common,
        } => commands::finetune(&common, &data, &ckpt, &out, log),
        Eval {
            data,
            ckpt,
            patch,
            conditions,
            seeds,
            out,
            common,
        } => commands::eval(&common, &data, &ckpt, patch.as_deref(), &conditions, &seeds, &out),
        Transfer {
            patch,
            data,
            ckpt,
            target_data,
            target_ckpt,
            out,
            common,
        } => commands::transfer(
            &common,
            &patch,
            (&data, &ckpt),
            (
                target_data.as_deref().unwrap_or(&data),
                target_ckpt.as_deref().unwrap_or(&ckpt),
            ),
            &out,
        ),
        Ablate {
            kind,
            data,
            test,
            ckpt,
            values,
            seeds,
            out,
            common,
        } => commands::ablate(&common, kind, &data, &test, &ckpt, &values, &seeds, &out),
        Heatmap {
            data,
            ckpt,
            index,
            patch,
            out,
            common,
        } => commands::heatmap(&common, &data, &ckpt, index, patch.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edpa: error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
