//! `reid`: synthetic data, augmentation, training, evaluation and gradient
//! checks for the occlusion-robust re-identification model.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "reid", version, about = "Occluded person re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by commands that build a `TrainConfig`.
/// Precedence: preset < config file < `--set` < `--seed`.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Built-in defaults to start from (toy or vit_base).
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Flat key=value config file.
    #[arg(long, env = "REID_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lambda=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in the train/query/gallery layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        imgs_per_id: usize,
        #[arg(long, default_value_t = 4)]
        cams: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Put every identity in train and draw query/gallery from the same
        /// identities (2 queries per identity).
        #[arg(long)]
        held_in: bool,
    },
    /// Augment every image of a directory and record the masks applied.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// mask, strong, normal, random_erasing, cutout or hide_and_seek.
        #[arg(long, default_value = "mask")]
        pipeline: String,
        /// Target masked fraction for the mask and strong pipelines.
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 128)]
        max_height: usize,
        #[arg(long, default_value_t = 128)]
        max_width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on `<data>/train`; writes config, log and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to `runs/<UTC timestamp>-seed<seed>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Train and evaluate every setting of a sweep (lambda or patch_proj).
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Score a checkpoint on `<data>/query` against `<data>/gallery`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; defaults to `eval.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Feature used for retrieval (concat or global).
        #[arg(long)]
        feature: Option<String>,
    },
    /// Finite-difference check of every loss gradient at the toy config.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Two blocks and fewer probes; for smoke tests.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth {
            out,
            ids,
            imgs_per_id,
            cams,
            seed,
            height,
            width,
            held_in,
        } => commands::synth(&out, ids, imgs_per_id, cams, seed, (height, width), held_in),
        Command::Augment {
            input,
            out,
            pipeline,
            ratio,
            max_height,
            max_width,
            seed,
        } => commands::augment(&input, &out, &pipeline, ratio, (max_height, max_width), seed),
        Command::Train {
            data,
            config,
            run_dir,
            sweep,
        } => commands::train(&data, &config, run_dir, sweep.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            feature,
        } => commands::eval(&checkpoint, &data, out, feature.as_deref()),
        Command::Gradcheck { seed, quick } => commands::gradcheck(seed, quick),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
