//! Subcommands and their exit-code contract: 0 success, 2 configuration or
//! container error, 3 data error, 4 numeric failure, 5 gradient check
//! failure, 1 other I/O.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lsskd_core::autodiff::BackwardFault;
use lsskd_core::gradcheck::loss_suite;
use lsskd_core::train::{evaluate, Objective};

use crate::checkpoint::Checkpoint;
use crate::config::ConfigFile;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::run::{run_training, RunOptions};
use crate::synth::{write_dataset, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "lsskd", version, about = "Teacher-free layered self-supervised distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a student network; writes metrics, checkpoints and the prediction store under out.dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint (its directory must hold the matching store).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Class-stratified fraction of the training set to keep.
        #[arg(long)]
        subset_fraction: Option<f64>,
        #[command(flatten)]
        seed: SeedArg,
        /// Hard-label cross-entropy on the final head only.
        #[arg(long)]
        baseline: bool,
        /// Stop after this epoch; resume later with --resume.
        #[arg(long)]
        stop_after: Option<u32>,
        /// Write 0 for wall time so repeated runs give identical metrics files.
        #[arg(long)]
        no_wall_clock: bool,
    },
    /// Evaluate the final head of a full or stripped checkpoint on the test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Remove the auxiliary branches (and optimizer state) from a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Finite-difference check of every loss term on a small 64-bit network.
    Gradcheck {
        /// Only its seed is used; the toy network is fixed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        /// Scales the convolution weight gradient; a negative control.
        #[arg(long, hide = true)]
        fault_conv_scale: Option<f64>,
    },
    /// Write the procedural glyph dataset as IDX files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(path: &std::path::Path, seed: &SeedArg) -> CliResult<ConfigFile> {
    let mut cfg = ConfigFile::from_file(path)?;
    if let Some(s) = seed.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_data(cfg: &ConfigFile) -> CliResult<dataset::Dataset> {
    let norm = cfg.normalization().map_err(CliError::Data)?;
    dataset::load(&cfg.dataset_name, &cfg.dataset_dir, &norm)
}

/// Runs one command, writing results to `out` and diagnostics to `err`.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let wr = |e: std::io::Error| CliError::io("<stdout>", e);
    match cli.command {
        Command::Train { config, resume, subset_fraction, seed, baseline, stop_after, no_wall_clock } => {
            let mut cfg = load_config(&config, &seed)?;
            if let Some(f) = subset_fraction {
                cfg.fewshot_fraction = f;
            }
            let data = load_data(&cfg)?;
            let opts = RunOptions {
                objective: if baseline { Objective::Baseline } else { Objective::Lsskd },
                resume,
                stop_after,
                record_wall: !no_wall_clock,
            };
            let outcome = run_training(&cfg, &data, &opts, &mut |line| {
                let _ = writeln!(err, "{line}");
            })?;
            writeln!(out, "wrote {}", outcome.last_checkpoint.display()).map_err(wr)?;
        }
        Command::Eval { checkpoint, config, seed } => {
            let cfg = load_config(&config, &seed)?;
            let ckpt = Checkpoint::read(&checkpoint)?;
            if ckpt.digest != cfg.digest() {
                return Err(CliError::Config {
                    path: config,
                    detail: format!("digest does not match checkpoint {}", checkpoint.display()),
                });
            }
            let data = load_data(&cfg)?;
            let net = ckpt
                .inference::<f32>(cfg.backbone(data.meta.classes, data.meta.image_shape))
                .map_err(|e| CliError::format(&checkpoint, e))?;
            let acc = evaluate(&net, &data.test, cfg.train_batch.max(256))?;
            writeln!(out, "top1={:.2} top5={:.2}", acc.top1, acc.top5).map_err(wr)?;
        }
        Command::Export { checkpoint, out: dest, seed: _ } => {
            let ckpt = Checkpoint::read(&checkpoint)?;
            let stripped = ckpt.strip().map_err(|e| CliError::format(&checkpoint, e))?;
            stripped.write(&dest)?;
            writeln!(out, "parameters before={} after={}", ckpt.parameter_count(), stripped.parameter_count()).map_err(wr)?;
        }
        Command::Gradcheck { config, seed, fault_conv_scale } => {
            let mut s = seed.seed;
            if let Some(path) = config {
                s = s.or(Some(ConfigFile::from_file(&path)?.seed));
            }
            let reports = loss_suite(fault_conv_scale.map(BackwardFault::ConvWeightScale), s.unwrap_or(0))?;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                writeln!(out, "{} max_rel_error={:.3e} coords={} {verdict}", r.term, r.max_rel_error, r.checked).map_err(wr)?;
            }
            if !reports.iter().all(|r| r.passed()) {
                return Err(CliError::Gradcheck);
            }
        }
        Command::Synth { out: dir, classes, side, train, test, seed } => {
            write_dataset(&SynthSpec { classes, side, train, test, seed }, &dir)?;
            writeln!(out, "wrote {train} train and {test} test images to {}", dir.display()).map_err(wr)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
