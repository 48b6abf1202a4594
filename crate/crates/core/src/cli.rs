//! The `dfdam` command-line tool.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attention::AttentionHooks;
use crate::config::RunConfig;
use crate::data::{self, codec};
use crate::error::Result;
use crate::evaluation::infer::forward_padded;
use crate::evaluation::{
    class_names, evaluate, export_attention, infer_multiscale_flip, EvalConfig,
};
use crate::fsio;
use crate::network::{DfDamModel, Variant};
use crate::training::augment::subtract_mean;
use crate::training::{train, trajectory_csv, Checkpoint};
use crate::verify;

/// Exit status when `verify` finds a failing suite.
pub const VERIFY_FAILED: i32 = 1;

/// Spatial feature channels exported by `predict --attn`.
const EXPORTED_CHANNELS: usize = 4;

#[derive(Debug, Parser)]
#[command(
    name = "dfdam",
    version,
    about = "Dual-attention segmentation network: data, training, evaluation and checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset (images, labels, manifest).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write its checkpoint and loss trajectory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace both attention modules with plain summation.
        #[arg(long)]
        baseline: bool,
    },
    /// Score a checkpoint on a dataset and print per-class IoU.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated inference scales (default 1.0).
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Also average horizontally mirrored predictions.
        #[arg(long)]
        flip: bool,
    },
    /// Segment one image; optionally export its attention values.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        attn: Option<PathBuf>,
    },
    /// Run gradient checks, reference comparisons and identities.
    Verify,
}

/// Loss trajectory path written next to a checkpoint.
pub fn trajectory_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn load_model(path: &Path) -> Result<(DfDamModel, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let model = DfDamModel::from_params(&ck.params)?;
    Ok((model, ck))
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData { config, out: dir } => {
            let cfg = RunConfig::load(&config)?;
            let samples = data::generate_to_dir(&cfg.synth, &dir)?;
            let _ = writeln!(out, "wrote {} samples to {}", samples.len(), dir.display());
        }
        Command::Train {
            config,
            data: dir,
            out: ckpt,
            baseline,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if baseline {
                cfg.model.variant = Variant::Baseline;
            }
            let samples = data::load_dataset(&dir)?;
            let model = DfDamModel::new(cfg.model.clone())?;
            let mut params = model.init(cfg.train.seed)?;
            let outcome = train(&model, &mut params, &samples, &cfg.train, |ck| {
                ck.save(&ckpt)
            })?;
            let csv = trajectory_path(&ckpt);
            fsio::write_atomic(&csv, trajectory_csv(&outcome.trajectory).as_bytes())?;
            let last = outcome.trajectory.last().expect("max_iter is at least 1");
            let _ = writeln!(
                out,
                "{} model, {} iterations, final joint loss {:.6}\ncheckpoint {}\ntrajectory {}",
                model.config.variant,
                outcome.trajectory.len(),
                last.joint,
                ckpt.display(),
                csv.display()
            );
        }
        Command::Eval {
            ckpt,
            data: dir,
            scales,
            flip,
        } => {
            let (model, ck) = load_model(&ckpt)?;
            let cfg = EvalConfig {
                scales: scales.unwrap_or_else(|| EvalConfig::single_scale().scales),
                flip,
            };
            cfg.validate()?;
            let samples = data::load_dataset(&dir)?;
            let cm = evaluate(&model, &ck.params, &samples, ck.mean_rgb, &cfg)?;
            let report = cm.miou()?;
            let _ = write!(
                out,
                "{}",
                report.render(&class_names(model.config.num_classes))
            );
        }
        Command::Predict {
            ckpt,
            image,
            out: mask,
            attn,
        } => {
            let (model, ck) = load_model(&ckpt)?;
            let img = codec::decode_ppm(&fsio::read(&image)?)?;
            let pred = infer_multiscale_flip(
                &model,
                &ck.params,
                &img,
                ck.mean_rgb,
                &EvalConfig::single_scale(),
            )?;
            fsio::write_atomic(&mask, &codec::encode_pgm(&pred)?)?;
            let _ = writeln!(out, "mask {}", mask.display());
            if let Some(dir) = attn {
                let (h, w) = (img.shape()[1], img.shape()[2]);
                let centered = subtract_mean(&img, ck.mean_rgb).reshape([1, 3, h, w])?;
                let (_, record) =
                    forward_padded(&model, &ck.params, &centered, AttentionHooks::NONE)?;
                let channels: Vec<usize> = (0..record.channels().min(EXPORTED_CHANNELS)).collect();
                for path in export_attention(&record, 0, &dir, &channels)? {
                    let _ = writeln!(out, "attention {}", path.display());
                }
            }
        }
        Command::Verify => {
            let mut failed = false;
            for suite in verify::run_all() {
                let status = if suite.passed() { "PASS" } else { "FAIL" };
                let _ = writeln!(out, "{status} {}", suite.name);
                match &suite.outcome {
                    Ok(measures) => {
                        for m in measures {
                            let mark = if m.passed() { "ok" } else { "FAILED" };
                            let _ = writeln!(
                                out,
                                "    {mark:6} {}: {:.3e} (limit {:.1e})",
                                m.label, m.observed, m.limit
                            );
                        }
                    }
                    Err(e) => {
                        let _ = writeln!(out, "    error: {e}");
                    }
                }
                failed |= !suite.passed();
            }
            if failed {
                return Ok(VERIFY_FAILED);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_captured(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn verify_passes_then_fails_under_fault() {
        let (code, out, _) = run_captured(&["dfdam", "verify"]);
        assert_eq!(code, 0, "{out}");
        assert!(!out.contains("FAIL"));
        verify::inject_fault(true);
        let (code, out, _) = run_captured(&["dfdam", "verify"]);
        verify::inject_fault(false);
        assert_eq!(code, VERIFY_FAILED);
        assert!(out.contains("FAIL convolution oracle"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_captured(&["dfdam", "frobnicate"]).0, 2);
        assert_eq!(run_captured(&["dfdam", "eval", "--ckpt", "x"]).0, 2);
        assert_eq!(run_captured(&["dfdam", "--help"]).0, 0);
    }

    #[test]
    fn trajectory_sits_next_to_checkpoint() {
        assert_eq!(
            trajectory_path(Path::new("runs/a.ckpt")),
            Path::new("runs/a.loss.csv")
        );
        assert_eq!(
            trajectory_path(Path::new("model")),
            Path::new("model.loss.csv")
        );
    }
}
