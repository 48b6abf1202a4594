//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and listed in [`KEYS`] with its default; unknown or repeated
//! keys are errors. Lists are comma-separated.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::EncoderConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::fsio;
use crate::network::{ModelConfig, Variant};
use crate::nn::NormMode;
use crate::training::TrainConfig;

/// `(key, default, description)`
pub const KEYS: &[(&str, &str, &str)] = &[
    ("num_classes", "4", "classes including background"),
    ("fusion_channels", "128", "width of the fused feature space"),
    ("stage_widths", "32,64,128,256", "encoder stage widths"),
    (
        "blocks_per_stage",
        "1,1,1,1",
        "residual blocks per encoder stage",
    ),
    ("norm", "batch", "batch or disabled"),
    ("variant", "full", "full, fusion-only or baseline"),
    ("lambda_s", "0.1", "weight of the spatial auxiliary loss"),
    ("lambda_c", "0.4", "weight of the context auxiliary loss"),
    ("batch_size", "4", "images per iteration"),
    ("initial_lr", "0.01", "learning rate at iteration 0"),
    ("lr_power", "0.9", "exponent of the poly schedule"),
    ("momentum", "0.9", "SGD momentum"),
    (
        "weight_decay",
        "0.0005",
        "L2 penalty on convolution weights",
    ),
    ("max_iter", "2000", "training iterations"),
    ("crop_size", "64", "square training crop, multiple of 32"),
    (
        "scale_set",
        "0.75,1.0,1.25,1.5,1.75,2.0",
        "random rescale factors",
    ),
    (
        "mean_rgb",
        "auto",
        "three values, or auto for the training-set mean",
    ),
    ("flip", "true", "random horizontal flips while training"),
    (
        "checkpoint_every",
        "auto",
        "iterations between checkpoints, auto is max_iter/10",
    ),
    (
        "seed",
        "0",
        "seed for initialization, sampling and data generation",
    ),
    ("image_size", "64", "generated image side, multiple of 32"),
    ("samples", "32", "generated images"),
    ("min_shapes", "2", "fewest shapes per generated image"),
    ("max_shapes", "4", "most shapes per generated image"),
    (
        "noise_std",
        "6.0",
        "Gaussian pixel noise of generated images",
    ),
    ("eval_scales", "1.0", "inference scales"),
    ("eval_flip", "false", "also average mirrored predictions"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults parse")
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{}` has invalid value `{}`", key, raw)))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|v| value(key, v.trim())).collect()
}

fn array4(key: &str, raw: &str) -> Result<[usize; 4]> {
    list::<usize>(key, raw)?
        .try_into()
        .map_err(|_| Error::Config(format!("`{}` needs exactly 4 values", key)))
}

/// Accepts `true/false`, `yes/no`, `1/0`.
fn boolean(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{}` expects true or false, got `{}`",
            key, raw
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = KEYS
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            let slot = pairs
                .iter_mut()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::Config(format!("line {}: unknown key `{}`", i + 1, key)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: `{}` given twice",
                    i + 1,
                    key
                )));
            }
            slot.1 = raw.trim().to_string();
        }
        let get =
            |key: &str| -> &str { &pairs.iter().find(|(k, _)| k == key).expect("known key").1 };

        let num_classes: usize = value("num_classes", get("num_classes"))?;
        let seed: u64 = value("seed", get("seed"))?;
        let model = ModelConfig {
            num_classes,
            fusion_channels: value("fusion_channels", get("fusion_channels"))?,
            encoder: EncoderConfig {
                stage_widths: array4("stage_widths", get("stage_widths"))?,
                blocks_per_stage: array4("blocks_per_stage", get("blocks_per_stage"))?,
                input_channels: 3,
                norm: NormMode::from_str(get("norm"))
                    .map_err(|_| Error::Config(format!("unknown norm `{}`", get("norm"))))?,
            },
            variant: Variant::from_str(get("variant"))?,
        };
        let mean_rgb = match get("mean_rgb") {
            "auto" => None,
            raw => Some(
                list::<f64>("mean_rgb", raw)?
                    .try_into()
                    .map_err(|_| Error::Config("`mean_rgb` needs exactly 3 values".into()))?,
            ),
        };
        let checkpoint_every = match get("checkpoint_every") {
            "auto" => None,
            raw => Some(value("checkpoint_every", raw)?),
        };
        let train = TrainConfig {
            batch_size: value("batch_size", get("batch_size"))?,
            initial_lr: value("initial_lr", get("initial_lr"))?,
            momentum: value("momentum", get("momentum"))?,
            weight_decay: value("weight_decay", get("weight_decay"))?,
            max_iter: value("max_iter", get("max_iter"))?,
            lr_power: value("lr_power", get("lr_power"))?,
            crop_size: value("crop_size", get("crop_size"))?,
            scale_set: list("scale_set", get("scale_set"))?,
            mean_rgb,
            flip: boolean("flip", get("flip"))?,
            seed,
            loss: crate::network::LossWeights {
                lambda_s: value("lambda_s", get("lambda_s"))?,
                lambda_c: value("lambda_c", get("lambda_c"))?,
            },
            checkpoint_every,
        };
        let synth = SynthConfig {
            num_classes,
            image_size: value("image_size", get("image_size"))?,
            samples: value("samples", get("samples"))?,
            min_shapes: value("min_shapes", get("min_shapes"))?,
            max_shapes: value("max_shapes", get("max_shapes"))?,
            noise_std: value("noise_std", get("noise_std"))?,
            seed,
        };
        let eval = EvalConfig {
            scales: list("eval_scales", get("eval_scales"))?,
            flip: boolean("eval_flip", get("eval_flip"))?,
        };
        Ok(RunConfig {
            model,
            train,
            synth,
            eval,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsio::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its default, as a commented config file.
    pub fn documented_defaults() -> String {
        let mut out = String::new();
        for (key, default, doc) in KEYS {
            let _ = writeln!(out, "# {}\n{} = {}", doc, key, default);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_component_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.synth, SynthConfig::default());
        assert_eq!(cfg.eval, EvalConfig::single_scale());
        assert_eq!(cfg.train.loss.lambda_s, 0.1);
        assert_eq!(cfg.train.loss.lambda_c, 0.4);
    }

    #[test]
    fn documented_defaults_round_trip() {
        assert_eq!(
            RunConfig::parse(&RunConfig::documented_defaults()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let default = std::fs::read_to_string(dir.join("default.cfg")).unwrap();
        assert_eq!(default, RunConfig::documented_defaults());
        for name in ["overfit.cfg", "smoke.cfg"] {
            RunConfig::load(&dir.join(name)).unwrap();
        }
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# tiny\nmax_iter = 5\n\nmean_rgb = 1, 2, 3\nnorm=disabled\nflip = no\n",
        )
        .unwrap();
        assert_eq!(cfg.train.max_iter, 5);
        assert_eq!(cfg.train.mean_rgb, Some([1.0, 2.0, 3.0]));
        assert_eq!(cfg.model.encoder.norm, NormMode::Disabled);
        assert!(!cfg.train.flip);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        assert!(RunConfig::parse("colour = red")
            .unwrap_err()
            .to_string()
            .contains("unknown key"));
        assert!(RunConfig::parse("seed = 1\nseed = 2")
            .unwrap_err()
            .to_string()
            .contains("twice"));
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("stage_widths = 1,2,3").is_err());
        assert!(RunConfig::parse("max_iter = -1").is_err());
    }
}
