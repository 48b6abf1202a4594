//! Scoring and inspection of trained networks.

pub mod export;
pub mod infer;
pub mod metrics;

use crate::data::Sample;
use crate::error::Result;
use crate::labels::IGNORE_LABEL;
use crate::network::DfDamModel;
use crate::params::ParamStore;

pub use export::export_attention;
pub use infer::{infer_multiscale_flip, multiscale_probabilities, EvalConfig};
pub use metrics::{ConfusionMatrix, MiouReport};

/// Display names: background, then the synthetic shape kinds, then numbered.
pub fn class_names(classes: usize) -> Vec<String> {
    const KNOWN: [&str; 4] = ["background", "rectangle", "disc", "triangle"];
    (0..classes)
        .map(|k| match KNOWN.get(k) {
            Some(name) if classes <= KNOWN.len() => name.to_string(),
            _ => format!("class{}", k),
        })
        .collect()
}

/// Confusion matrix of `samples` under `cfg`.
pub fn evaluate(
    model: &DfDamModel,
    params: &ParamStore,
    samples: &[Sample],
    mean_rgb: [f64; 3],
    cfg: &EvalConfig,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for s in samples {
        let pred = infer_multiscale_flip(model, params, &s.image, mean_rgb, cfg)?;
        cm.accumulate(&pred, &s.labels, IGNORE_LABEL)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionHooks;
    use crate::backbone::EncoderConfig;
    use crate::network::{build, ModelConfig};
    use crate::nn;
    use crate::tensor::Tensor;

    fn model() -> (DfDamModel, ParamStore) {
        build(
            ModelConfig {
                num_classes: 3,
                fusion_channels: 6,
                encoder: EncoderConfig {
                    stage_widths: [4, 4, 6, 8],
                    ..EncoderConfig::default()
                },
                ..ModelConfig::default()
            },
            11,
        )
        .unwrap()
    }

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([3, h, w], |i| ((i * 7919) % 256) as f64)
    }

    #[test]
    fn single_scale_equals_plain_argmax() {
        let (m, p) = model();
        let mean = [100.0, 110.0, 120.0];
        let img = image(64, 64);
        let pred = infer_multiscale_flip(&m, &p, &img, mean, &EvalConfig::single_scale()).unwrap();
        let x = crate::training::augment::subtract_mean(&img, mean)
            .reshape([1, 3, 64, 64])
            .unwrap();
        let (logits, _) = m.predict(&p, &x, AttentionHooks::NONE).unwrap();
        assert_eq!(pred, nn::argmax_channels(&logits).unwrap());
    }

    #[test]
    fn probabilities_stay_normalized_on_odd_sizes() {
        let (m, p) = model();
        let cfg = EvalConfig {
            scales: vec![0.5, 1.0, 1.25],
            flip: true,
        };
        let probs = multiscale_probabilities(&m, &p, &image(40, 52), [128.0; 3], &cfg).unwrap();
        assert_eq!(probs.shape(), &[1, 3, 40, 52]);
        let area = 40 * 52;
        for pix in 0..area {
            let s: f64 = (0..3).map(|k| probs.data()[k * area + pix]).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn symmetric_image_gives_symmetric_average() {
        let (m, p) = model();
        let mut img = image(64, 64);
        for c in 0..3 {
            for y in 0..64 {
                for x in 32..64 {
                    let v = img.data()[(c * 64 + y) * 64 + (63 - x)];
                    img.data_mut()[(c * 64 + y) * 64 + x] = v;
                }
            }
        }
        let cfg = EvalConfig {
            scales: vec![1.0],
            flip: true,
        };
        let probs = multiscale_probabilities(&m, &p, &img, [128.0; 3], &cfg).unwrap();
        let mirrored = nn::flip_horizontal(&probs).unwrap();
        assert!(probs.max_abs_diff(&mirrored) <= 1e-12);
    }

    #[test]
    fn duplicated_scales_keep_argmax() {
        let (m, p) = model();
        let img = image(64, 64);
        let run = |scales: &[f64]| {
            let cfg = EvalConfig {
                scales: scales.to_vec(),
                flip: false,
            };
            infer_multiscale_flip(&m, &p, &img, [128.0; 3], &cfg).unwrap()
        };
        assert_eq!(run(&[1.0]), run(&[1.0, 1.0]));
        assert_eq!(run(&[0.75, 1.0]), run(&[0.75, 1.0, 0.75, 1.0]));
    }

    #[test]
    fn names() {
        assert_eq!(class_names(4)[3], "triangle");
        assert_eq!(class_names(6)[5], "class5");
    }
}
