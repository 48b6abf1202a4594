//! Optimization: schedule, optimizer, augmentation, the training loop and
//! checkpoint files.

pub mod augment;
pub mod checkpoint;
pub mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::attention::AttentionHooks;
use crate::backbone::OUTPUT_STRIDE;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::layers;
use crate::network::{joint_loss, DfDamModel, LossWeights};
use crate::params::{Mode, ParamStore, Session};
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub use augment::AugmentConfig;
pub use checkpoint::Checkpoint;
pub use optim::{poly_lr, Sgd};

/// Blend factor for running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    pub lr_power: f64,
    pub crop_size: usize,
    pub scale_set: Vec<f64>,
    /// Per-channel mean removed from inputs; `None` uses the training-set mean.
    pub mean_rgb: Option<[f64; 3]>,
    pub flip: bool,
    pub seed: u64,
    pub loss: LossWeights,
    /// Iterations between checkpoints; `None` means `max_iter / 10`.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            initial_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_iter: 2000,
            lr_power: 0.9,
            crop_size: 64,
            scale_set: vec![0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
            mean_rgb: None,
            flip: true,
            seed: 0,
            loss: LossWeights::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iter == 0 {
            return fail("max_iter must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.crop_size == 0 || self.crop_size % OUTPUT_STRIDE != 0 {
            return Err(Error::Config(format!(
                "crop_size must be a positive multiple of {}, got {}",
                OUTPUT_STRIDE, self.crop_size
            )));
        }
        if self.scale_set.is_empty() || self.scale_set.iter().any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return fail("scale_set must be non-empty with positive entries");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.initial_lr >= 0.0 && self.weight_decay >= 0.0 && self.lr_power >= 0.0) {
            return fail("learning rate, weight decay and power must be non-negative");
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be positive");
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        poly_lr(self.initial_lr, self.lr_power, iter, self.max_iter)
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or(self.max_iter / 10).max(1)
    }
}

/// Loss values of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub principal: f64,
    pub context: f64,
    pub spatial: f64,
    pub joint: f64,
}

pub const TRAJECTORY_HEADER: &str = "iter,lr,L_p,L_c,L_s,joint";

/// Comma-separated trajectory with a header row.
pub fn trajectory_csv(records: &[IterRecord]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iter, r.lr, r.principal, r.context, r.spatial, r.joint
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trajectory: Vec<IterRecord>,
    pub optimizer: Sgd,
    pub mean_rgb: [f64; 3],
}

/// Average color over all pixels of all images.
pub fn dataset_mean(samples: &[Sample]) -> Result<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for s in samples {
        let plane = s.image.numel() / 3;
        for (c, chunk) in s.image.data().chunks(plane).enumerate() {
            sum[c] += chunk.iter().sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return Err(Error::contract("cannot take the mean of an empty dataset"));
    }
    Ok(sum.map(|v| v / count as f64))
}

/// Endless reshuffled pass over sample indices.
struct Sampler {
    order: Vec<usize>,
    next: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Sampler {
            order: (0..n).collect(),
            next: n,
        }
    }

    fn take(&mut self, rng: &mut rng::Rng) -> usize {
        if self.next == self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

/// Runs `cfg.max_iter` SGD iterations on `params` in place.
///
/// `on_checkpoint` receives a snapshot every
/// [`TrainConfig::checkpoint_interval`] iterations and after the last one.
pub fn train(
    model: &DfDamModel,
    params: &mut ParamStore,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let classes = model.config.num_classes;
    for s in data {
        s.labels.validate(classes, IGNORE_LABEL)?;
    }
    let mean_rgb = match cfg.mean_rgb {
        Some(m) => m,
        None => dataset_mean(data)?,
    };
    let aug = AugmentConfig {
        scale_set: cfg.scale_set.clone(),
        flip: cfg.flip,
        crop_size: cfg.crop_size,
        mean_rgb,
    };
    let mut rng = rng::stream(cfg.seed, "train");
    let mut sampler = Sampler::new(data.len());
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut trajectory = Vec::with_capacity(cfg.max_iter);
    let interval = cfg.checkpoint_interval();

    for iter in 0..cfg.max_iter {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &data[sampler.take(&mut rng)];
            let (img, lab) = augment::augment(&s.image, &s.labels, &aug, &mut rng)?;
            let c = cfg.crop_size;
            images.push(img.reshape([1, 3, c, c])?);
            labels.push(lab);
        }
        let batch = Tensor::stack(&images)?;
        let labels = LabelMap::stack(&labels)?;
        let lr = cfg.lr_at(iter)?;

        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { iter },
            other => other,
        };
        let mut tape = Tape::new();
        let (record, grads, stats) = {
            let mut s = Session::new(&mut tape, params, Mode::Train);
            let x = s.tape.constant(batch);
            let heads = model
                .forward(&mut s, x, AttentionHooks::NONE)
                .map_err(diverged)?;
            let loss = match joint_loss(s.tape, &heads, &labels, &cfg.loss) {
                Err(Error::Contract(m)) if m.contains("no valid pixels") => {
                    return Err(Error::contract(format!(
                        "iteration {}: every pixel of the batch is ignored",
                        iter
                    )))
                }
                other => other.map_err(diverged)?,
            };
            let joint = s.tape.value(loss.total).data()[0];
            if !joint.is_finite() {
                return Err(Error::Diverged { iter });
            }
            s.tape.backward(loss.total).map_err(diverged)?;
            let record = IterRecord {
                iter,
                lr,
                principal: loss.principal,
                context: loss.context,
                spatial: loss.spatial,
                joint,
            };
            (record, s.gradients(), s.take_stats())
        };
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iter });
        }
        opt.step(params, &grads, lr)?;
        layers::apply_running_stats(params, &stats, NORM_MOMENTUM)?;
        trajectory.push(record);

        let done = iter + 1;
        if done % interval == 0 || done == cfg.max_iter {
            on_checkpoint(&Checkpoint {
                params: params.clone(),
                velocity: opt.velocity.clone(),
                mean_rgb,
                iteration: done as u64,
                seed: cfg.seed,
            })?;
        }
    }
    Ok(TrainOutcome {
        trajectory,
        optimizer: opt,
        mean_rgb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::data::{generate, SynthConfig};
    use crate::network::{build, ModelConfig, Variant};
    use crate::nn::NormMode;

    fn tiny_model(seed: u64) -> (DfDamModel, ParamStore) {
        build(
            ModelConfig {
                num_classes: 4,
                fusion_channels: 8,
                encoder: EncoderConfig {
                    stage_widths: [4, 6, 8, 8],
                    norm: NormMode::Batch,
                    ..EncoderConfig::default()
                },
                variant: Variant::Full,
            },
            seed,
        )
        .unwrap()
    }

    fn samples(n: usize) -> Vec<Sample> {
        generate(&SynthConfig {
            samples: n,
            ..SynthConfig::default()
        })
        .unwrap()
        .into_iter()
        .map(|s| Sample {
            id: s.id,
            image: s.image,
            labels: s.labels,
        })
        .collect()
    }

    fn quick(max_iter: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_iter,
            scale_set: vec![1.0, 1.25],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            TrainConfig {
                max_iter: 0,
                ..quick(1)
            },
            TrainConfig {
                crop_size: 48,
                ..quick(1)
            },
            TrainConfig {
                scale_set: vec![],
                ..quick(1)
            },
            TrainConfig {
                momentum: 1.0,
                ..quick(1)
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn deterministic_trajectory_and_checkpoints() {
        let data = samples(3);
        let run = || {
            let (model, mut params) = tiny_model(1);
            let mut seen = Vec::new();
            let out = train(&model, &mut params, &data, &quick(4), |ck| {
                seen.push(ck.iteration);
                Ok(())
            })
            .unwrap();
            (trajectory_csv(&out.trajectory), params, seen)
        };
        let (a, pa, seen) = run();
        let (b, pb, _) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(seen, [1, 2, 3, 4]);
        assert_eq!(a.lines().count(), 5);
        assert!(a.starts_with("iter,lr,L_p,L_c,L_s,joint\n0,0.01,"));
    }

    #[test]
    fn running_statistics_move() {
        let data = samples(2);
        let (model, mut params) = tiny_model(2);
        let before = params.get("stem.norm.running_mean").unwrap().clone();
        train(&model, &mut params, &data, &quick(1), |_| Ok(())).unwrap();
        assert_ne!(params.get("stem.norm.running_mean").unwrap(), &before);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let mut data = samples(1);
        data[0].labels.data_mut()[0] = 9;
        let (model, mut params) = tiny_model(3);
        assert!(matches!(
            train(&model, &mut params, &data, &quick(1), |_| Ok(())),
            Err(Error::Label { label: 9, .. })
        ));
    }

    #[test]
    fn sampler_visits_everything_each_pass() {
        let mut s = Sampler::new(5);
        let mut r = rng::seeded(0);
        for _ in 0..3 {
            let mut pass: Vec<usize> = (0..5).map(|_| s.take(&mut r)).collect();
            pass.sort();
            assert_eq!(pass, [0, 1, 2, 3, 4]);
        }
    }
}
