//! The assembled segmentation network and its joint loss.
//!
//! ```text
//! image ─ encoder ─┬─ s4 ─┐
//!                  ├─ s3 ─┴─ fusion attention ── context (stride 16)
//!                  │                                 │ resize to stride 4
//!                  └─ s1 ──────── position attention ┤
//!                                                    + ── refine ── head ── resize ── principal logits
//! ```
//!
//! Two auxiliary 1×1 classifiers read the context and the gated spatial
//! features; all three logit maps are resized to the input resolution so a
//! single label map supervises them.

use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionHooks, AttentionRecord, Dafm, Pam};
use crate::backbone::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::layers::{Conv, Norm};
use crate::nn::{self, NormMode};
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};

/// Which attention modules the network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Fusion attention and position attention.
    Full,
    /// Fusion attention only; spatial features pass through ungated, which
    /// matches the full network under a unit-β hook.
    FusionOnly,
    /// Plain summation in place of both modules.
    Baseline,
}

impl Variant {
    fn fusion_attention(self) -> bool {
        self != Variant::Baseline
    }

    fn position_attention(self) -> bool {
        self == Variant::Full
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "fusion-only" => Ok(Variant::FusionOnly),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Config(format!(
                "unknown variant `{}` (expected full, fusion-only or baseline)",
                other
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::FusionOnly => "fusion-only",
            Variant::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Width `D` of the fused feature space.
    pub fusion_channels: usize,
    pub encoder: EncoderConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            fusion_channels: 128,
            encoder: EncoderConfig::default(),
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if usize::from(IGNORE_LABEL) < self.num_classes {
            return Err(Error::Config(format!(
                "num_classes must stay below the ignore label {}",
                IGNORE_LABEL
            )));
        }
        if self.fusion_channels == 0 {
            return Err(Error::Config("fusion_channels must be positive".into()));
        }
        self.encoder.validate()
    }
}

/// Auxiliary loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 0.1,
            lambda_c: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s >= 0.0 && self.lambda_c >= 0.0)
            || !self.lambda_s.is_finite()
            || !self.lambda_c.is_finite()
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `principal + λ_c·context + λ_s·spatial`.
    pub fn combine(&self, principal: f64, context: f64, spatial: f64) -> f64 {
        principal + self.lambda_c * context + self.lambda_s * spatial
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Heads {
    /// Principal logits `N×K×H×W`.
    pub principal: Var,
    /// Context auxiliary logits `N×K×H×W`.
    pub context: Var,
    /// Spatial auxiliary logits `N×K×H×W`.
    pub spatial: Var,
    /// Sum of gated spatial features and upsampled context, stride 4.
    pub fused: Var,
    /// Fused context resized to stride 4.
    pub context_up: Var,
    pub record: AttentionRecord,
}

#[derive(Clone, Debug)]
pub struct DfDamModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub dafm: Dafm,
    pub pam: Pam,
    refine: [(Conv, Norm); 2],
    pub head: Conv,
    pub aux_context: Conv,
    pub aux_spatial: Conv,
}

impl DfDamModel {
    /// Layer layout for `config`, without parameter values.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let w = config.encoder.stage_widths;
        let d = config.fusion_channels;
        let k = config.num_classes;
        let mode = config.encoder.norm;
        let refine = [1, 2].map(|i| {
            (
                Conv::new(format!("refine.conv{i}"), d, d, 3),
                Norm::new(format!("refine.norm{i}"), d, mode),
            )
        });
        Ok(DfDamModel {
            dafm: Dafm::new(w[2], w[3], d, config.variant.fusion_attention()),
            pam: Pam::new(w[0], d, config.variant.position_attention()),
            refine,
            head: Conv::new("head", d, k, 1).with_bias(),
            aux_context: Conv::new("aux_c", d, k, 1).with_bias(),
            aux_spatial: Conv::new("aux_s", d, k, 1).with_bias(),
            encoder,
            config,
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, seed)?;
        self.dafm.init(&mut store, seed)?;
        self.pam.init(&mut store, seed)?;
        for (conv, norm) in &self.refine {
            conv.init(&mut store, seed)?;
            norm.init(&mut store)?;
        }
        for conv in [&self.head, &self.aux_context, &self.aux_spatial] {
            conv.init(&mut store, seed)?;
        }
        Ok(store)
    }

    /// Recovers the layout from a parameter store and checks that every
    /// expected tensor is present with the right shape and nothing else is.
    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let dims = |name: &str| -> Result<Vec<usize>> { Ok(store.require(name)?.shape().to_vec()) };
        let head = dims("head.weight")?;
        let stem = dims("stem.conv.weight")?;
        if head.len() != 4 || stem.len() != 4 {
            return Err(Error::contract("head and stem weights must be rank 4"));
        }
        let mut widths = [0; 4];
        let mut blocks = [0; 4];
        for i in 0..4 {
            widths[i] = dims(&format!("stage{}.block0.conv1.weight", i + 1))?[0];
            blocks[i] = (0..)
                .take_while(|j| store.contains(&format!("stage{}.block{}.conv1.weight", i + 1, j)))
                .count();
        }
        let norm = if store.contains("stem.norm.running_mean") {
            NormMode::Batch
        } else {
            NormMode::Disabled
        };
        let variant = match (
            store.contains("dafm.branch_low.weight"),
            store.contains("pam.score1.weight"),
        ) {
            (true, true) => Variant::Full,
            (true, false) => Variant::FusionOnly,
            (false, false) => Variant::Baseline,
            (false, true) => {
                return Err(Error::contract(
                    "position scoring present without fusion branches",
                ))
            }
        };
        let model = DfDamModel::new(ModelConfig {
            num_classes: head[0],
            fusion_channels: head[1],
            encoder: EncoderConfig {
                stage_widths: widths,
                blocks_per_stage: blocks,
                input_channels: stem[1],
                norm,
            },
            variant,
        })?;
        let expected = model.init(0)?;
        if expected.len() != store.len() {
            let extra = store.names().find(|n| !expected.contains(n)).unwrap_or("?");
            return Err(Error::contract(format!("unexpected parameter `{}`", extra)));
        }
        for (name, t) in expected.iter() {
            let got = store.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    name,
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(model)
    }

    /// Runs the network on an `N×C×H×W` image batch (mean already removed).
    pub fn forward(
        &self,
        s: &mut Session<'_, '_>,
        image: Var,
        hooks: AttentionHooks,
    ) -> Result<Heads> {
        let [_, _, h, w] = s.tape.value(image).dims4("forward")?;
        let taps = self.encoder.encode(s, image)?;
        let dafm = self.dafm.forward(s, taps.s3, taps.s4, hooks)?;
        let [_, _, sh, sw] = s.tape.value(taps.s1).dims4("forward")?;
        let context_up = nn::bilinear_resize(s.tape, dafm.fused, sh, sw)?;
        let pam = self.pam.forward(s, taps.s1, context_up, hooks)?;
        let fused = s.tape.add(pam.weighted, context_up)?;

        let mut x = fused;
        for (conv, norm) in &self.refine {
            x = conv.forward(s, x)?;
            x = norm.forward(s, x)?;
            x = s.tape.relu(x)?;
        }
        let logits = self.head.forward(s, x)?;
        let principal = nn::bilinear_resize(s.tape, logits, h, w)?;
        let context = self.aux_context.forward(s, dafm.fused)?;
        let context = nn::bilinear_resize(s.tape, context, h, w)?;
        let spatial = self.aux_spatial.forward(s, pam.weighted)?;
        let spatial = nn::bilinear_resize(s.tape, spatial, h, w)?;
        let record = AttentionRecord::capture(s, &dafm, &pam)?;
        Ok(Heads {
            principal,
            context,
            spatial,
            fused,
            context_up,
            record,
        })
    }

    /// Inference-mode principal logits and attention values for `image`.
    pub fn predict(
        &self,
        params: &ParamStore,
        image: &Tensor,
        hooks: AttentionHooks,
    ) -> Result<(Tensor, AttentionRecord)> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, params, Mode::Eval);
        let x = s.tape.constant(image.clone());
        let heads = self.forward(&mut s, x, hooks)?;
        Ok((s.tape.value(heads.principal).clone(), heads.record))
    }
}

/// Builds a network layout and draws its parameters.
pub fn build(config: ModelConfig, seed: u64) -> Result<(DfDamModel, ParamStore)> {
    let model = DfDamModel::new(config)?;
    let store = model.init(seed)?;
    Ok((model, store))
}

/// [`build`] with both attention modules replaced by summation.
pub fn build_baseline(config: ModelConfig, seed: u64) -> Result<(DfDamModel, ParamStore)> {
    build(
        ModelConfig {
            variant: Variant::Baseline,
            ..config
        },
        seed,
    )
}

/// Per-head losses and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub principal: f64,
    pub context: f64,
    pub spatial: f64,
}

pub fn joint_loss(
    tape: &mut Tape,
    heads: &Heads,
    labels: &LabelMap,
    weights: &LossWeights,
) -> Result<JointLoss> {
    let lp = nn::softmax_ce_loss(tape, heads.principal, labels, IGNORE_LABEL)?;
    let lc = nn::softmax_ce_loss(tape, heads.context, labels, IGNORE_LABEL)?;
    let ls = nn::softmax_ce_loss(tape, heads.spatial, labels, IGNORE_LABEL)?;
    let values = [lp, lc, ls].map(|v| tape.value(v).data()[0]);
    let wc = tape.scale(lc, weights.lambda_c)?;
    let ws = tape.scale(ls, weights.lambda_s)?;
    let partial = tape.add(lp, wc)?;
    let total = tape.add(partial, ws)?;
    Ok(JointLoss {
        total,
        principal: values[0],
        context: values[1],
        spatial: values[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant, norm: NormMode) -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            fusion_channels: 6,
            encoder: EncoderConfig {
                stage_widths: [4, 4, 6, 8],
                norm,
                ..EncoderConfig::default()
            },
            variant,
        }
    }

    fn image(n: usize, seed: usize) -> Tensor {
        Tensor::from_fn([n, 3, 64, 64], |i| {
            (((i + seed) * 2654435761) % 1000) as f64 / 500.0 - 1.0
        })
    }

    #[test]
    fn output_shapes() {
        let (model, store) = build(tiny(Variant::Full, NormMode::Batch), 1).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(image(1, 0));
        let heads = model.forward(&mut s, x, AttentionHooks::NONE).unwrap();
        for v in [heads.principal, heads.context, heads.spatial] {
            assert_eq!(s.tape.shape(v), &[1, 3, 64, 64]);
        }
        assert_eq!(heads.record.beta.shape(), &[1, 1, 16, 16]);
        assert_eq!(heads.record.alpha_low.shape(), &[1, 6]);
    }

    #[test]
    fn zero_beta_leaves_context_only() {
        let (model, store) = build(tiny(Variant::Full, NormMode::Batch), 2).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(image(1, 3));
        let hooks = AttentionHooks {
            alpha: None,
            beta: Some(0.0),
        };
        let heads = model.forward(&mut s, x, hooks).unwrap();
        assert_eq!(s.tape.value(heads.fused), s.tape.value(heads.context_up));
    }

    #[test]
    fn inference_is_deterministic() {
        let (model, store) = build(tiny(Variant::Full, NormMode::Batch), 3).unwrap();
        let a = model
            .predict(&store, &image(2, 1), AttentionHooks::NONE)
            .unwrap();
        let b = model
            .predict(&store, &image(2, 1), AttentionHooks::NONE)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_is_smaller_and_same_shape() {
        let (full, fs) = build(tiny(Variant::Full, NormMode::Batch), 4).unwrap();
        let (base, bs) = build_baseline(tiny(Variant::Full, NormMode::Batch), 4).unwrap();
        assert!(bs.learnable_count() < fs.learnable_count());
        assert!(bs.names().all(|n| fs.contains(n)));
        let (a, _) = full
            .predict(&fs, &image(1, 0), AttentionHooks::NONE)
            .unwrap();
        let (b, _) = base
            .predict(&bs, &image(1, 0), AttentionHooks::NONE)
            .unwrap();
        assert_eq!(a.shape(), b.shape());
    }

    #[test]
    fn fusion_only_matches_unit_beta_hook() {
        let (full, fs) = build(tiny(Variant::Full, NormMode::Batch), 5).unwrap();
        let (fo, os) = build(tiny(Variant::FusionOnly, NormMode::Batch), 5).unwrap();
        let (a, _) = full
            .predict(&fs, &image(1, 2), AttentionHooks::unit_beta())
            .unwrap();
        let (b, rec) = fo.predict(&os, &image(1, 2), AttentionHooks::NONE).unwrap();
        assert_eq!(a, b);
        assert!(rec.beta.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn layout_recovered_from_parameters() {
        for variant in [Variant::Full, Variant::FusionOnly, Variant::Baseline] {
            for norm in [NormMode::Batch, NormMode::Disabled] {
                let cfg = tiny(variant, norm);
                let (_, store) = build(cfg.clone(), 6).unwrap();
                assert_eq!(DfDamModel::from_params(&store).unwrap().config, cfg);
            }
        }
        let (_, mut store) = build(tiny(Variant::Full, NormMode::Batch), 6).unwrap();
        store.insert("extra.bias", Tensor::zeros([1])).unwrap();
        assert!(DfDamModel::from_params(&store).is_err());
    }

    #[test]
    fn loss_weights_arithmetic() {
        let w = LossWeights::default();
        assert!((w.combine(1.0, 2.0, 3.0) - 2.1).abs() <= 1e-15);
        let zero = LossWeights {
            lambda_s: 0.0,
            lambda_c: 0.0,
        };
        assert_eq!(zero.combine(1.25, 7.0, 9.0), 1.25);
    }

    #[test]
    fn joint_loss_matches_combined_terms() {
        let (model, store) = build(tiny(Variant::Full, NormMode::Disabled), 7).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(image(1, 5));
        let heads = model.forward(&mut s, x, AttentionHooks::NONE).unwrap();
        let labels =
            LabelMap::new(1, 64, 64, (0..64 * 64).map(|i| (i % 3) as u8).collect()).unwrap();
        let w = LossWeights::default();
        let loss = joint_loss(s.tape, &heads, &labels, &w).unwrap();
        let total = s.tape.value(loss.total).data()[0];
        assert!((total - w.combine(loss.principal, loss.context, loss.spatial)).abs() <= 1e-14);
        let heavier = LossWeights { lambda_c: 0.8, ..w };
        assert!(heavier.combine(loss.principal, loss.context, loss.spatial) > total);
    }
}
