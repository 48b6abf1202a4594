//! Dual attention fusion of the two deepest encoder stages, and position
//! attention that gates the shallow stage.
//!
//! **Fusion.** Both stages are projected to `D` channels with 1×1 convs and
//! the deeper one is resized onto the shallower grid. Two identical branches
//! (global average pool, 1×1 conv, sigmoid) read the resized deep features
//! and produce one channel weight vector for each input; the fused map is
//! `α_low ⊙ X_low + α_high ⊙ X_high`. Scaling channel `c` by `α_c` scales
//! every difference between two positions on that channel by the same
//! factor, which is what lets the weights sharpen or flatten a channel.
//!
//! **Position attention.** The shallow stage is projected to `D` channels,
//! concatenated with the (resized) fused context and scored by
//! conv3×3 → ReLU → conv3×3 → sigmoid into a one-channel confidence map
//! `β`; the output is `β ⊙ X_spatial` broadcast over channels.
//!
//! [`AttentionHooks`] force α or β to constants. With both forced to one
//! the modules reduce to plain summation and pass-through.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::nn;
use crate::params::{ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Constants substituted for learned attention values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionHooks {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl AttentionHooks {
    pub const NONE: AttentionHooks = AttentionHooks {
        alpha: None,
        beta: None,
    };

    /// α = β = 1: the summation baseline.
    pub fn unit() -> Self {
        AttentionHooks {
            alpha: Some(1.0),
            beta: Some(1.0),
        }
    }

    /// β = 1 only: fusion attention without position attention.
    pub fn unit_beta() -> Self {
        AttentionHooks {
            alpha: None,
            beta: Some(1.0),
        }
    }
}

/// `sigmoid(conv1×1(gap(features)))`, one weight per channel and sample.
pub fn channel_weights(s: &mut Session<'_, '_>, features: Var, branch: &Conv) -> Result<Var> {
    let [_, d, _, _] = s.tape.value(features).dims4("channel_weights")?;
    if branch.in_channels != d {
        return Err(Error::shape(
            "channel_weights",
            format!(
                "features have {} channels, branch expects {}",
                d, branch.in_channels
            ),
        ));
    }
    let pooled = nn::global_avg_pool(s.tape, features)?;
    let logits = branch.forward(s, pooled)?;
    s.tape.sigmoid(logits)
}

#[derive(Clone, Debug)]
pub struct Dafm {
    pub proj_low: Conv,
    pub proj_high: Conv,
    /// `(low, high)` weight branches; absent in the summation baseline.
    pub branches: Option<(Conv, Conv)>,
}

#[derive(Clone, Copy, Debug)]
pub struct DafmOutput {
    pub fused: Var,
    pub low: Var,
    pub high: Var,
    /// `N×D×1×1`
    pub alpha_low: Var,
    pub alpha_high: Var,
}

impl Dafm {
    pub fn new(low_channels: usize, high_channels: usize, dim: usize, attention: bool) -> Self {
        Dafm {
            proj_low: Conv::new("dafm.proj_low", low_channels, dim, 1).with_bias(),
            proj_high: Conv::new("dafm.proj_high", high_channels, dim, 1).with_bias(),
            branches: attention.then(|| {
                (
                    Conv::new("dafm.branch_low", dim, dim, 1).with_bias(),
                    Conv::new("dafm.branch_high", dim, dim, 1).with_bias(),
                )
            }),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.proj_low.init(store, seed)?;
        self.proj_high.init(store, seed)?;
        if let Some((low, high)) = &self.branches {
            low.init(store, seed)?;
            high.init(store, seed)?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        s: &mut Session<'_, '_>,
        low: Var,
        high: Var,
        hooks: AttentionHooks,
    ) -> Result<DafmOutput> {
        let [n, _, lh, lw] = s.tape.value(low).dims4("dafm_forward")?;
        let [_, _, hh, hw] = s.tape.value(high).dims4("dafm_forward")?;
        if hh * 2 != lh || hw * 2 != lw {
            return Err(Error::shape(
                "dafm_forward",
                format!(
                    "high-level map {}×{} is not half of low-level {}×{}",
                    hh, hw, lh, lw
                ),
            ));
        }
        let x_low = self.proj_low.forward(s, low)?;
        let projected = self.proj_high.forward(s, high)?;
        let x_high = nn::bilinear_resize(s.tape, projected, lh, lw)?;
        let dim = self.proj_low.out_channels;

        let (alpha_low, alpha_high) = match (hooks.alpha, &self.branches) {
            (Some(v), _) => {
                let a = s.tape.constant(Tensor::full([n, dim, 1, 1], v));
                (a, a)
            }
            (None, Some((bl, bh))) => (
                channel_weights(s, x_high, bl)?,
                channel_weights(s, x_high, bh)?,
            ),
            (None, None) => {
                let a = s.tape.constant(Tensor::ones([n, dim, 1, 1]));
                (a, a)
            }
        };
        let fused = if self.branches.is_none() && hooks.alpha.is_none() {
            s.tape.add(x_low, x_high)?
        } else {
            let wl = s.tape.mul(alpha_low, x_low)?;
            let wh = s.tape.mul(alpha_high, x_high)?;
            s.tape.add(wl, wh)?
        };
        Ok(DafmOutput {
            fused,
            low: x_low,
            high: x_high,
            alpha_low,
            alpha_high,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Pam {
    pub proj_spatial: Conv,
    /// Two-layer scoring network; absent in the summation baseline.
    pub score: Option<(Conv, Conv)>,
}

#[derive(Clone, Copy, Debug)]
pub struct PamOutput {
    pub weighted: Var,
    /// Projected spatial features before gating.
    pub spatial: Var,
    /// `N×1×H×W`
    pub beta: Var,
}

impl Pam {
    pub fn new(spatial_channels: usize, dim: usize, attention: bool) -> Self {
        let hidden = (dim / 2).max(1);
        Pam {
            proj_spatial: Conv::new("pam.proj_spatial", spatial_channels, dim, 1).with_bias(),
            score: attention.then(|| {
                (
                    Conv::new("pam.score1", 2 * dim, hidden, 3).with_bias(),
                    Conv::new("pam.score2", hidden, 1, 3).with_bias(),
                )
            }),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.proj_spatial.init(store, seed)?;
        if let Some((a, b)) = &self.score {
            a.init(store, seed)?;
            b.init(store, seed)?;
        }
        Ok(())
    }

    /// `context` must already be at the spatial map's resolution.
    pub fn forward(
        &self,
        s: &mut Session<'_, '_>,
        spatial: Var,
        context: Var,
        hooks: AttentionHooks,
    ) -> Result<PamOutput> {
        let [n, _, h, w] = s.tape.value(spatial).dims4("pam2d_forward")?;
        let [cn, _, ch, cw] = s.tape.value(context).dims4("pam2d_forward")?;
        if (cn, ch, cw) != (n, h, w) {
            return Err(Error::shape(
                "pam2d_forward",
                format!("context {}×{} does not match spatial {}×{}", ch, cw, h, w),
            ));
        }
        let x_spatial = self.proj_spatial.forward(s, spatial)?;
        let beta = match (hooks.beta, &self.score) {
            (Some(v), _) => s.tape.constant(Tensor::full([n, 1, h, w], v)),
            (None, Some((first, second))) => {
                let joined = nn::concat_channels(s.tape, x_spatial, context)?;
                let hidden = first.forward(s, joined)?;
                let hidden = s.tape.relu(hidden)?;
                let score = second.forward(s, hidden)?;
                s.tape.sigmoid(score)?
            }
            (None, None) => s.tape.constant(Tensor::ones([n, 1, h, w])),
        };
        let weighted = if self.score.is_none() && hooks.beta.is_none() {
            x_spatial
        } else {
            s.tape.mul(beta, x_spatial)?
        };
        Ok(PamOutput {
            weighted,
            spatial: x_spatial,
            beta,
        })
    }
}

/// Attention values captured from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `N×D`
    pub alpha_low: Tensor,
    /// `N×D`
    pub alpha_high: Tensor,
    /// `N×1×H×W` at stride 4.
    pub beta: Tensor,
    /// Projected spatial features `N×D×H×W` that β gates.
    pub spatial: Tensor,
}

impl AttentionRecord {
    pub fn capture(s: &Session<'_, '_>, dafm: &DafmOutput, pam: &PamOutput) -> Result<Self> {
        let flat = |v: Var| -> Result<Tensor> {
            let t = s.tape.value(v);
            let [n, d, _, _] = t.dims4("attention record")?;
            t.clone().reshape([n, d])
        };
        Ok(AttentionRecord {
            alpha_low: flat(dafm.alpha_low)?,
            alpha_high: flat(dafm.alpha_high)?,
            beta: s.tape.value(pam.beta).clone(),
            spatial: s.tape.value(pam.spatial).clone(),
        })
    }

    pub fn batch(&self) -> usize {
        self.alpha_low.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.alpha_low.shape()[1]
    }
}
