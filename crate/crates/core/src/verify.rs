//! Self-check battery: gradient checks, reference implementations and
//! structural identities. Each suite reports measured errors against their
//! limits so callers can print or assert them.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::AttentionHooks;
use crate::backbone::EncoderConfig;
use crate::data::codec;
use crate::error::Result;
use crate::evaluation::ConfusionMatrix;
use crate::gradcheck::{gradcheck_at, DEFAULT_STEP};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::network::{
    build, build_baseline, joint_loss, DfDamModel, LossWeights, ModelConfig, Variant,
};
use crate::nn::{self, Conv2dParams, NormMode, NormParams, NORM_EPSILON};
use crate::params::{Mode, ParamKind, ParamStore, Session};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::poly_lr;

/// Largest relative gradient error accepted.
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// One measured quantity and the largest value it may take.
#[derive(Clone, Debug, PartialEq)]
pub struct Measure {
    pub label: String,
    pub observed: f64,
    pub limit: f64,
}

impl Measure {
    pub fn new(label: impl Into<String>, observed: f64, limit: f64) -> Self {
        Measure {
            label: label.into(),
            observed,
            limit,
        }
    }

    pub fn passed(&self) -> bool {
        self.observed <= self.limit
    }
}

#[derive(Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub outcome: Result<Vec<Measure>>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        matches!(&self.outcome, Ok(m) if m.iter().all(Measure::passed))
    }
}

#[cfg(test)]
thread_local! {
    static FAULT: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Corrupts the convolution comparison so the battery must fail.
#[cfg(test)]
pub(crate) fn inject_fault(on: bool) {
    FAULT.with(|f| f.set(on));
}

fn fault() -> bool {
    #[cfg(test)]
    {
        FAULT.with(|f| f.get())
    }
    #[cfg(not(test))]
    {
        false
    }
}

fn sample_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// `sum(out ⊙ r)` for a fixed random `r`, so every output element matters.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn all_indices(t: &Tensor) -> Vec<usize> {
    (0..t.numel()).collect()
}

/// Direct quadruple loop over output positions and kernel taps.
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, c, h, wd] = x.dims4("naive_conv2d")?;
    let [o, _, kh, kw] = w.dims4("naive_conv2d")?;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    for s in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.data_mut()[((s * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Samples one output pixel straight from the half-pixel formula.
pub fn bilinear_reference(
    x: &Tensor,
    plane: usize,
    out_h: usize,
    out_w: usize,
    oy: usize,
    ox: usize,
) -> f64 {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let src = |d: usize, inn: usize, out: usize| {
        ((d as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64)
    };
    let (sy, sx) = (src(oy, h, out_h), src(ox, w, out_w));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, xx: usize| x.data()[plane * h * w + y * w + xx];
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x1) * (1.0 - fy) * fx
        + at(y1, x0) * fy * (1.0 - fx)
        + at(y1, x1) * fy * fx
}

fn conv_value(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let weight = tape.constant(w.clone());
    let bias = b.map(|b| tape.constant(b.clone()));
    let y = nn::conv2d(
        &mut tape,
        xv,
        &Conv2dParams {
            weight,
            bias,
            stride,
            padding: pad,
        },
    )?;
    Ok(tape.value(y).clone())
}

/// Im2col convolution against [`naive_conv2d`] over every combination of
/// N, C, O ∈ {1, 2, 3}, kernel ∈ {1, 3}, stride ∈ {1, 2}, padding ∈ {0, 1}.
pub fn conv_oracle(seed: u64) -> Result<Vec<Measure>> {
    let mut rng = rng::stream(seed, "conv_oracle");
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=3 {
        for c in 1..=3 {
            for o in 1..=3 {
                for k in [1, 3] {
                    for stride in [1, 2] {
                        for pad in [0, 1] {
                            let h = rng.random_range(k.max(2)..=7);
                            let w = rng.random_range(k.max(2)..=7);
                            let x = normal([n, c, h, w], &mut rng);
                            let wt = normal([o, c, k, k], &mut rng);
                            let b = normal([o], &mut rng);
                            let bias = rng.random_bool(0.5).then_some(&b);
                            let mut fast = conv_value(&x, &wt, bias, stride, pad)?;
                            if fault() {
                                fast.data_mut()[0] += 1e-6;
                            }
                            let slow = naive_conv2d(&x, &wt, bias, stride, pad)?;
                            worst = worst.max(fast.max_abs_diff(&slow));
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(vec![Measure::new(
        format!("conv2d vs naive loop ({cases} cases)"),
        worst,
        1e-12,
    )])
}

/// Fixed bilinear cell, random comparisons against [`bilinear_reference`],
/// and the min/max bound.
pub fn resize_oracle(seed: u64) -> Result<Vec<Measure>> {
    let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0])?;
    let up = nn::resize_values(&x, 4, 4)?;
    let cell = (up.data()[4 + 1] - 0.75).abs();

    let mut rng = rng::stream(seed, "resize_oracle");
    let mut worst: f64 = 0.0;
    let mut escape: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let (oh, ow) = (rng.random_range(1..12), rng.random_range(1..12));
        let x = normal([1, 2, h, w], &mut rng);
        let y = nn::resize_values(&x, oh, ow)?;
        let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for plane in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = y.data()[(plane * oh + oy) * ow + ox];
                    worst = worst.max((v - bilinear_reference(&x, plane, oh, ow, oy, ox)).abs());
                    escape = escape.max(lo - v).max(v - hi);
                }
            }
        }
    }
    Ok(vec![
        Measure::new("bilinear out[1][1] for [[0,1],[2,3]] doubled", cell, 1e-12),
        Measure::new("bilinear vs direct formula", worst, 1e-12),
        Measure::new("bilinear output outside input range", escape, 0.0),
    ])
}

/// Uniform logits give `ln K`; per-pixel logit gradients sum to zero.
pub fn softmax_ce_oracle(seed: u64) -> Result<Vec<Measure>> {
    let mut uniform: f64 = 0.0;
    for k in 2..=6 {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::full([2, k, 3, 3], 0.37));
        let labels = LabelMap::new(2, 3, 3, (0..18).map(|i| (i % k) as u8).collect())?;
        let loss = nn::softmax_ce_loss(&mut tape, logits, &labels, IGNORE_LABEL)?;
        uniform = uniform.max((tape.value(loss).data()[0] - (k as f64).ln()).abs());
    }
    let mut rng = rng::stream(seed, "softmax_ce_oracle");
    let mut sum_err: f64 = 0.0;
    let mut negative: f64 = 0.0;
    for _ in 0..10 {
        let (k, h, w) = (4, 3, 5);
        let mut tape = Tape::new();
        let x = tape.leaf(normal([2, k, h, w], &mut rng).map(|v| 3.0 * v), true);
        let labels = random_labels(2, h, w, k, &mut rng)?;
        let loss = nn::softmax_ce_loss(&mut tape, x, &labels, IGNORE_LABEL)?;
        negative = negative.max(-tape.value(loss).data()[0]);
        tape.backward(loss)?;
        let g = tape.grad(x).expect("leaf gradient");
        for s in 0..2 {
            for pix in 0..h * w {
                let total: f64 = (0..k).map(|j| g.data()[(s * k + j) * h * w + pix]).sum();
                sum_err = sum_err.max(total.abs());
            }
        }
    }
    Ok(vec![
        Measure::new("softmax-CE of uniform logits vs ln K", uniform, 1e-12),
        Measure::new("per-pixel logit gradient sum", sum_err, 1e-12),
        Measure::new("negative loss", negative, 0.0),
    ])
}

fn random_labels(n: usize, h: usize, w: usize, k: usize, rng: &mut Rng) -> Result<LabelMap> {
    let mut data: Vec<u8> = (0..n * h * w)
        .map(|_| rng.random_range(0..k) as u8)
        .collect();
    data[0] = IGNORE_LABEL;
    data[1] = 0;
    LabelMap::new(n, h, w, data)
}

type OpCase = (&'static str, Box<dyn Fn(&mut Rng) -> Result<f64>>);

/// Relative error of every differentiable operation over `seeds` random
/// inputs each.
pub fn op_gradchecks(seeds: u64) -> Result<Vec<Measure>> {
    let h = DEFAULT_STEP;
    let cases: Vec<OpCase> = vec![
        (
            "add (broadcast)",
            Box::new(move |rng| {
                let (a, b, r) = (
                    normal([2, 3, 4], rng),
                    normal([1, 3, 1], rng),
                    normal([2, 3, 4], rng),
                );
                let fa = gradcheck_at(
                    |t, x| {
                        let bv = t.constant(b.clone());
                        let y = t.add(x, bv)?;
                        weighted_sum(t, y, &r)
                    },
                    &a,
                    h,
                    &all_indices(&a),
                )?;
                let fb = gradcheck_at(
                    |t, x| {
                        let av = t.constant(a.clone());
                        let y = t.add(av, x)?;
                        weighted_sum(t, y, &r)
                    },
                    &b,
                    h,
                    &all_indices(&b),
                )?;
                Ok(fa.max_rel_error.max(fb.max_rel_error))
            }),
        ),
        (
            "mul (broadcast)",
            Box::new(move |rng| {
                let (a, b, r) = (
                    normal([2, 3, 4], rng),
                    normal([2, 1, 4], rng),
                    normal([2, 3, 4], rng),
                );
                let fa = gradcheck_at(
                    |t, x| {
                        let bv = t.constant(b.clone());
                        let y = t.mul(x, bv)?;
                        weighted_sum(t, y, &r)
                    },
                    &a,
                    h,
                    &all_indices(&a),
                )?;
                let fb = gradcheck_at(
                    |t, x| {
                        let av = t.constant(a.clone());
                        let y = t.mul(av, x)?;
                        weighted_sum(t, y, &r)
                    },
                    &b,
                    h,
                    &all_indices(&b),
                )?;
                Ok(fa.max_rel_error.max(fb.max_rel_error))
            }),
        ),
        (
            "sigmoid",
            Box::new(move |rng| {
                let (x, r) = (normal([3, 5], rng).map(|v| 3.0 * v), normal([3, 5], rng));
                let rep = gradcheck_at(
                    |t, x| {
                        let y = t.sigmoid(x)?;
                        weighted_sum(t, y, &r)
                    },
                    &x,
                    h,
                    &all_indices(&x),
                )?;
                Ok(rep.max_rel_error)
            }),
        ),
        (
            "relu",
            Box::new(move |rng| {
                let (x, r) = (normal([3, 5], rng), normal([3, 5], rng));
                let rep = gradcheck_at(
                    |t, x| {
                        let y = t.relu(x)?;
                        weighted_sum(t, y, &r)
                    },
                    &x,
                    h,
                    &all_indices(&x),
                )?;
                Ok(rep.max_rel_error)
            }),
        ),
        ("conv2d", Box::new(move |rng| conv_gradcheck(rng, h))),
        (
            "max_pool2d",
            Box::new(move |rng| {
                let (x, r) = (normal([2, 2, 4, 6], rng), normal([2, 2, 2, 3], rng));
                let rep = gradcheck_at(
                    |t, x| {
                        let y = nn::max_pool2d(t, x, 2, 2)?;
                        weighted_sum(t, y, &r)
                    },
                    &x,
                    h,
                    &all_indices(&x),
                )?;
                Ok(rep.max_rel_error)
            }),
        ),
        (
            "global_avg_pool",
            Box::new(move |rng| {
                let (x, r) = (normal([2, 3, 3, 4], rng), normal([2, 3, 1, 1], rng));
                let rep = gradcheck_at(
                    |t, x| {
                        let y = nn::global_avg_pool(t, x)?;
                        weighted_sum(t, y, &r)
                    },
                    &x,
                    h,
                    &all_indices(&x),
                )?;
                Ok(rep.max_rel_error)
            }),
        ),
        (
            "bilinear_resize",
            Box::new(move |rng| {
                let (oh, ow) = (rng.random_range(1..9), rng.random_range(1..9));
                let (x, r) = (normal([1, 2, 3, 4], rng), normal([1, 2, oh, ow], rng));
                let rep = gradcheck_at(
                    |t, x| {
                        let y = nn::bilinear_resize(t, x, oh, ow)?;
                        weighted_sum(t, y, &r)
                    },
                    &x,
                    h,
                    &all_indices(&x),
                )?;
                Ok(rep.max_rel_error)
            }),
        ),
        (
            "normalize",
            Box::new(move |rng| normalize_gradcheck(rng, h)),
        ),
        (
            "concat_channels",
            Box::new(move |rng| {
                let (a, b, r) = (
                    normal([2, 2, 3, 3], rng),
                    normal([2, 3, 3, 3], rng),
                    normal([2, 5, 3, 3], rng),
                );
                let rep = gradcheck_at(
                    |t, x| {
                        let bv = t.constant(b.clone());
                        let y = nn::concat_channels(t, x, bv)?;
                        weighted_sum(t, y, &r)
                    },
                    &a,
                    h,
                    &all_indices(&a),
                )?;
                Ok(rep.max_rel_error)
            }),
        ),
        (
            "softmax_ce_loss",
            Box::new(move |rng| {
                let x = normal([2, 4, 3, 3], rng).map(|v| 2.0 * v);
                let labels = random_labels(2, 3, 3, 4, rng)?;
                let rep = gradcheck_at(
                    |t, x| nn::softmax_ce_loss(t, x, &labels, IGNORE_LABEL),
                    &x,
                    h,
                    &all_indices(&x),
                )?;
                Ok(rep.max_rel_error)
            }),
        ),
    ];
    let mut out = Vec::new();
    for (name, case) in cases {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = rng::stream(seed, name);
            worst = worst.max(case(&mut rng)?);
        }
        out.push(Measure::new(
            format!("gradcheck {name}"),
            worst,
            GRAD_TOLERANCE,
        ));
    }
    Ok(out)
}

fn conv_gradcheck(rng: &mut Rng, h: f64) -> Result<f64> {
    let stride = rng.random_range(1..=2);
    let x = normal([2, 2, 5, 5], rng);
    let w = normal([3, 2, 3, 3], rng);
    let b = normal([3], rng);
    let oh = (5 + 2 - 3) / stride + 1;
    let r = normal([2, 3, oh, oh], rng);
    let run = |t: &mut Tape, xs: [Var; 3]| -> Result<Var> {
        let y = nn::conv2d(
            t,
            xs[0],
            &Conv2dParams {
                weight: xs[1],
                bias: Some(xs[2]),
                stride,
                padding: 1,
            },
        )?;
        weighted_sum(t, y, &r)
    };
    let inputs = [&x, &w, &b];
    let mut worst: f64 = 0.0;
    for slot in 0..3 {
        let rep = gradcheck_at(
            |t, v| {
                let xs: [Var; 3] = std::array::from_fn(|i| {
                    if i == slot {
                        v
                    } else {
                        t.constant(inputs[i].clone())
                    }
                });
                run(t, xs)
            },
            inputs[slot],
            h,
            &all_indices(inputs[slot]),
        )?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(worst)
}

fn normalize_gradcheck(rng: &mut Rng, h: f64) -> Result<f64> {
    let x = normal([3, 2, 2, 3], rng);
    let scale = normal([2], rng).map(|v| 1.0 + 0.3 * v);
    let shift = normal([2], rng);
    let r = normal([3, 2, 2, 3], rng);
    let inputs = [&x, &scale, &shift];
    let mut worst: f64 = 0.0;
    for mode in [NormMode::Batch, NormMode::Disabled] {
        for slot in 0..3 {
            let rep = gradcheck_at(
                |t, v| {
                    let xs: [Var; 3] = std::array::from_fn(|i| {
                        if i == slot {
                            v
                        } else {
                            t.constant(inputs[i].clone())
                        }
                    });
                    let (y, _) = nn::normalize(
                        t,
                        xs[0],
                        &NormParams {
                            scale: xs[1],
                            shift: xs[2],
                            mode,
                            epsilon: NORM_EPSILON,
                            running: None,
                        },
                        true,
                    )?;
                    weighted_sum(t, y, &r)
                },
                inputs[slot],
                h,
                &all_indices(inputs[slot]),
            )?;
            worst = worst.max(rep.max_rel_error);
        }
    }
    Ok(worst)
}

/// Small network configuration used by the structural checks.
pub fn small_config(variant: Variant, norm: NormMode) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        fusion_channels: 6,
        encoder: EncoderConfig {
            stage_widths: [4, 6, 8, 10],
            norm,
            ..EncoderConfig::default()
        },
        variant,
    }
}

/// Replaces every learnable tensor with random values so no branch is
/// silenced by its initialization (zero scales, zero biases).
pub fn randomize(store: &mut ParamStore, seed: u64) {
    for (name, t) in store.iter_mut() {
        let mut rng = rng::stream(seed, name);
        let fan = t.shape().iter().skip(1).product::<usize>().max(1) as f64;
        match ParamKind::from_name(name) {
            Some(ParamKind::ConvWeight) => {
                for v in t.data_mut() {
                    *v = sample_normal(&mut rng) * (2.0 / fan).sqrt();
                }
            }
            Some(ParamKind::NormScale) => {
                for v in t.data_mut() {
                    *v = 1.0 + 0.2 * sample_normal(&mut rng);
                }
            }
            Some(ParamKind::Bias | ParamKind::NormShift) => {
                for v in t.data_mut() {
                    *v = 0.1 * sample_normal(&mut rng);
                }
            }
            _ => {}
        }
    }
}

/// A `32×32` random image zero-padded to `64×64`, with matching labels that
/// ignore the padding.
pub fn padded_gradcheck_input(rng: &mut Rng, classes: usize) -> Result<(Tensor, LabelMap)> {
    let small = normal([1, 3, 32, 32], rng);
    let mut image = Tensor::zeros([1, 3, 64, 64]);
    let mut labels = vec![IGNORE_LABEL; 64 * 64];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                image.data_mut()[(c * 64 + y) * 64 + x] = small.data()[(c * 32 + y) * 32 + x];
            }
        }
    }
    for y in 0..32 {
        for x in 0..32 {
            labels[y * 64 + x] = rng.random_range(0..classes) as u8;
        }
    }
    Ok((image, LabelMap::new(1, 64, 64, labels)?))
}

/// Joint loss of a network as a function of one named parameter (or the
/// input image when `name` is `None`).
pub fn network_loss<'a>(
    model: &'a DfDamModel,
    params: &'a ParamStore,
    image: &'a Tensor,
    labels: &'a LabelMap,
    name: Option<&'a str>,
) -> impl Fn(&mut Tape, Var) -> Result<Var> + 'a {
    move |tape, v| {
        let mut s = Session::new(tape, params, Mode::Eval);
        let x = match name {
            Some(name) => {
                s.bind(name, v)?;
                s.tape.constant(image.clone())
            }
            None => v,
        };
        let heads = model.forward(&mut s, x, AttentionHooks::NONE)?;
        Ok(joint_loss(s.tape, &heads, labels, &LossWeights::default())?.total)
    }
}

/// Gradient check of the joint loss through the whole network (norm
/// disabled) with respect to the input and `per_tensor` sampled coordinates
/// of every parameter tensor, for each seed.
pub fn network_gradcheck(seeds: u64, per_tensor: usize) -> Result<Vec<Measure>> {
    let (model, base) = build(small_config(Variant::Full, NormMode::Disabled), 0)?;
    let mut worst_input: f64 = 0.0;
    let mut worst_param: f64 = 0.0;
    let mut worst_name = String::new();
    let mut probes = 0;
    for seed in 0..seeds {
        let mut params = base.clone();
        randomize(&mut params, seed);
        let mut rng = rng::stream(seed, "network_gradcheck");
        let (image, labels) = padded_gradcheck_input(&mut rng, model.config.num_classes)?;
        let pick = |rng: &mut Rng, n: usize| -> Vec<usize> {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let idx = pick(&mut rng, 3 * 32 * 32)
            .into_iter()
            .map(|i| (i / 1024) * 4096 + (i % 1024 / 32) * 64 + i % 32)
            .collect::<Vec<_>>();
        let rep = gradcheck_at(
            network_loss(&model, &params, &image, &labels, None),
            &image,
            DEFAULT_STEP,
            &idx,
        )?;
        worst_input = worst_input.max(rep.max_rel_error);
        probes += rep.checked;
        let names: Vec<String> = params
            .names()
            .filter(|n| ParamKind::from_name(n).is_some_and(ParamKind::learnable))
            .map(str::to_string)
            .collect();
        for name in &names {
            let value = params.require(name)?.clone();
            let idx = pick(&mut rng, value.numel());
            let rep = gradcheck_at(
                network_loss(&model, &params, &image, &labels, Some(name)),
                &value,
                DEFAULT_STEP,
                &idx,
            )?;
            if rep.max_rel_error > worst_param {
                worst_param = rep.max_rel_error;
                worst_name = name.clone();
            }
            probes += rep.checked;
        }
    }
    Ok(vec![
        Measure::new(format!("network joint loss w.r.t. input ({seeds} seeds)"), worst_input, GRAD_TOLERANCE),
        Measure::new(
            format!("network joint loss w.r.t. parameters ({probes} probes total, worst `{worst_name}`)"),
            worst_param,
            GRAD_TOLERANCE,
        ),
    ])
}

/// Full network with unit attention hooks and zeroed attention branches
/// against the summation baseline sharing its other parameters.
pub fn baseline_reduction(inputs: u64) -> Result<Vec<Measure>> {
    let (full, mut fp) = build(small_config(Variant::Full, NormMode::Batch), 3)?;
    let (base, bp) = build_baseline(small_config(Variant::Full, NormMode::Batch), 3)?;
    for (name, t) in fp.iter_mut() {
        if name.starts_with("dafm.branch_") || name.starts_with("pam.score") {
            t.data_mut().fill(0.0);
        }
    }
    let mut worst: f64 = 0.0;
    let mut shared: f64 = 0.0;
    for (name, t) in bp.iter() {
        shared = shared.max(t.max_abs_diff(fp.require(name)?));
    }
    for i in 0..inputs {
        let mut rng = rng::stream(i, "baseline_reduction");
        let x = normal([2, 3, 64, 64], &mut rng);
        let (a, _) = full.predict(&fp, &x, AttentionHooks::unit())?;
        let (b, _) = base.predict(&bp, &x, AttentionHooks::NONE)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(vec![
        Measure::new("shared parameters identical", shared, 0.0),
        Measure::new(
            format!("unit-hook network vs baseline ({inputs} inputs)"),
            worst,
            1e-12,
        ),
    ])
}

/// Gated output equals `β·X` elementwise, and attention values stay
/// strictly inside (0, 1).
pub fn position_gating(forwards: u64) -> Result<Vec<Measure>> {
    let (model, mut params) = build(small_config(Variant::Full, NormMode::Batch), 5)?;
    let mut exact: f64 = 0.0;
    let mut outside = 0usize;
    for i in 0..forwards {
        if i % 10 == 0 {
            randomize(&mut params, i);
            for (name, t) in params.iter_mut() {
                if name.starts_with("dafm.branch_") || name.starts_with("pam.score") {
                    for v in t.data_mut() {
                        *v *= 4.0;
                    }
                }
            }
        }
        let mut rng = rng::stream(i, "position_gating");
        let x = normal([1, 3, 64, 64], &mut rng).map(|v| v * 2.0);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &params, Mode::Eval);
        let xv = s.tape.constant(x);
        let taps = model.encoder.encode(&mut s, xv)?;
        let dafm = model
            .dafm
            .forward(&mut s, taps.s3, taps.s4, AttentionHooks::NONE)?;
        let [_, _, h, w] = s.tape.value(taps.s1).dims4("position_gating")?;
        let ctx = nn::bilinear_resize(s.tape, dafm.fused, h, w)?;
        let pam = model
            .pam
            .forward(&mut s, taps.s1, ctx, AttentionHooks::NONE)?;
        let (beta, spatial, weighted) = (
            s.tape.value(pam.beta),
            s.tape.value(pam.spatial),
            s.tape.value(pam.weighted),
        );
        let d = spatial.shape()[1];
        for c in 0..d {
            for p in 0..h * w {
                let expect = beta.data()[p] * spatial.data()[c * h * w + p];
                exact = exact.max((weighted.data()[c * h * w + p] - expect).abs());
            }
        }
        for t in [
            beta,
            s.tape.value(dafm.alpha_low),
            s.tape.value(dafm.alpha_high),
        ] {
            outside += t.data().iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
        }
    }
    Ok(vec![
        Measure::new("gated features vs beta times features", exact, 1e-15),
        Measure::new(
            format!("attention values outside (0, 1) over {forwards} forwards"),
            outside as f64,
            0.0,
        ),
    ])
}

pub fn codec_round_trips(seed: u64) -> Result<Vec<Measure>> {
    let mut rng = rng::stream(seed, "codecs");
    let mut mismatches = 0usize;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let img = Tensor::from_fn([3, h, w], |_| f64::from(rng.random::<u8>()));
        let bytes = codec::encode_ppm(&img)?;
        let back = codec::decode_ppm(&bytes)?;
        mismatches += usize::from(back != img || codec::encode_ppm(&back)? != bytes);
        let labels = LabelMap::single(h, w, (0..h * w).map(|_| rng.random()).collect())?;
        mismatches += usize::from(codec::decode_pgm(&codec::encode_pgm(&labels)?)? != labels);
    }
    Ok(vec![Measure::new(
        "PPM/PGM round-trip mismatches",
        mismatches as f64,
        0.0,
    )])
}

pub fn arithmetic_checks() -> Result<Vec<Measure>> {
    let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2])?;
    let lw = LossWeights::default();
    let zero = LossWeights {
        lambda_s: 0.0,
        lambda_c: 0.0,
    };
    let mid = poly_lr(0.01, 0.9, 500, 1000)?;
    Ok(vec![
        Measure::new(
            "mIoU of [[1,1],[0,2]] vs 7/12",
            (cm.miou()?.mean - 7.0 / 12.0).abs(),
            1e-12,
        ),
        Measure::new(
            "joint loss (1, 2, 3) vs 2.1",
            (lw.combine(1.0, 2.0, 3.0) - 2.1).abs(),
            1e-15,
        ),
        Measure::new(
            "joint loss with zero weights vs principal",
            (zero.combine(1.7, 2.0, 3.0) - 1.7).abs(),
            0.0,
        ),
        Measure::new(
            "poly lr at 0 vs initial",
            (poly_lr(0.01, 0.9, 0, 1000)? - 0.01).abs(),
            0.0,
        ),
        Measure::new("poly lr at end", poly_lr(0.01, 0.9, 1000, 1000)?.abs(), 0.0),
        Measure::new(
            "poly lr midpoint vs 0.00535887",
            (mid - 0.00535887).abs(),
            1e-8,
        ),
        Measure::new(
            "poly lr midpoint vs direct evaluation",
            (mid - 0.01 * 0.5f64.powf(0.9)).abs(),
            1e-15,
        ),
    ])
}

/// Runs every suite in order.
pub fn run_all() -> Vec<SuiteReport> {
    vec![
        SuiteReport {
            name: "operator gradients",
            outcome: op_gradchecks(10),
        },
        SuiteReport {
            name: "network gradients",
            outcome: network_gradcheck(10, 2),
        },
        SuiteReport {
            name: "convolution oracle",
            outcome: conv_oracle(0),
        },
        SuiteReport {
            name: "resize oracle",
            outcome: resize_oracle(0),
        },
        SuiteReport {
            name: "softmax cross-entropy",
            outcome: softmax_ce_oracle(0),
        },
        SuiteReport {
            name: "baseline reduction",
            outcome: baseline_reduction(5),
        },
        SuiteReport {
            name: "position gating",
            outcome: position_gating(100),
        },
        SuiteReport {
            name: "codecs",
            outcome: codec_round_trips(0),
        },
        SuiteReport {
            name: "arithmetic",
            outcome: arithmetic_checks(),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_conv_hand_example() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(naive_conv2d(&x, &w, None, 1, 0).unwrap().data(), &[5.0]);
    }

    #[test]
    fn fast_suites_pass() {
        for outcome in [
            conv_oracle(1),
            resize_oracle(1),
            softmax_ce_oracle(1),
            codec_round_trips(1),
            arithmetic_checks(),
        ] {
            for m in outcome.unwrap() {
                assert!(m.passed(), "{:?}", m);
            }
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        inject_fault(true);
        let measures = conv_oracle(0).unwrap();
        inject_fault(false);
        assert!(!measures[0].passed());
        assert!(conv_oracle(0).unwrap()[0].passed());
    }
}
