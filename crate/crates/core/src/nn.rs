//! Differentiable neural operators on `N×C×H×W` tensors.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Backward, Tape, Tensor, Var};

/// `c = alpha·A·B + beta·c` over strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Learned weights and geometry of a 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dParams {
    /// `O×I×kh×kw`
    pub weight: Var,
    /// length `O`
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let spatial = self.spatial();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let spatial = self.spatial();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &g) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d(tape: &mut Tape, x: Var, p: &Conv2dParams) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4("conv2d")?;
    let [o, ci, kh, kw] = tape.value(p.weight).dims4("conv2d")?;
    if ci != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weight expects {}", c, ci),
        ));
    }
    if kh == 0 || kw == 0 || p.stride == 0 {
        return Err(Error::shape(
            "conv2d",
            "kernel dims and stride must be positive",
        ));
    }
    if h + 2 * p.padding < kh || w + 2 * p.padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "{}×{} kernel does not fit {}×{} input with padding {}",
                kh, kw, h, w, p.padding
            ),
        ));
    }
    if let Some(b) = p.bias {
        if tape.shape(b) != [o] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", tape.shape(b), o),
            ));
        }
    }
    let g = ConvGeometry {
        c,
        h,
        w,
        kh,
        kw,
        stride: p.stride,
        pad: p.padding,
        oh: (h + 2 * p.padding - kh) / p.stride + 1,
        ow: (w + 2 * p.padding - kw) / p.stride + 1,
    };
    let (patch, spatial) = (g.patch(), g.spatial());

    let xs = tape.value(x).data();
    let weight = tape.value(p.weight).data();
    let mut out = vec![0.0; n * o * spatial];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * spatial]
    };
    for s in 0..n {
        let input = &xs[s * c * h * w..(s + 1) * c * h * w];
        let b: &[f64] = if g.pointwise() {
            input
        } else {
            g.im2col(input, &mut cols);
            &cols
        };
        let dst = &mut out[s * o * spatial..(s + 1) * o * spatial];
        gemm(
            o,
            patch,
            spatial,
            weight,
            (patch, 1),
            b,
            (spatial, 1),
            0.0,
            dst,
        );
        if let Some(bias) = p.bias {
            for (row, &bv) in dst.chunks_mut(spatial).zip(tape.value(bias).data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let value = Tensor::new([n, o, g.oh, g.ow], out)?;
    let mut inputs = vec![x, p.weight];
    inputs.extend(p.bias);
    tape.push("conv2d", value, &inputs, ConvBackward { g })
}

struct ConvBackward {
    g: ConvGeometry,
}

impl Backward for ConvBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let g = &self.g;
        let (x, weight) = (inputs[0], inputs[1]);
        let n = x.shape()[0];
        let o = output.shape()[1];
        let (patch, spatial) = (g.patch(), g.spatial());
        let plane = g.c * g.h * g.w;

        let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut dw = needs[1].then(|| vec![0.0; weight.numel()]);
        let mut cols = vec![0.0; patch * spatial];
        let mut dcols = vec![0.0; patch * spatial];
        for s in 0..n {
            let dout = &grad.data()[s * o * spatial..(s + 1) * o * spatial];
            if let Some(dw) = dw.as_mut() {
                let input = &x.data()[s * plane..(s + 1) * plane];
                let b: &[f64] = if g.pointwise() {
                    input
                } else {
                    g.im2col(input, &mut cols);
                    &cols
                };
                // dW += dOut · colsᵀ
                gemm(
                    o,
                    spatial,
                    patch,
                    dout,
                    (spatial, 1),
                    b,
                    (1, spatial),
                    1.0,
                    dw,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[s * plane..(s + 1) * plane];
                // dcols = Wᵀ · dOut
                if g.pointwise() {
                    gemm(
                        patch,
                        o,
                        spatial,
                        weight.data(),
                        (1, patch),
                        dout,
                        (spatial, 1),
                        0.0,
                        dst,
                    );
                } else {
                    gemm(
                        patch,
                        o,
                        spatial,
                        weight.data(),
                        (1, patch),
                        dout,
                        (spatial, 1),
                        0.0,
                        &mut dcols,
                    );
                    g.col2im(&dcols, dst);
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(x.shape(), d).expect("dx shape")),
            dw.map(|d| Tensor::new(weight.shape(), d).expect("dw shape")),
        ];
        if inputs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![0.0; o];
                for (i, chunk) in grad.data().chunks(spatial).enumerate() {
                    db[i % o] += chunk.iter().sum::<f64>();
                }
                Tensor::new([o], db).expect("db shape")
            }));
        }
        grads
    }
}

/// Window maximum. Ties resolve to the first position in row-major order.
pub fn max_pool2d(tape: &mut Tape, x: Var, kernel: usize, stride: usize) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4("max_pool2d")?;
    if kernel == 0 || stride == 0 {
        return Err(Error::shape(
            "max_pool2d",
            "kernel and stride must be positive",
        ));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape(
            "max_pool2d",
            format!("{}×{} window larger than {}×{} input", kernel, kernel, h, w),
        ));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let data = tape.value(x).data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor::new([n, c, oh, ow], out)?;
    tape.push("max_pool2d", value, &[x], MaxPoolBackward { argmax })
}

struct MaxPoolBackward {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (&idx, &g) in self.argmax.iter().zip(grad.data()) {
            dx.data_mut()[idx] += g;
        }
        vec![Some(dx)]
    }
}

/// Spatial mean per channel, `N×C×1×1`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4("global_avg_pool")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let area = (h * w) as f64;
    let means = tape
        .value(x)
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() / area)
        .collect();
    let value = Tensor::new([n, c, 1, 1], means)?;
    tape.push("global_avg_pool", value, &[x], GapBackward)
}

struct GapBackward;

impl Backward for GapBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let area = x.shape()[2] * x.shape()[3];
        let data = grad
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / area as f64, area))
            .collect();
        vec![Some(Tensor::new(x.shape(), data).expect("gap grad"))]
    }
}

/// Per-axis sampling table for half-pixel-centre bilinear resampling.
#[derive(Clone, Debug)]
struct AxisSampler {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisSampler {
    fn new(input: usize, output: usize) -> Self {
        let ratio = input as f64 / output as f64;
        let mut s = AxisSampler {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for d in 0..output {
            let src = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            s.lo.push(lo);
            s.hi.push((lo + 1).min(input - 1));
            s.frac.push(src - lo as f64);
        }
        s
    }
}

/// Interpolation `a + t·(b - a)`, clamped so rounding never leaves `[a, b]`.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resampling with half-pixel centres: output index `d` reads the
/// source coordinate `(d + 0.5)·in/out - 0.5`, clamped to the valid range.
pub fn bilinear_resize(tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let value = resize_values(tape.value(x), out_h, out_w)?;
    let [_, _, h, w] = tape.value(x).dims4("bilinear_resize")?;
    tape.push(
        "bilinear_resize",
        value,
        &[x],
        ResizeBackward {
            rows: AxisSampler::new(h, out_h),
            cols: AxisSampler::new(w, out_w),
        },
    )
}

/// Forward half of [`bilinear_resize`] on plain values.
pub fn resize_values(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("bilinear_resize")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "bilinear_resize",
            format!("cannot resize {}×{} to {}×{}", h, w, out_h, out_w),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows = AxisSampler::new(h, out_h);
    let cols = AxisSampler::new(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for oy in 0..out_h {
            let top = &plane[rows.lo[oy] * w..(rows.lo[oy] + 1) * w];
            let bottom = &plane[rows.hi[oy] * w..(rows.hi[oy] + 1) * w];
            let ty = rows.frac[oy];
            for ox in 0..out_w {
                let (l, r, tx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let upper = lerp(top[l], top[r], tx);
                let lower = lerp(bottom[l], bottom[r], tx);
                out.push(lerp(upper, lower, ty));
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

struct ResizeBackward {
    rows: AxisSampler,
    cols: AxisSampler,
}

impl Backward for ResizeBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (oh, ow) = (output.shape()[2], output.shape()[3]);
        let mut dx = Tensor::zeros(x.shape());
        for (dplane, gplane) in dx
            .data_mut()
            .chunks_mut(h * w)
            .zip(grad.data().chunks(oh * ow))
        {
            for oy in 0..oh {
                let (top, bottom, ty) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.frac[oy]);
                for ox in 0..ow {
                    let (l, r, tx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.frac[ox]);
                    let g = gplane[oy * ow + ox];
                    dplane[top * w + l] += g * (1.0 - ty) * (1.0 - tx);
                    dplane[top * w + r] += g * (1.0 - ty) * tx;
                    dplane[bottom * w + l] += g * ty * (1.0 - tx);
                    dplane[bottom * w + r] += g * ty * tx;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// How a normalization layer standardizes its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Batch statistics while training, running statistics at inference.
    #[default]
    Batch,
    /// Affine scale and shift only.
    Disabled,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormMode::Batch),
            "disabled" => Ok(NormMode::Disabled),
            other => Err(Error::Config(format!(
                "norm mode must be `batch` or `disabled`, got `{}`",
                other
            ))),
        }
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMode::Batch => "batch",
            NormMode::Disabled => "disabled",
        })
    }
}

pub const NORM_EPSILON: f64 = 1e-5;

/// Per-channel normalization parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct NormParams<'a> {
    pub scale: Var,
    pub shift: Var,
    pub mode: NormMode,
    pub epsilon: f64,
    /// Running mean and variance, required for batch mode at inference.
    pub running: Option<(&'a Tensor, &'a Tensor)>,
}

/// Statistics of one training batch, for updating running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased estimate.
    pub var: Vec<f64>,
}

pub fn normalize(
    tape: &mut Tape,
    x: Var,
    p: &NormParams<'_>,
    training: bool,
) -> Result<(Var, Option<BatchStats>)> {
    let [n, c, h, w] = tape.value(x).dims4("normalize")?;
    if tape.shape(p.scale) != [c] || tape.shape(p.shift) != [c] {
        return Err(Error::shape(
            "normalize",
            format!(
                "{} channels but scale {:?} and shift {:?}",
                c,
                tape.shape(p.scale),
                tape.shape(p.shift)
            ),
        ));
    }
    if p.epsilon <= 0.0 {
        return Err(Error::contract("normalize epsilon must be positive"));
    }
    match (p.mode, training) {
        (NormMode::Disabled, _) => {
            let fixed = FixedAffine {
                center: vec![0.0; c],
                inv_std: vec![1.0; c],
            };
            Ok((fixed.apply(tape, x, p)?, None))
        }
        (NormMode::Batch, false) => {
            let (mean, var) = p
                .running
                .ok_or_else(|| Error::contract("batch norm inference needs running statistics"))?;
            if mean.numel() != c || var.numel() != c {
                return Err(Error::shape("normalize", "running statistics length"));
            }
            let fixed = FixedAffine {
                center: mean.data().to_vec(),
                inv_std: var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + p.epsilon).sqrt())
                    .collect(),
            };
            Ok((fixed.apply(tape, x, p)?, None))
        }
        (NormMode::Batch, true) => {
            let count = n * h * w;
            let area = h * w;
            let xs = tape.value(x).data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (i, plane) in xs.chunks(area).enumerate() {
                mean[i % c] += plane.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for (i, plane) in xs.chunks(area).enumerate() {
                let m = mean[i % c];
                var[i % c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            let inv_std: Vec<f64> = var
                .iter()
                .map(|s| 1.0 / (s / count as f64 + p.epsilon).sqrt())
                .collect();
            let scale = tape.value(p.scale).data();
            let shift = tape.value(p.shift).data();
            let mut xhat = Vec::with_capacity(xs.len());
            let mut out = Vec::with_capacity(xs.len());
            for (i, plane) in xs.chunks(area).enumerate() {
                let ch = i % c;
                for &v in plane {
                    let z = (v - mean[ch]) * inv_std[ch];
                    xhat.push(z);
                    out.push(scale[ch] * z + shift[ch]);
                }
            }
            let unbiased = var
                .iter()
                .map(|s| {
                    if count > 1 {
                        s / (count - 1) as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            let value = Tensor::new([n, c, h, w], out)?;
            let y = tape.push(
                "batch_norm",
                value,
                &[x, p.scale, p.shift],
                BatchNormBackward { xhat, inv_std, c },
            )?;
            Ok((
                y,
                Some(BatchStats {
                    mean,
                    var: unbiased,
                }),
            ))
        }
    }
}

/// `y = scale·(x - center)·inv_std + shift` with constant centre and spread.
struct FixedAffine {
    center: Vec<f64>,
    inv_std: Vec<f64>,
}

impl FixedAffine {
    fn apply(self, tape: &mut Tape, x: Var, p: &NormParams<'_>) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4("normalize")?;
        let scale = tape.value(p.scale).data();
        let shift = tape.value(p.shift).data();
        let mut out = Vec::with_capacity(tape.value(x).numel());
        for (i, plane) in tape.value(x).data().chunks(h * w).enumerate() {
            let ch = i % c;
            let a = scale[ch] * self.inv_std[ch];
            out.extend(plane.iter().map(|&v| a * (v - self.center[ch]) + shift[ch]));
        }
        let value = Tensor::new(tape.shape(x), out)?;
        tape.push("channel_affine", value, &[x, p.scale, p.shift], self)
    }
}

impl Backward for FixedAffine {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, scale) = (inputs[0], inputs[1]);
        let c = scale.numel();
        let area = x.shape()[2] * x.shape()[3];
        let mut dx = needs[0].then(|| Vec::with_capacity(x.numel()));
        let mut dscale = vec![0.0; c];
        let mut dshift = vec![0.0; c];
        for (i, (xp, gp)) in x
            .data()
            .chunks(area)
            .zip(grad.data().chunks(area))
            .enumerate()
        {
            let ch = i % c;
            let a = scale.data()[ch] * self.inv_std[ch];
            if let Some(dx) = dx.as_mut() {
                dx.extend(gp.iter().map(|g| g * a));
            }
            for (&v, &g) in xp.iter().zip(gp) {
                dscale[ch] += g * (v - self.center[ch]) * self.inv_std[ch];
                dshift[ch] += g;
            }
        }
        vec![
            dx.map(|d| Tensor::new(x.shape(), d).expect("dx")),
            needs[1].then(|| Tensor::new([c], dscale).expect("dscale")),
            needs[2].then(|| Tensor::new([c], dshift).expect("dshift")),
        ]
    }
}

struct BatchNormBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    c: usize,
}

impl Backward for BatchNormBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, scale) = (inputs[0], inputs[1]);
        let c = self.c;
        let area = x.shape()[2] * x.shape()[3];
        let count = (x.numel() / c) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (i, (gp, zp)) in grad
            .data()
            .chunks(area)
            .zip(self.xhat.chunks(area))
            .enumerate()
        {
            let ch = i % c;
            for (&g, &z) in gp.iter().zip(zp) {
                sum_g[ch] += g;
                sum_gx[ch] += g * z;
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = Vec::with_capacity(x.numel());
            for (i, (gp, zp)) in grad
                .data()
                .chunks(area)
                .zip(self.xhat.chunks(area))
                .enumerate()
            {
                let ch = i % c;
                let k = scale.data()[ch] * self.inv_std[ch] / count;
                dx.extend(
                    gp.iter()
                        .zip(zp)
                        .map(|(&g, &z)| k * (count * g - sum_g[ch] - z * sum_gx[ch])),
                );
            }
            Tensor::new(x.shape(), dx).expect("dx")
        });
        vec![
            dx,
            needs[1].then(|| Tensor::new([c], sum_gx.clone()).expect("dscale")),
            needs[2].then(|| Tensor::new([c], sum_g.clone()).expect("dshift")),
        ]
    }
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let [n, c1, h, w] = tape.value(a).dims4("concat_channels")?;
    let [n2, c2, h2, w2] = tape.value(b).dims4("concat_channels")?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::shape(
            "concat_channels",
            format!(
                "{:?} and {:?} differ outside the channel axis",
                tape.shape(a),
                tape.shape(b)
            ),
        ));
    }
    let area = h * w;
    let (ad, bd) = (tape.value(a).data(), tape.value(b).data());
    let mut out = Vec::with_capacity(ad.len() + bd.len());
    for s in 0..n {
        out.extend_from_slice(&ad[s * c1 * area..(s + 1) * c1 * area]);
        out.extend_from_slice(&bd[s * c2 * area..(s + 1) * c2 * area]);
    }
    let value = Tensor::new([n, c1 + c2, h, w], out)?;
    tape.push(
        "concat_channels",
        value,
        &[a, b],
        ConcatBackward { c1, c2, area },
    )
}

struct ConcatBackward {
    c1: usize,
    c2: usize,
    area: usize,
}

impl Backward for ConcatBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (ga, gb) = split_channels(grad.data(), self.c1, self.c2, self.area);
        vec![
            needs[0].then(|| Tensor::new(inputs[0].shape(), ga).expect("concat a")),
            needs[1].then(|| Tensor::new(inputs[1].shape(), gb).expect("concat b")),
        ]
    }
}

fn split_channels(data: &[f64], c1: usize, c2: usize, area: usize) -> (Vec<f64>, Vec<f64>) {
    let per = (c1 + c2) * area;
    let n = if per == 0 { 0 } else { data.len() / per };
    let mut a = Vec::with_capacity(n * c1 * area);
    let mut b = Vec::with_capacity(n * c2 * area);
    for s in 0..n {
        let block = &data[s * per..(s + 1) * per];
        a.extend_from_slice(&block[..c1 * area]);
        b.extend_from_slice(&block[c1 * area..]);
    }
    (a, b)
}

/// Channels `start..start + len` of `x`.
pub fn slice_channels(tape: &mut Tape, x: Var, start: usize, len: usize) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4("slice_channels")?;
    if start + len > c {
        return Err(Error::shape(
            "slice_channels",
            format!("channels {}..{} of {}", start, start + len, c),
        ));
    }
    let area = h * w;
    let data = tape.value(x).data();
    let mut out = Vec::with_capacity(n * len * area);
    for s in 0..n {
        let base = (s * c + start) * area;
        out.extend_from_slice(&data[base..base + len * area]);
    }
    let value = Tensor::new([n, len, h, w], out)?;
    tape.push("slice_channels", value, &[x], SliceBackward { start, len })
}

struct SliceBackward {
    start: usize,
    len: usize,
}

impl Backward for SliceBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, c, area) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let mut dx = Tensor::zeros(x.shape());
        for s in 0..n {
            let src = &grad.data()[s * self.len * area..(s + 1) * self.len * area];
            let base = (s * c + self.start) * area;
            dx.data_mut()[base..base + self.len * area].copy_from_slice(src);
        }
        vec![Some(dx)]
    }
}

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
pub fn softmax_ce_loss(tape: &mut Tape, logits: Var, labels: &LabelMap, ignore: u8) -> Result<Var> {
    let [n, k, h, w] = tape.value(logits).dims4("softmax_ce_loss")?;
    if (labels.batch(), labels.height(), labels.width()) != (n, h, w) {
        return Err(Error::shape(
            "softmax_ce_loss",
            format!(
                "logits {:?} vs labels {}×{}×{}",
                tape.shape(logits),
                labels.batch(),
                labels.height(),
                labels.width()
            ),
        ));
    }
    labels.validate(k, ignore)?;
    let area = h * w;
    let z = tape.value(logits).data();
    let mut probs = vec![0.0; z.len()];
    let mut total = 0.0;
    let mut valid = 0usize;
    for s in 0..n {
        for pix in 0..area {
            let at = |class: usize| (s * k + class) * area + pix;
            let (best, m) =
                (0..k)
                    .map(|j| (j, z[at(j)]))
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (j, v)| if v > acc.1 { (j, v) } else { acc },
                    );
            // log-sum-exp with the max term factored out exactly
            let mut rest = 0.0;
            for j in 0..k {
                let e = (z[at(j)] - m).exp();
                probs[at(j)] = e;
                if j != best {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            for j in 0..k {
                probs[at(j)] /= denom;
            }
            let label = labels.data()[s * area + pix];
            if label == ignore {
                continue;
            }
            valid += 1;
            total += rest.ln_1p() - (z[at(label as usize)] - m);
        }
    }
    if valid == 0 {
        return Err(Error::contract("no valid pixels"));
    }
    let value = Tensor::scalar(total / valid as f64);
    tape.push(
        "softmax_ce_loss",
        value,
        &[logits],
        SoftmaxCeBackward {
            probs,
            labels: labels.data().to_vec(),
            ignore,
            valid,
        },
    )
}

struct SoftmaxCeBackward {
    probs: Vec<f64>,
    labels: Vec<u8>,
    ignore: u8,
    valid: usize,
}

impl Backward for SoftmaxCeBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let [n, k, h, w] = [z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]];
        let area = h * w;
        let scale = grad.data()[0] / self.valid as f64;
        let mut dz = vec![0.0; z.numel()];
        for s in 0..n {
            for pix in 0..area {
                let label = self.labels[s * area + pix];
                if label == self.ignore {
                    continue;
                }
                for j in 0..k {
                    let at = (s * k + j) * area + pix;
                    let target = if j == label as usize { 1.0 } else { 0.0 };
                    dz[at] = scale * (self.probs[at] - target);
                }
            }
        }
        vec![Some(Tensor::new(z.shape(), dz).expect("dz"))]
    }
}

/// Per-pixel softmax over the channel axis of plain values.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let [n, k, h, w] = x.dims4("softmax_channels")?;
    let area = h * w;
    let mut out = vec![0.0; x.numel()];
    for s in 0..n {
        for pix in 0..area {
            let at = |j: usize| (s * k + j) * area + pix;
            let m = (0..k)
                .map(|j| x.data()[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..k {
                let e = (x.data()[at(j)] - m).exp();
                out[at(j)] = e;
                denom += e;
            }
            for j in 0..k {
                out[at(j)] /= denom;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Index of the largest channel per pixel; the lowest index wins ties.
pub fn argmax_channels(x: &Tensor) -> Result<LabelMap> {
    let [n, k, h, w] = x.dims4("argmax_channels")?;
    if k == 0 || k > 255 {
        return Err(Error::shape("argmax_channels", format!("{} classes", k)));
    }
    let area = h * w;
    let mut out = Vec::with_capacity(n * area);
    for s in 0..n {
        for pix in 0..area {
            let mut best = 0;
            for j in 1..k {
                if x.data()[(s * k + j) * area + pix] > x.data()[(s * k + best) * area + pix] {
                    best = j;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap::new(n, h, w, out)
}

/// Mirrors the last axis of an `N×C×H×W` tensor.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let [_, _, _, w] = x.dims4("flip_horizontal")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, DEFAULT_STEP};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn conv_value(
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let weight = tape.constant(w);
        let bias = b.map(|b| tape.constant(b));
        let y = conv2d(
            &mut tape,
            x,
            &Conv2dParams {
                weight,
                bias,
                stride,
                padding,
            },
        )?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn conv_diagonal_kernel() {
        let y = conv_value(
            t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]),
            t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]),
            None,
            1,
            0,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_pointwise_identity_and_tap_count() {
        let x = Tensor::from_fn([1, 1, 3, 3], |i| i as f64 - 4.0);
        let y = conv_value(
            x.clone(),
            Tensor::ones([1, 1, 1, 1]),
            Some(Tensor::zeros([1])),
            1,
            0,
        )
        .unwrap();
        assert_eq!(y, x);
        let y = conv_value(
            Tensor::ones([1, 1, 3, 3]),
            Tensor::ones([1, 1, 3, 3]),
            None,
            1,
            0,
        )
        .unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let err = conv_value(
            Tensor::ones([1, 2, 3, 3]),
            Tensor::ones([1, 3, 1, 1]),
            None,
            1,
            0,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
        let err = conv_value(
            Tensor::ones([1, 1, 2, 2]),
            Tensor::ones([1, 1, 3, 3]),
            None,
            1,
            0,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    fn pool(x: Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let y = max_pool2d(&mut tape, xv, 2, 2).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(y).clone(), tape.grad(xv).unwrap().clone())
    }

    #[test]
    fn max_pool_values_and_routing() {
        let (y, g) = pool(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);

        let (y, g) = pool(Tensor::full([1, 1, 4, 4], 3.0));
        assert_eq!(y, Tensor::full([1, 1, 2, 2], 3.0));
        // ties go to the first cell of each window
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.sum(), 4.0);
    }

    #[test]
    fn max_pool_rejects_oversized_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 1, 4]));
        assert!(max_pool2d(&mut tape, x, 2, 2).is_err());
    }

    #[test]
    fn gap_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::full([1, 1, 2, 2], 0.25));

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full([2, 3, 4, 5], -1.5));
        let y = global_avg_pool(&mut tape, c).unwrap();
        assert_eq!(tape.value(y), &Tensor::full([2, 3, 1, 1], -1.5));
    }

    #[test]
    fn bilinear_cell_oracle() {
        let x = t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let y = resize_values(&x, 4, 4).unwrap();
        // direct evaluation at source (0.25, 0.25):
        // 0.75·0.75·0 + 0.75·0.25·1 + 0.25·0.75·2 + 0.25·0.25·3
        let oracle = 0.75 * 0.25 * 1.0 + 0.25 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0;
        assert_eq!(oracle, 0.75);
        assert!((y.data()[5] - oracle).abs() <= 1e-12);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let c = Tensor::full([1, 2, 3, 5], 0.1 + 0.2);
        for (h, w) in [(1, 1), (7, 2), (6, 10), (3, 5)] {
            let y = resize_values(&c, h, w).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.1 + 0.2));
        }
        let x = Tensor::from_fn([1, 1, 3, 4], |i| (i as f64).cos());
        assert_eq!(resize_values(&x, 3, 4).unwrap(), x);
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 3, 2, 2], 4.2));
        let scale = tape.constant(Tensor::ones([3]));
        let shift = tape.constant(Tensor::zeros([3]));
        let p = NormParams {
            scale,
            shift,
            mode: NormMode::Batch,
            epsilon: NORM_EPSILON,
            running: None,
        };
        let (y, stats) = normalize(&mut tape, x, &p, true).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().mean, vec![4.2; 3]);

        let disabled = NormParams {
            mode: NormMode::Disabled,
            ..p
        };
        let z = tape.constant(Tensor::from_fn([1, 3, 2, 2], |i| i as f64 * 0.3 - 1.0));
        let (y, stats) = normalize(&mut tape, z, &disabled, true).unwrap();
        assert_eq!(tape.value(y), tape.value(z));
        assert!(stats.is_none());

        // batch mode at inference needs running statistics
        assert!(normalize(&mut tape, z, &p, false).is_err());
    }

    #[test]
    fn batch_norm_output_statistics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([3, 2, 3, 3], |i| {
            ((i * 37 % 11) as f64).sqrt() * 5.0
        }));
        let scale = tape.constant(Tensor::ones([2]));
        let shift = tape.constant(Tensor::zeros([2]));
        let p = NormParams {
            scale,
            shift,
            mode: NormMode::Batch,
            epsilon: NORM_EPSILON,
            running: None,
        };
        let (y, stats) = normalize(&mut tape, x, &p, true).unwrap();
        let stats = stats.unwrap();
        let y = tape.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|s| y.data()[(s * 2 + ch) * 9..(s * 2 + ch + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            let biased = stats.var[ch] * 26.0 / 27.0;
            assert!(m.abs() <= 1e-10);
            assert!((v - biased / (biased + NORM_EPSILON)).abs() <= 1e-10);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([1, 3, 4, 4], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([1, 5, 4, 4], |i| -(i as f64)));
        let ab = concat_channels(&mut tape, a, b).unwrap();
        assert_eq!(tape.shape(ab), &[1, 8, 4, 4]);
        let a2 = slice_channels(&mut tape, ab, 0, 3).unwrap();
        let b2 = slice_channels(&mut tape, ab, 3, 5).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));

        let empty = tape.constant(Tensor::zeros([1, 0, 4, 4]));
        let same = concat_channels(&mut tape, a, empty).unwrap();
        assert_eq!(tape.value(same), tape.value(a));

        let wrong = tape.constant(Tensor::zeros([1, 2, 3, 4]));
        assert!(concat_channels(&mut tape, a, wrong).is_err());
    }

    #[test]
    fn softmax_ce_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([1, 4, 2, 2]));
        let labels = LabelMap::single(2, 2, vec![0, 1, 2, 3]).unwrap();
        let loss = softmax_ce_loss(&mut tape, z, &labels, 255).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() <= 1e-12);

        let sat = Tensor::from_fn([1, 4, 2, 2], |i| if i / 4 == i % 4 { 40.0 } else { 0.0 });
        let z = tape.constant(sat);
        let loss = softmax_ce_loss(&mut tape, z, &labels, 255).unwrap();
        assert!(tape.value(loss).item().unwrap() <= 1e-15);
    }

    #[test]
    fn softmax_ce_masks_ignored_pixels() {
        let logits = t(&[1, 2, 1, 2], &[0.3, -1.0, 1.7, 2.0]);
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone(), true);
        let both = LabelMap::single(1, 2, vec![1, 255]).unwrap();
        let loss = softmax_ce_loss(&mut tape, z, &both, 255).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap().clone();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[3], 0.0);
        let l2 = tape.value(loss).item().unwrap();

        let single = t(&[1, 2, 1, 1], &[0.3, 1.7]);
        let mut tape = Tape::new();
        let z = tape.constant(single);
        let one = LabelMap::single(1, 1, vec![1]).unwrap();
        let l1 = softmax_ce_loss(&mut tape, z, &one, 255).unwrap();
        assert_eq!(tape.value(l1).item().unwrap(), l2);
    }

    #[test]
    fn softmax_ce_errors() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([1, 3, 1, 2]));
        let ignored = LabelMap::single(1, 2, vec![255, 255]).unwrap();
        let err = softmax_ce_loss(&mut tape, z, &ignored, 255).unwrap_err();
        assert!(err.to_string().contains("no valid pixels"));
        let bad = LabelMap::single(1, 2, vec![0, 3]).unwrap();
        assert!(matches!(
            softmax_ce_loss(&mut tape, z, &bad, 255),
            Err(Error::Label {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let x = t(&[1, 3, 1, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]);
        let labels = argmax_channels(&x).unwrap();
        assert_eq!(labels.data(), &[0, 1]);
    }

    #[test]
    fn gradcheck_relu_away_from_kink() {
        let x = Tensor::from_fn([2, 3], |i| [0.7, -1.3, 2.1, -0.4, 0.9, -2.2][i]);
        let err = gradcheck(
            |t, x| {
                let r = t.relu(x)?;
                let sq = t.mul(r, r)?;
                t.sum(sq)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-5);
    }
}
