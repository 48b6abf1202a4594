//! Multi-scale and mirrored inference.

use crate::attention::{AttentionHooks, AttentionRecord};
use crate::backbone::OUTPUT_STRIDE;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::network::DfDamModel;
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::augment::subtract_mean;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
            flip: false,
        }
    }
}

impl EvalConfig {
    /// One forward pass at the original size.
    pub fn single_scale() -> Self {
        EvalConfig {
            scales: vec![1.0],
            flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(
                "scales must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pads the bottom and right of an `N×C×H×W` tensor with zeros up to the
/// next multiple of `multiple`.
pub fn pad_to_multiple(x: &Tensor, multiple: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("pad")?;
    let (ph, pw) = (
        h.div_ceil(multiple) * multiple,
        w.div_ceil(multiple) * multiple,
    );
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for (dst, src) in out
        .data_mut()
        .chunks_mut(ph * pw)
        .zip(x.data().chunks(h * w))
    {
        for y in 0..h {
            dst[y * pw..y * pw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Ok(out)
}

/// Top-left `h×w` window of an `N×C×H×W` tensor.
pub fn crop_top_left(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, ih, iw] = x.dims4("crop")?;
    if (ih, iw) == (h, w) {
        return Ok(x.clone());
    }
    if h > ih || w > iw {
        return Err(Error::shape(
            "crop",
            format!("{}×{} window in {}×{}", h, w, ih, iw),
        ));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(ih * iw) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * iw..y * iw + w]);
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Logits for a mean-subtracted `1×3×H×W` image of any size, padding to the
/// encoder stride (zero after mean removal, i.e. the mean color) and
/// cropping the logits back.
pub fn forward_padded(
    model: &DfDamModel,
    params: &ParamStore,
    image: &Tensor,
    hooks: AttentionHooks,
) -> Result<(Tensor, AttentionRecord)> {
    let [_, _, h, w] = image.dims4("forward_padded")?;
    let padded = pad_to_multiple(image, OUTPUT_STRIDE)?;
    let (logits, record) = model.predict(params, &padded, hooks)?;
    Ok((crop_top_left(&logits, h, w)?, record))
}

/// Averaged class probabilities `1×K×H×W` for a raw `3×H×W` image.
pub fn multiscale_probabilities(
    model: &DfDamModel,
    params: &ParamStore,
    image: &Tensor,
    mean_rgb: [f64; 3],
    cfg: &EvalConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape(
            "infer",
            format!("expected 3×H×W, got {:?}", image.shape()),
        ));
    };
    let base = subtract_mean(image, mean_rgb).reshape([1, 3, h, w])?;
    let mut total: Option<Tensor> = None;
    let mut count = 0usize;
    for &scale in &cfg.scales {
        let sh = ((h as f64 * scale).round() as usize).max(1);
        let sw = ((w as f64 * scale).round() as usize).max(1);
        let scaled = nn::resize_values(&base, sh, sw)?;
        let mirrors: &[bool] = if cfg.flip { &[false, true] } else { &[false] };
        for &mirror in mirrors {
            let input = if mirror {
                nn::flip_horizontal(&scaled)?
            } else {
                scaled.clone()
            };
            let (logits, _) = forward_padded(model, params, &input, AttentionHooks::NONE)?;
            let mut probs = nn::softmax_channels(&logits)?;
            if mirror {
                probs = nn::flip_horizontal(&probs)?;
            }
            let probs = nn::resize_values(&probs, h, w)?;
            match &mut total {
                Some(t) => t.accumulate(&probs),
                None => total = Some(probs),
            }
            count += 1;
        }
    }
    let total = total.expect("at least one scale");
    Ok(total.map(|v| v / count as f64))
}

/// Predicted `1×H×W` label map for a raw `3×H×W` image.
pub fn infer_multiscale_flip(
    model: &DfDamModel,
    params: &ParamStore,
    image: &Tensor,
    mean_rgb: [f64; 3],
    cfg: &EvalConfig,
) -> Result<LabelMap> {
    nn::argmax_channels(&multiscale_probabilities(
        model, params, image, mean_rgb, cfg,
    )?)
}
