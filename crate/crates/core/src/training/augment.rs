//! Training-time augmentation: random scale, horizontal flip, crop and mean
//! subtraction, applied identically to an image and its labels.

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::nn;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale_set: Vec<f64>,
    pub flip: bool,
    pub crop_size: usize,
    pub mean_rgb: [f64; 3],
}

/// Draws made for one sample, in the order they are taken from the stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub flip: bool,
    /// Top-left corner of the crop in the (padded) scaled image.
    pub offset: (usize, usize),
}

/// Nearest-neighbour resampling of a single label map with half-pixel
/// centres, so labels never blend.
pub fn resize_labels_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    if labels.batch() != 1 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "resize_labels",
            format!("cannot resize {}×{} to {}×{}", h, w, out_h, out_w),
        ));
    }
    let src = |d: usize, inn: usize, out: usize| {
        (((d as f64 + 0.5) * inn as f64 / out as f64) as usize).min(inn - 1)
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = src(y, h, out_h);
        for x in 0..out_w {
            data.push(labels.get(0, sy, src(x, w, out_w)));
        }
    }
    LabelMap::single(out_h, out_w, data)
}

pub fn flip_labels(labels: &LabelMap) -> LabelMap {
    let mut out = labels.clone();
    let w = labels.width();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Copies a `crop×crop` window at `offset`; positions outside the source
/// take `fill_image` per channel and `fill_label`.
fn crop_window(
    image: &Tensor,
    labels: &LabelMap,
    crop: usize,
    offset: (usize, usize),
    fill_image: [f64; 3],
) -> Result<(Tensor, LabelMap)> {
    let [_, c, h, w] = image.dims4("augment")?;
    let mut out = Vec::with_capacity(c * crop * crop);
    for (ch, &fill) in fill_image.iter().enumerate().take(c) {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in offset.0..offset.0 + crop {
            for x in offset.1..offset.1 + crop {
                out.push(if y < h && x < w {
                    plane[y * w + x]
                } else {
                    fill
                });
            }
        }
    }
    let mut lab = Vec::with_capacity(crop * crop);
    for y in offset.0..offset.0 + crop {
        for x in offset.1..offset.1 + crop {
            lab.push(if y < h && x < w {
                labels.get(0, y, x)
            } else {
                IGNORE_LABEL
            });
        }
    }
    Ok((
        Tensor::new([c, crop, crop], out)?,
        LabelMap::single(crop, crop, lab)?,
    ))
}

/// Takes the random draws for one sample of size `h×w`.
pub fn draw<R: rand::Rng>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> AugmentDraw {
    let scale = cfg.scale_set[rng.random_range(0..cfg.scale_set.len())];
    let flip = rng.random_bool(0.5) && cfg.flip;
    let (sh, sw) = scaled_size(h, w, scale);
    let oy = rng.random_range(0..=sh.saturating_sub(cfg.crop_size));
    let ox = rng.random_range(0..=sw.saturating_sub(cfg.crop_size));
    AugmentDraw {
        scale,
        flip,
        offset: (oy, ox),
    }
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let s = |d: usize| ((d as f64 * scale).round() as usize).max(1);
    (s(h), s(w))
}

/// Applies `d` to a `3×H×W` image in `[0, 255]` and its labels, returning
/// a mean-subtracted `3×crop×crop` image and matching labels.
pub fn apply(
    image: &Tensor,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    d: &AugmentDraw,
) -> Result<(Tensor, LabelMap)> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape(
            "augment",
            format!("expected 3×H×W, got {:?}", image.shape()),
        ));
    };
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::shape("augment", "image and labels differ in size"));
    }
    let (sh, sw) = scaled_size(h, w, d.scale);
    let batched = image.clone().reshape([1, 3, h, w])?;
    let mut img = nn::resize_values(&batched, sh, sw)?;
    let mut lab = resize_labels_nearest(labels, sh, sw)?;
    if d.flip {
        img = nn::flip_horizontal(&img)?;
        lab = flip_labels(&lab);
    }
    let (mut out, lab) = crop_window(&img, &lab, cfg.crop_size, d.offset, cfg.mean_rgb)?;
    let plane = cfg.crop_size * cfg.crop_size;
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v -= cfg.mean_rgb[c];
        }
    }
    Ok((out, lab))
}

/// Draws and applies one augmentation.
pub fn augment<R: rand::Rng>(
    image: &Tensor,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor, LabelMap)> {
    let d = draw(cfg, image.shape()[1], image.shape()[2], rng);
    apply(image, labels, cfg, &d)
}

/// Subtracts the per-channel mean from a `3×H×W` image.
pub fn subtract_mean(image: &Tensor, mean_rgb: [f64; 3]) -> Tensor {
    let plane = image.numel() / 3;
    let mut out = image.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v -= mean_rgb[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> (Tensor, LabelMap) {
        let img = Tensor::from_fn([3, 8, 8], |i| (i % 251) as f64);
        let lab = LabelMap::single(8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
        (img, lab)
    }

    fn cfg(scales: Vec<f64>, flip: bool, crop: usize) -> AugmentConfig {
        AugmentConfig {
            scale_set: scales,
            flip,
            crop_size: crop,
            mean_rgb: [10.0, 20.0, 30.0],
        }
    }

    #[test]
    fn identity_path_only_subtracts_mean() {
        let (img, lab) = sample();
        let c = cfg(vec![1.0], false, 8);
        let (out, l) = augment(&img, &lab, &c, &mut rng::seeded(1)).unwrap();
        assert_eq!(out, subtract_mean(&img, c.mean_rgb));
        assert_eq!(l, lab);
    }

    #[test]
    fn flip_twice_restores() {
        let (img, lab) = sample();
        assert_eq!(flip_labels(&flip_labels(&lab)), lab);
        let b = img.clone().reshape([1, 3, 8, 8]).unwrap();
        assert_eq!(
            nn::flip_horizontal(&nn::flip_horizontal(&b).unwrap()).unwrap(),
            b
        );
    }

    #[test]
    fn labels_stay_in_range_with_padding() {
        let (img, lab) = sample();
        let c = cfg(vec![0.5, 0.75, 1.5, 2.0], true, 8);
        let mut r = rng::seeded(2);
        for _ in 0..40 {
            let (out, l) = augment(&img, &lab, &c, &mut r).unwrap();
            assert_eq!(out.shape(), &[3, 8, 8]);
            assert!(l.validate(3, IGNORE_LABEL).is_ok());
        }
    }

    #[test]
    fn short_side_padded_with_mean_and_ignore() {
        let (img, lab) = sample();
        let c = cfg(vec![0.5], false, 8);
        let d = AugmentDraw {
            scale: 0.5,
            flip: false,
            offset: (0, 0),
        };
        let (out, l) = apply(&img, &lab, &c, &d).unwrap();
        assert_eq!(l.get(0, 7, 7), IGNORE_LABEL);
        assert_eq!(out.data()[63], 0.0);
        assert_ne!(l.get(0, 0, 0), IGNORE_LABEL);
    }

    #[test]
    fn nearest_resize_upsamples_by_repetition() {
        let lab = LabelMap::single(2, 2, vec![0, 1, 2, 3]).unwrap();
        let up = resize_labels_nearest(&lab, 4, 4).unwrap();
        assert_eq!(up.data(), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }
}
