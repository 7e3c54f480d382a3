use ndarray::{Array2, Axis};
use rand::Rng;

use super::types::{flip_mask, mask_area, tight_box, BoxPrompt, Mask, PseudoLabelSet, RgbdSample};
use crate::error::{Error, Result};

const JITTER_RETRIES: usize = 8;

/// Linear depth scaling: `clamp(depth / d_max, 0, 1)`, missing depth stays 0.
pub fn normalize_depth(depth: &Array2<f32>, d_max: f32) -> Result<Array2<f32>> {
    if !(d_max > 0.0) || !d_max.is_finite() {
        return Err(Error::config("data.depth_max", format!("must be > 0, got {d_max}")));
    }
    Ok(depth.mapv(|d| (d / d_max).clamp(0.0, 1.0)))
}

/// Pseudo-label area floor: 0.1% of the image, at least one pixel.
pub fn default_min_mask_area(height: usize, width: usize) -> usize {
    ((height * width) as f64 * 1e-3).ceil().max(1.0) as usize
}

/// Keep masks with at least `min_area` pixels, preserving order.
pub fn filter_small_masks(labels: &PseudoLabelSet, min_area: usize) -> PseudoLabelSet {
    PseudoLabelSet {
        masks: labels
            .masks
            .iter()
            .filter(|m| mask_area(m) >= min_area)
            .cloned()
            .collect(),
        source: labels.source.clone(),
    }
}

/// Uniformly pick one mask and return it with its tight box.
pub fn sample_pretrain_target<R: Rng + ?Sized>(
    labels: &PseudoLabelSet,
    rng: &mut R,
) -> Result<(Mask, BoxPrompt)> {
    if labels.is_empty() {
        return Err(Error::Sampling("no pseudo-label masks to sample from".into()));
    }
    let idx = rng.gen_range(0..labels.len());
    let mask = labels.masks[idx].clone();
    let b = tight_box(&mask)
        .ok_or_else(|| Error::Sampling(format!("pseudo-label mask {idx} is empty")))?;
    Ok((mask, b))
}

/// Displace each coordinate by an independent uniform draw in
/// `[-max_frac * L, +max_frac * L]`, `L` the side length along that axis.
///
/// The result is clipped to the image. A jitter that collapses the box is
/// redrawn up to 8 times, after which the input box is returned unchanged.
pub fn jitter_box<R: Rng + ?Sized>(
    b: &BoxPrompt,
    max_frac: f32,
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<BoxPrompt> {
    if !(0.0..0.5).contains(&max_frac) {
        return Err(Error::config(
            "noise_frac",
            format!("must lie in [0, 0.5), got {max_frac}"),
        ));
    }
    if max_frac == 0.0 {
        return Ok(*b);
    }
    let dx = max_frac * b.width();
    let dy = max_frac * b.height();
    for _ in 0..JITTER_RETRIES {
        let cand = BoxPrompt {
            x_min: b.x_min + rng.gen_range(-dx..=dx),
            y_min: b.y_min + rng.gen_range(-dy..=dy),
            x_max: b.x_max + rng.gen_range(-dx..=dx),
            y_max: b.y_max + rng.gen_range(-dy..=dy),
        };
        if let Some(c) = cand.clip(width, height) {
            return Ok(c);
        }
    }
    Ok(*b)
}

/// Mirror rasters, annotation masks and boxes about the vertical axis.
pub fn horizontal_flip(sample: &RgbdSample, boxes: &[BoxPrompt]) -> (RgbdSample, Vec<BoxPrompt>) {
    let mut rgb = sample.rgb.clone();
    rgb.invert_axis(Axis(1));
    let mut depth = sample.depth.clone();
    depth.invert_axis(Axis(1));
    let w = sample.width();
    let flipped = RgbdSample {
        id: sample.id.clone(),
        rgb: rgb.as_standard_layout().into_owned(),
        depth: depth.as_standard_layout().into_owned(),
        annotation: sample.annotation.as_ref().map(|a| a.flip_horizontal()),
    };
    (flipped, boxes.iter().map(|b| b.flip_horizontal(w)).collect())
}

/// One step of 4-neighbourhood dilation (`grow`) or erosion.
pub fn morph_step(mask: &Mask, grow: bool) -> Mask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let nb = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        let self_v = mask[[r, c]];
        if grow {
            self_v || nb.iter().any(|&(y, x)| y < h && x < w && mask[[y, x]])
        } else {
            // pixels at the image border keep their value for missing neighbours
            self_v && nb.iter().all(|&(y, x)| y >= h || x >= w || mask[[y, x]])
        }
    })
}

/// Imperfect pseudo-labels: each mask is, with probability `prob`, dilated or
/// eroded (fair coin) by one pixel. Erosions that would empty a mask are skipped.
pub fn corrupt_masks<R: Rng + ?Sized>(masks: &[Mask], prob: f64, rng: &mut R) -> Vec<Mask> {
    masks
        .iter()
        .map(|m| {
            if rng.gen_bool(prob) {
                let grow = rng.gen_bool(0.5);
                let out = morph_step(m, grow);
                if mask_area(&out) == 0 {
                    m.clone()
                } else {
                    out
                }
            } else {
                m.clone()
            }
        })
        .collect()
}

pub fn flip_masks(masks: &[Mask]) -> Vec<Mask> {
    masks.iter().map(flip_mask).collect()
}
