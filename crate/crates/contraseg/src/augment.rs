//! The two augmentation pipelines.
//!
//! The contrastive pipeline applies, in order: small-angle rotation,
//! crop-then-resize-back, color jitter, grayscale, Gaussian blur, solarize,
//! horizontal flip. The segmentation pipeline applies only rotation (shared
//! between slice and mask, bilinear vs nearest-neighbor), color jitter and
//! blur — no cropping, and rotation borders are kept black rather than
//! cropped. All sampling comes from a caller-owned seeded stream.

use ndarray::{Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synthdata::MultimodalSlice;

/// Two augmented views of one source slice.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view1: Array3<f32>,
    pub view2: Array3<f32>,
    pub source_id: String,
}

/// Per-op enables (as probabilities) and strengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_prob: f64,
    pub rotation_max_deg: f64,
    pub crop_prob: f64,
    pub crop_scale_range: (f64, f64),
    pub jitter_prob: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub solarize_prob: f64,
    pub solarize_threshold: f32,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::contrastive()
    }
}

impl AugmentConfig {
    /// Defaults for the contrastive pipeline. Strengths are tempered for
    /// small same-anatomy datasets where views of one slice must stay more
    /// alike than views of different slices.
    pub fn contrastive() -> Self {
        AugmentConfig {
            rotation_prob: 1.0,
            rotation_max_deg: 10.0,
            crop_prob: 1.0,
            crop_scale_range: (0.75, 1.0),
            jitter_prob: 0.8,
            jitter_brightness: 0.2,
            jitter_contrast: 0.2,
            grayscale_prob: 0.1,
            blur_prob: 0.5,
            blur_sigma_range: (0.1, 1.0),
            solarize_prob: 0.1,
            solarize_threshold: 0.5,
            flip_prob: 0.5,
        }
    }

    /// Defaults for segmentation training: rotation + photometric only.
    pub fn segmentation() -> Self {
        AugmentConfig {
            rotation_prob: 1.0,
            rotation_max_deg: 10.0,
            crop_prob: 0.0,
            crop_scale_range: (1.0, 1.0),
            jitter_prob: 0.8,
            jitter_brightness: 0.2,
            jitter_contrast: 0.2,
            grayscale_prob: 0.0,
            blur_prob: 0.5,
            blur_sigma_range: (0.1, 1.0),
            solarize_prob: 0.0,
            solarize_threshold: 0.5,
            flip_prob: 0.0,
        }
    }

    /// Photometric-only variant: color jitter and Gaussian blur.
    pub fn photometric_only(&self) -> Self {
        AugmentConfig {
            rotation_prob: 0.0,
            crop_prob: 0.0,
            grayscale_prob: 0.0,
            solarize_prob: 0.0,
            flip_prob: 0.0,
            ..self.clone()
        }
    }

    /// Everything disabled; the pipeline becomes the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_prob: 0.0,
            rotation_max_deg: 0.0,
            crop_prob: 0.0,
            crop_scale_range: (1.0, 1.0),
            jitter_prob: 0.0,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_range: (0.1, 0.1),
            solarize_prob: 0.0,
            solarize_threshold: 0.5,
            flip_prob: 0.0,
        }
    }
}

pub(crate) fn sample_rotation_angle(max_deg: f64, rng: &mut ChaCha8Rng) -> f64 {
    if max_deg <= 0.0 {
        0.0
    } else {
        rng.gen_range(-max_deg..=max_deg)
    }
}

/// Rotate a `[3,H,W]` image by `deg` degrees about its center, bilinear,
/// zero outside the source frame.
pub fn rotate_bilinear(img: &Array3<f32>, deg: f64) -> Array3<f32> {
    if deg == 0.0 {
        return img.clone();
    }
    let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let th = deg.to_radians();
    let (sin, cos) = th.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cy + cos * dy + sin * dx;
            let sx = cx - sin * dy + cos * dx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = (sy - y0) as f32;
            let fx = (sx - x0) as f32;
            let (y0, x0) = (y0 as isize, x0 as isize);
            let at = |c: usize, yy: isize, xx: isize| -> f32 {
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    img[(c, yy as usize, xx as usize)]
                } else {
                    0.0
                }
            };
            for c in 0..ch {
                let v = at(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(c, y0, x0 + 1) * (1.0 - fy) * fx
                    + at(c, y0 + 1, x0) * fy * (1.0 - fx)
                    + at(c, y0 + 1, x0 + 1) * fy * fx;
                out[(c, y, x)] = v;
            }
        }
    }
    out
}

/// Rotate a label map by `deg` degrees, nearest-neighbor, zero outside.
pub fn rotate_nearest(mask: &Array2<u8>, deg: f64) -> Array2<u8> {
    if deg == 0.0 {
        return mask.clone();
    }
    let (h, w) = (mask.nrows(), mask.ncols());
    let th = deg.to_radians();
    let (sin, cos) = th.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sy = (cy + cos * dy + sin * dx).round();
        let sx = (cx - sin * dy + cos * dx).round();
        if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
            mask[(sy as usize, sx as usize)]
        } else {
            0
        }
    })
}

fn crop_resize_back(img: &Array3<f32>, scale: f64, oy: f64, ox: f64) -> Array3<f32> {
    let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let hc = ((scale * h as f64).round() as usize).clamp(8, h);
    let wc = ((scale * w as f64).round() as usize).clamp(8, w);
    let y0 = (oy * (h - hc) as f64).round() as usize;
    let x0 = (ox * (w - wc) as f64).round() as usize;
    if hc == h && wc == w && y0 == 0 && x0 == 0 {
        return img.clone();
    }
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for y in 0..h {
        for x in 0..w {
            // map output pixel center into crop coordinates
            let sy = y0 as f64 + ((y as f64 + 0.5) * hc as f64 / h as f64) - 0.5;
            let sx = x0 as f64 + ((x as f64 + 0.5) * wc as f64 / w as f64) - 0.5;
            let yf = sy.floor();
            let xf = sx.floor();
            let fy = (sy - yf) as f32;
            let fx = (sx - xf) as f32;
            let (yf, xf) = (yf as isize, xf as isize);
            let at = |c: usize, yy: isize, xx: isize| -> f32 {
                let yy = yy.clamp(0, h as isize - 1) as usize;
                let xx = xx.clamp(0, w as isize - 1) as usize;
                img[(c, yy, xx)]
            };
            for c in 0..ch {
                out[(c, y, x)] = at(c, yf, xf) * (1.0 - fy) * (1.0 - fx)
                    + at(c, yf, xf + 1) * (1.0 - fy) * fx
                    + at(c, yf + 1, xf) * fy * (1.0 - fx)
                    + at(c, yf + 1, xf + 1) * fy * fx;
            }
        }
    }
    out
}

fn color_jitter(img: &mut Array3<f32>, brightness: f64, contrast: f64) {
    let b = brightness as f32;
    let c = contrast as f32;
    let mean = img.iter().copied().sum::<f32>() / img.len() as f32;
    img.mapv_inplace(|v| (((v * b) - mean) * c + mean).clamp(0.0, 1.0));
}

fn to_grayscale(img: &mut Array3<f32>) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for y in 0..h {
        for x in 0..w {
            let m = (img[(0, y, x)] + img[(1, y, x)] + img[(2, y, x)]) / 3.0;
            for c in 0..3 {
                img[(c, y, x)] = m;
            }
        }
    }
}

fn gaussian_blur(img: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let r = (sigma * 2.5).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    for i in -r..=r {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / sum) as f32).collect();

    let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut tmp = Array3::<f32>::zeros((ch, h, w));
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + ki as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * img[(c, y, xx)];
                }
                tmp[(c, y, x)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + ki as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(c, yy, x)];
                }
                out[(c, y, x)] = acc;
            }
        }
    }
    out
}

fn solarize(img: &mut Array3<f32>, threshold: f32) {
    img.mapv_inplace(|v| if v > threshold { 1.0 - v } else { v });
}

fn hflip(img: &mut Array3<f32>) {
    img.invert_axis(Axis(2));
}

/// One sampled chain of the contrastive pipeline.
fn contrastive_chain(img: &Array3<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut out = img.clone();
    if rng.gen_bool(cfg.rotation_prob.clamp(0.0, 1.0)) {
        let deg = sample_rotation_angle(cfg.rotation_max_deg, rng);
        out = rotate_bilinear(&out, deg);
    }
    if rng.gen_bool(cfg.crop_prob.clamp(0.0, 1.0)) {
        let (lo, hi) = cfg.crop_scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let oy: f64 = rng.gen();
        let ox: f64 = rng.gen();
        out = crop_resize_back(&out, scale, oy, ox);
    }
    if rng.gen_bool(cfg.jitter_prob.clamp(0.0, 1.0)) {
        let b = 1.0 + rng.gen_range(-cfg.jitter_brightness..=cfg.jitter_brightness);
        let c = 1.0 + rng.gen_range(-cfg.jitter_contrast..=cfg.jitter_contrast);
        color_jitter(&mut out, b.max(0.0), c.max(0.0));
    }
    if rng.gen_bool(cfg.grayscale_prob.clamp(0.0, 1.0)) {
        to_grayscale(&mut out);
    }
    if rng.gen_bool(cfg.blur_prob.clamp(0.0, 1.0)) {
        let (lo, hi) = cfg.blur_sigma_range;
        let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        out = gaussian_blur(&out, sigma.max(1e-3));
    }
    if rng.gen_bool(cfg.solarize_prob.clamp(0.0, 1.0)) {
        solarize(&mut out, cfg.solarize_threshold);
    }
    if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        hflip(&mut out);
    }
    out
}

/// Two independently sampled augmentation chains of the same slice.
pub fn contrastive_augment(
    slice: &MultimodalSlice,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> ViewPair {
    ViewPair {
        view1: contrastive_chain(&slice.pixels, cfg, rng),
        view2: contrastive_chain(&slice.pixels, cfg, rng),
        source_id: slice.slice_id.clone(),
    }
}

/// Segmentation-training augmentation: rotation applied identically to slice
/// (bilinear) and mask (nearest-neighbor); photometric ops on the slice only.
/// Cropping is never applied and rotation borders are kept.
pub fn segmentation_augment(
    slice: &Array3<f32>,
    mask: &Array2<u8>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Array2<u8>) {
    let mut img = slice.clone();
    let mut out_mask = mask.clone();
    if rng.gen_bool(cfg.rotation_prob.clamp(0.0, 1.0)) {
        let deg = sample_rotation_angle(cfg.rotation_max_deg, rng);
        if deg != 0.0 {
            img = rotate_bilinear(&img, deg);
            out_mask = rotate_nearest(&out_mask, deg);
        }
    }
    if rng.gen_bool(cfg.jitter_prob.clamp(0.0, 1.0)) {
        let b = 1.0 + rng.gen_range(-cfg.jitter_brightness..=cfg.jitter_brightness);
        let c = 1.0 + rng.gen_range(-cfg.jitter_contrast..=cfg.jitter_contrast);
        color_jitter(&mut img, b.max(0.0), c.max(0.0));
    }
    if rng.gen_bool(cfg.blur_prob.clamp(0.0, 1.0)) {
        let (lo, hi) = cfg.blur_sigma_range;
        let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        img = gaussian_blur(&img, sigma.max(1e-3));
    }
    (img, out_mask)
}
