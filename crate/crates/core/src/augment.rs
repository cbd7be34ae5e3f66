//! Weak and strong augmentations.
//!
//! Weak: one of the eight dihedral transforms, spectrally neutral. Strong:
//! rotation by an arbitrary angle plus a half-size crop (geometric stage,
//! applied identically to the image, pseudo-labels, probability maps, and
//! validity mask), then gamma/brightness/contrast/blur on the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One view of an unlabeled sample: the image plus whatever pseudo-label
/// planes ride along with it, and a per-pixel geometric validity mask.
#[derive(Debug, Clone)]
pub struct AugmentedView {
    pub image: Tensor,                  // [3, S, S]
    pub pseudo_heights: Option<Vec<f64>>, // S*S
    pub cut_probs: Option<Tensor>,      // [C, S, S]
    pub validity: Vec<f64>,             // S*S, 1.0 = geometrically valid
    pub size: usize,
}

impl AugmentedView {
    pub fn bare(image: Tensor, size: usize) -> Self {
        AugmentedView {
            image,
            pseudo_heights: None,
            cut_probs: None,
            validity: vec![1.0; size * size],
            size,
        }
    }
}

/// Source coordinates for output pixel `(y, x)` under dihedral element `k`.
fn dihedral_src(k: usize, y: usize, x: usize, s: usize) -> (usize, usize) {
    let m = s - 1;
    match k {
        0 => (y, x),
        1 => (m - x, y),         // 90 degrees
        2 => (m - y, m - x),     // 180 degrees
        3 => (x, m - y),         // 270 degrees
        4 => (y, m - x),         // horizontal mirror
        5 => (m - y, x),         // vertical mirror
        6 => (x, y),             // transpose
        _ => (m - x, m - y),     // anti-transpose
    }
}

/// Applies dihedral element `k` to a `[channels, s, s]` plane stack.
pub fn apply_dihedral(data: &[f64], channels: usize, s: usize, k: usize) -> Vec<f64> {
    let plane = s * s;
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        let src = &data[c * plane..(c + 1) * plane];
        let dst = &mut out[c * plane..(c + 1) * plane];
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = dihedral_src(k, y, x, s);
                dst[y * s + x] = src[sy * s + sx];
            }
        }
    }
    out
}

/// One of the eight dihedral transforms, uniformly chosen; no spectral
/// change, validity all ones.
pub fn augment_weak(image: &Tensor, rng: &mut impl Rng) -> Result<AugmentedView> {
    let shape = image.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::shape(format!(
            "augment_weak: need a square [C,S,S] image, got {:?}",
            shape
        )));
    }
    let s = shape[1];
    let k = rng.random_range(0..8usize);
    let out = apply_dihedral(image.data(), shape[0], s, k);
    Ok(AugmentedView::bare(Tensor::from_vec(shape, out)?, s))
}

/// Strong-augmentation parameter ranges, all config-exposed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRanges {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub brightness: f64,
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            gamma_lo: 0.7,
            gamma_hi: 1.5,
            brightness: 0.2,
            contrast_lo: 0.8,
            contrast_hi: 1.25,
            blur_sigma_max: 1.5,
        }
    }
}

/// Concrete strong draw: rotation angle, crop offset, spectral parameters.
#[derive(Debug, Clone, Copy)]
pub struct StrongParams {
    pub angle_rad: f64,
    pub crop_y: usize,
    pub crop_x: usize,
    pub gamma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: f64,
}

impl StrongParams {
    /// The degenerate draw: no rotation, centered crop, identity spectral.
    pub fn identity_centered(s: usize) -> Self {
        StrongParams {
            angle_rad: 0.0,
            crop_y: s / 4,
            crop_x: s / 4,
            gamma: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            blur_sigma: 0.0,
        }
    }
}

/// Draws strong parameters in a fixed order (determinism depends on it).
pub fn draw_strong_params(s: usize, ranges: &AugmentRanges, rng: &mut impl Rng) -> StrongParams {
    let half = s / 2;
    StrongParams {
        angle_rad: rng.random_range(0.0..std::f64::consts::TAU),
        crop_y: rng.random_range(0..=s - half),
        crop_x: rng.random_range(0..=s - half),
        gamma: rng.random_range(ranges.gamma_lo..ranges.gamma_hi),
        brightness: rng.random_range(-ranges.brightness..ranges.brightness),
        contrast: rng.random_range(ranges.contrast_lo..ranges.contrast_hi),
        blur_sigma: rng.random_range(0.0..ranges.blur_sigma_max),
    }
}

/// Continuous source location sampled by output pixel `(i, j)`: rotate the
/// crop window back into the source frame around the image center.
fn source_point(p: &StrongParams, s: usize, i: usize, j: usize) -> (f64, f64) {
    let c = s as f64 / 2.0;
    let xr = p.crop_x as f64 + j as f64 + 0.5;
    let yr = p.crop_y as f64 + i as f64 + 0.5;
    let (sin, cos) = p.angle_rad.sin_cos();
    let xs = c + cos * (xr - c) + sin * (yr - c);
    let ys = c - sin * (xr - c) + cos * (yr - c);
    (xs, ys)
}

fn bilinear(plane: &[f64], s: usize, xs: f64, ys: f64) -> f64 {
    let fx = (xs - 0.5).clamp(0.0, (s - 1) as f64);
    let fy = (ys - 0.5).clamp(0.0, (s - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(s - 1);
    let y1 = (y0 + 1).min(s - 1);
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    plane[y0 * s + x0] * (1.0 - ty) * (1.0 - tx)
        + plane[y0 * s + x1] * (1.0 - ty) * tx
        + plane[y1 * s + x0] * ty * (1.0 - tx)
        + plane[y1 * s + x1] * ty * tx
}

fn nearest_index(s: usize, xs: f64, ys: f64) -> usize {
    let x = (xs - 0.5).round().clamp(0.0, (s - 1) as f64) as usize;
    let y = (ys - 0.5).round().clamp(0.0, (s - 1) as f64) as usize;
    y * s + x
}

fn gaussian_blur(plane: &mut Vec<f64>, s: usize, sigma: f64) {
    if sigma < 1e-3 {
        return;
    }
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for d in -radius..=radius {
        kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let d = ki as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y as isize, (x as isize + d).clamp(0, s as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, s as isize - 1), x as isize)
                    };
                    acc += kv * src[sy as usize * s + sx as usize];
                }
                dst[y * s + x] = acc;
            }
        }
        dst
    };
    let h = pass(plane, true);
    *plane = pass(&h, false);
}

/// Applies a concrete strong draw. The geometric stage warps every plane;
/// the spectral stage touches the image only.
pub fn augment_strong_with(view: &AugmentedView, params: &StrongParams) -> Result<AugmentedView> {
    let s = view.size;
    let half = s / 2;
    if half < 8 {
        return Err(Error::config(format!(
            "augment_strong: crop of {half} pixels per side is below the 8-pixel minimum"
        )));
    }
    let heights = view
        .pseudo_heights
        .as_ref()
        .ok_or_else(|| Error::shape("augment_strong: view carries no pseudo-heights".to_string()))?;
    let probs = view
        .cut_probs
        .as_ref()
        .ok_or_else(|| Error::shape("augment_strong: view carries no probability maps".to_string()))?;
    let cuts = probs.shape()[0];

    let mut image = vec![0.0; 3 * half * half];
    let mut out_heights = vec![0.0; half * half];
    let mut out_probs = vec![0.0; cuts * half * half];
    let mut validity = vec![0.0; half * half];

    for i in 0..half {
        for j in 0..half {
            let (xs, ys) = source_point(params, s, i, j);
            let inside = xs >= 0.0 && xs <= s as f64 && ys >= 0.0 && ys <= s as f64;
            let o = i * half + j;
            let src = nearest_index(s, xs, ys);
            for c in 0..3 {
                image[c * half * half + o] =
                    bilinear(&view.image.data()[c * s * s..(c + 1) * s * s], s, xs, ys);
            }
            out_heights[o] = heights[src];
            for c in 0..cuts {
                out_probs[c * half * half + o] = probs.data()[c * s * s + src];
            }
            validity[o] = if inside { view.validity[src] } else { 0.0 };
        }
    }

    // spectral stage: gamma, brightness, contrast, blur; image only
    for v in image.iter_mut() {
        let g = v.max(0.0).powf(params.gamma);
        let b = g + params.brightness;
        *v = (b - 0.5) * params.contrast + 0.5;
    }
    if params.blur_sigma >= 1e-3 {
        for c in 0..3 {
            let mut plane = image[c * half * half..(c + 1) * half * half].to_vec();
            gaussian_blur(&mut plane, half, params.blur_sigma);
            image[c * half * half..(c + 1) * half * half].copy_from_slice(&plane);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(AugmentedView {
        image: Tensor::from_vec(&[3, half, half], image)?,
        pseudo_heights: Some(out_heights),
        cut_probs: Some(Tensor::from_vec(&[cuts, half, half], out_probs)?),
        validity,
        size: half,
    })
}

/// Draws parameters and applies them.
pub fn augment_strong(
    view: &AugmentedView,
    ranges: &AugmentRanges,
    rng: &mut impl Rng,
) -> Result<AugmentedView> {
    let params = draw_strong_params(view.size, ranges, rng);
    augment_strong_with(view, &params)
}
