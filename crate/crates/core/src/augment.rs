//! Weak and strong stochastic augmentations.
//!
//! Images are flat `channels x height x width` vectors with values in
//! `[0, 1]`. Vectors are arbitrary real feature vectors.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modality {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl Modality {
    pub fn input_len(&self) -> usize {
        match *self {
            Modality::Vector { dim } => dim,
            Modality::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

/// Transform pool for the strong image augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageOp {
    Brightness,
    Contrast,
    Translate,
    Rotate,
    Posterize,
}

impl ImageOp {
    pub const ALL: [ImageOp; 5] = [
        ImageOp::Brightness,
        ImageOp::Contrast,
        ImageOp::Translate,
        ImageOp::Rotate,
        ImageOp::Posterize,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub modality: Modality,
    /// Gaussian noise std of the weak vector augmentation.
    pub weak_noise: f64,
    /// Gaussian noise std of the strong vector augmentation.
    pub strong_noise: f64,
    /// Fraction of coordinates zeroed by the strong vector augmentation.
    pub mask_fraction: f64,
    /// Reflect padding used by the random crop.
    pub crop_padding: usize,
    /// Number of transforms drawn from [`ImageOp::ALL`] per strong image.
    pub strong_ops: usize,
    /// Transform magnitude in `[0, 1]`.
    pub magnitude: f64,
    /// Side of the zeroed cutout square; 0 disables cutout.
    pub cutout: usize,
}

impl AugmentPolicy {
    pub fn vector(dim: usize) -> Self {
        Self {
            modality: Modality::Vector { dim },
            weak_noise: 0.05,
            strong_noise: 0.20,
            mask_fraction: 0.1,
            crop_padding: 4,
            strong_ops: 2,
            magnitude: 0.5,
            cutout: 0,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self {
            modality: Modality::Image {
                channels,
                height,
                width,
            },
            weak_noise: 0.0,
            strong_noise: 0.0,
            mask_fraction: 0.0,
            crop_padding: 4,
            strong_ops: 2,
            magnitude: 0.5,
            cutout: height / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise >= 0.0 && self.strong_noise >= self.weak_noise) {
            return Err(Error::config(format!(
                "need strong_noise >= weak_noise >= 0, got {} and {}",
                self.strong_noise, self.weak_noise
            )));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config("mask fraction must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::config("magnitude must lie in [0, 1]"));
        }
        if let Modality::Image { height, width, .. } = self.modality {
            if self.crop_padding >= height.min(width) {
                return Err(Error::config("crop padding must be smaller than the image"));
            }
            if self.cutout > height.min(width) {
                return Err(Error::config("cutout larger than the image"));
            }
            if self.strong_ops > ImageOp::ALL.len() {
                return Err(Error::config("more strong ops requested than available"));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.modality.input_len() {
            return Err(Error::input(format!(
                "input of length {} does not match {:?}",
                x.len(),
                self.modality
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

fn add_noise(x: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        x.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
}

/// Flip and crop for images, small Gaussian noise for vectors.
pub fn weak(x: &[f64], policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    policy.check_input(x)?;
    let mut out = x.to_vec();
    match policy.modality {
        Modality::Vector { .. } => add_noise(&mut out, policy.weak_noise, rng),
        Modality::Image {
            channels,
            height,
            width,
        } => {
            let shape = ImageShape {
                channels,
                height,
                width,
            };
            if rng.random_bool(0.5) {
                out = hflip(&out, shape);
            }
            out = random_crop(&out, shape, policy.crop_padding, rng);
        }
    }
    Ok(out)
}

/// Weak transform plus heavier perturbation: two random ops and cutout for
/// images, larger noise and coordinate masking for vectors.
pub fn strong(x: &[f64], policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    policy.check_input(x)?;
    let mut out = x.to_vec();
    match policy.modality {
        Modality::Vector { dim } => {
            add_noise(&mut out, policy.strong_noise, rng);
            let masked = (policy.mask_fraction * dim as f64).round() as usize;
            if masked > 0 {
                for i in sample(rng, dim, masked) {
                    out[i] = 0.0;
                }
            }
        }
        Modality::Image {
            channels,
            height,
            width,
        } => {
            let shape = ImageShape {
                channels,
                height,
                width,
            };
            if rng.random_bool(0.5) {
                out = hflip(&out, shape);
            }
            out = random_crop(&out, shape, policy.crop_padding, rng);
            for i in sample(rng, ImageOp::ALL.len(), policy.strong_ops) {
                out = apply_op(&out, shape, ImageOp::ALL[i], policy.magnitude, rng);
            }
            if policy.cutout > 0 {
                let y = rng.random_range(0..=height - policy.cutout);
                let x = rng.random_range(0..=width - policy.cutout);
                cutout(&mut out, shape, y, x, policy.cutout);
            }
        }
    }
    Ok(out)
}

/// Augments every row of `inputs` with its own stream derived from
/// `(seed, step, row)`.
pub fn augment_batch(
    inputs: ArrayView2<f64>,
    policy: &AugmentPolicy,
    strength: Strength,
    stream: Stream,
    seed: u64,
    step: u64,
) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = (0..inputs.nrows())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, stream, step, i as u64);
            let row = inputs.row(i).to_vec();
            match strength {
                Strength::Weak => weak(&row, policy, &mut rng),
                Strength::Strong => strong(&row, policy, &mut rng),
            }
        })
        .collect::<Result<_>>()?;
    let cols = inputs.ncols();
    Ok(Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("row lengths preserved"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

pub fn hflip(img: &[f64], s: ImageShape) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                out[s.idx(c, y, x)] = img[s.idx(c, y, s.width - 1 - x)];
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Crop at offset `(dy, dx)` from a reflect-padded image; offsets lie in
/// `[-padding, padding]`.
pub fn crop_with_offset(img: &[f64], s: ImageShape, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..s.channels {
        for y in 0..s.height {
            let sy = reflect(y as isize + dy, s.height);
            for x in 0..s.width {
                let sx = reflect(x as isize + dx, s.width);
                out[s.idx(c, y, x)] = img[s.idx(c, sy, sx)];
            }
        }
    }
    out
}

fn random_crop(img: &[f64], s: ImageShape, padding: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let p = padding as i64;
    let dy = rng.random_range(-p..=p) as isize;
    let dx = rng.random_range(-p..=p) as isize;
    crop_with_offset(img, s, dy, dx)
}

/// Zeroes a `size x size` square with top-left corner `(y, x)`.
pub fn cutout(img: &mut [f64], s: ImageShape, y: usize, x: usize, size: usize) {
    for c in 0..s.channels {
        for yy in y..(y + size).min(s.height) {
            for xx in x..(x + size).min(s.width) {
                img[s.idx(c, yy, xx)] = 0.0;
            }
        }
    }
}

/// Nearest-neighbour affine resampling with zero fill; `map` sends output
/// coordinates to source coordinates.
fn resample(img: &[f64], s: ImageShape, map: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..s.height {
        for x in 0..s.width {
            let (sy, sx) = map(y as f64, x as f64);
            let (sy, sx) = (sy.round(), sx.round());
            if sy < 0.0 || sx < 0.0 || sy >= s.height as f64 || sx >= s.width as f64 {
                continue;
            }
            for c in 0..s.channels {
                out[s.idx(c, y, x)] = img[s.idx(c, sy as usize, sx as usize)];
            }
        }
    }
    out
}

fn apply_op(img: &[f64], s: ImageShape, op: ImageOp, magnitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let signed = magnitude * rng.random_range(-1.0..=1.0);
    match op {
        ImageOp::Brightness => img.iter().map(|v| (v * (1.0 + 0.9 * signed)).clamp(0.0, 1.0)).collect(),
        ImageOp::Contrast => {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            img.iter()
                .map(|v| (mean + (v - mean) * (1.0 + 0.9 * signed)).clamp(0.0, 1.0))
                .collect()
        }
        ImageOp::Translate => {
            let ty = (0.3 * s.height as f64 * magnitude * rng.random_range(-1.0..=1.0)).round();
            let tx = (0.3 * s.width as f64 * signed).round();
            resample(img, s, |y, x| (y - ty, x - tx))
        }
        ImageOp::Rotate => {
            let angle = (30.0 * signed).to_radians();
            let (sin, cos) = angle.sin_cos();
            let cy = (s.height as f64 - 1.0) / 2.0;
            let cx = (s.width as f64 - 1.0) / 2.0;
            resample(img, s, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
            })
        }
        ImageOp::Posterize => {
            let bits = 8 - (magnitude * rng.random_range(0.0..=1.0) * 4.0).round() as i32;
            let levels = (1u32 << bits) as f64;
            img.iter()
                .map(|v| ((v * (levels - 1.0)).round() / (levels - 1.0)).clamp(0.0, 1.0))
                .collect()
        }
    }
}
