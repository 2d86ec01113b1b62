//! Adaptive Tan-Triggs illumination normalization.
//!
//! The chain is min-max normalization, adaptive gamma, an adaptive
//! difference of Gaussians, then contrast equalization with truncation.

mod io;

pub use io::{read_image, read_pgm, read_png, write_pgm};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Division guard used by contrast equalization.
pub const EPSILON: f64 = 1e-8;
/// Intensity standard deviation to blur scale (pixels).
pub const SIGMA0_SCALE: f64 = 10.0;
pub const SIGMA0_MIN: f64 = 0.5;
pub const SIGMA0_MAX: f64 = 4.0;
pub const GAMMA_MIN: f64 = 0.2;
/// Truncation level as a multiple of the DoG standard deviation.
pub const TAU_FACTOR: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("image size {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Parameters chosen by [`tan_triggs_pipeline`] for one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttParams {
    pub gamma: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub tau: f64,
    pub epsilon: f64,
}

fn check_unit_range(img: &GrayImage, stage: &str) -> Result<()> {
    if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Precondition(format!(
            "{stage} expects values in [0, 1], found {v}"
        )));
    }
    Ok(())
}

/// Min-max rescale to [0, 1]. A constant image maps to zeros.
pub fn normalize_image(img: &GrayImage) -> Result<GrayImage> {
    if img.data.is_empty() {
        return Err(Error::Dimension("empty image".into()));
    }
    let (lo, hi) = img.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(img.map(|_| 0.0));
    }
    Ok(img.map(|v| ((v - lo) / range).clamp(0.0, 1.0)))
}

/// `gamma = max(0.2, min(1, 1 - std))`.
pub fn gamma_for(img: &GrayImage) -> f64 {
    (1.0 - img.std()).clamp(GAMMA_MIN, 1.0)
}

pub fn adaptive_gamma(img: &GrayImage) -> Result<(GrayImage, f64)> {
    check_unit_range(img, "adaptive_gamma")?;
    let gamma = gamma_for(img);
    Ok((img.map(|v| v.powf(gamma)), gamma))
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("blur sigma must be > 0, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Half-sample symmetric reflection (`-1 -> 0`, `n -> n-1`), valid for any
/// offset since it folds with period `2n`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn blur_lines(src: &[f64], dst: &mut [f64], len: usize, stride: usize, count: usize, step: usize, k: &[f64]) {
    let r = (k.len() / 2) as i64;
    let mut line = vec![0.0; len];
    for c in 0..count {
        let base = c * step;
        for (i, v) in line.iter_mut().enumerate() {
            *v = src[base + i * stride];
        }
        for i in 0..len {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                acc += w * line[reflect(i as i64 + j as i64 - r, len)];
            }
            dst[base + i * stride] = acc;
        }
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    let k = gaussian_kernel(sigma)?;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    blur_lines(&img.data, &mut tmp, w, 1, h, w, &k);
    let mut out = vec![0.0; w * h];
    blur_lines(&tmp, &mut out, h, w, w, 1, &k);
    GrayImage::new(w, h, out)
}

/// Maps an intensity standard deviation to the inner blur scale in pixels.
pub fn sigma0_for(intensity_std: f64) -> f64 {
    (intensity_std * SIGMA0_SCALE).clamp(SIGMA0_MIN, SIGMA0_MAX)
}

/// `blur(img, s0) - blur(img, 2 s0)` with `s0` from the image's own spread.
pub fn adaptive_dog(img: &GrayImage) -> Result<(GrayImage, f64)> {
    check_unit_range(img, "adaptive_dog")?;
    let sigma0 = sigma0_for(img.std());
    let g0 = gaussian_blur(img, sigma0)?;
    let g1 = gaussian_blur(img, 2.0 * sigma0)?;
    let data = g0.data.iter().zip(&g1.data).map(|(a, b)| a - b).collect();
    Ok((GrayImage::new(img.width, img.height, data)?, sigma0))
}

/// Standardized DoG clamped to `[-tau, tau]`, before renormalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Truncated {
    pub image: GrayImage,
    pub tau: f64,
}

/// Zero-mean unit-variance standardization followed by truncation at
/// `tau = 1.5 * std(dog)`, measured on the DoG image itself.
pub fn truncate_contrast(dog: &GrayImage) -> Truncated {
    let mu = dog.mean();
    let sd = dog.std();
    let tau = (TAU_FACTOR * sd).max(EPSILON);
    let image = dog.map(|v| ((v - mu) / (sd + EPSILON)).clamp(-tau, tau));
    Truncated { image, tau }
}

pub fn adaptive_contrast_equalize(dog: &GrayImage) -> Result<GrayImage> {
    normalize_image(&truncate_contrast(dog).image)
}

pub fn tan_triggs_pipeline(img: &GrayImage) -> Result<(GrayImage, AttParams)> {
    let n = normalize_image(img)?;
    let (agc, gamma) = adaptive_gamma(&n)?;
    let (dog, sigma0) = adaptive_dog(&agc)?;
    let t = truncate_contrast(&dog);
    let out = normalize_image(&t.image)?;
    Ok((
        out,
        AttParams {
            gamma,
            sigma0,
            sigma1: 2.0 * sigma0,
            tau: t.tau,
            epsilon: EPSILON,
        },
    ))
}
