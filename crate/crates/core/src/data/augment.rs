//! Target-view augmentation and random pixel masking, both on `u8` images.

use rand::Rng;

use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    /// zero padding added on every side before the random crop
    pub crop_padding: usize,
    pub hflip_prob: f64,
    /// contrast factor drawn uniformly from `[lo, hi]`
    pub contrast: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            crop_padding: 3,
            hflip_prob: 0.5,
            contrast: (0.8, 1.25),
        }
    }
}

impl AugmentSpec {
    /// The spec that leaves every image unchanged.
    pub fn identity() -> Self {
        Self {
            crop_padding: 0,
            hflip_prob: 0.0,
            contrast: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast;
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::contract(format!(
                "flip probability {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::contract(format!(
                "contrast range [{lo}, {hi}] must be positive and ordered"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub rate: f64,
    pub fill: u8,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { rate: 0.2, fill: 0 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::contract(format!(
                "mask rate {} outside [0, 1]",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Pad-and-crop, then an optional horizontal flip, then contrast jitter.
pub fn augment_target<R: Rng + ?Sized>(
    image: &Image,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<Image> {
    spec.validate()?;
    let p = spec.crop_padding;
    let dy = rng.random_range(0..=2 * p);
    let dx = rng.random_range(0..=2 * p);
    let mut out = crop_padded(image, p, dy, dx);
    if rng.random_bool(spec.hflip_prob) {
        out = hflip(&out);
    }
    let (lo, hi) = spec.contrast;
    let factor = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    Ok(contrast(&out, factor))
}

/// Window `(dy, dx)` of the image zero-padded by `pad` on each side.
pub fn crop_padded(image: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut data = vec![0u8; image.data.len()];
    for y in 0..h {
        let sy = (y + dy).checked_sub(pad).filter(|&v| v < h);
        for x in 0..w {
            let sx = (x + dx).checked_sub(pad).filter(|&v| v < w);
            if let (Some(sy), Some(sx)) = (sy, sx) {
                data[(y * w + x) * ch..(y * w + x + 1) * ch].copy_from_slice(image.pixel(sy, sx));
            }
        }
    }
    with_data(image, data)
}

pub fn hflip(image: &Image) -> Image {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut data = Vec::with_capacity(image.data.len());
    for y in 0..h {
        for x in (0..w).rev() {
            data.extend_from_slice(&image.data[(y * w + x) * ch..(y * w + x + 1) * ch]);
        }
    }
    with_data(image, data)
}

/// `clamp(m + factor * (v - m))` with `m` the mean over all pixels and channels.
pub fn contrast(image: &Image, factor: f64) -> Image {
    let n = image.data.len().max(1) as f64;
    let mean = image.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let data = image
        .data
        .iter()
        .map(|&v| {
            (mean + factor * (v as f64 - mean))
                .round()
                .clamp(0.0, 255.0) as u8
        })
        .collect();
    with_data(image, data)
}

fn with_data(image: &Image, data: Vec<u8>) -> Image {
    Image {
        height: image.height,
        width: image.width,
        channels: image.channels,
        data,
    }
}

/// Sets each pixel (all channels together) to `spec.fill` with probability `spec.rate`.
pub fn random_mask<R: Rng + ?Sized>(image: &Image, spec: &MaskSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let mut out = image.clone();
    for px in out.data.chunks_exact_mut(image.channels) {
        if rng.random_bool(spec.rate) {
            px.fill(spec.fill);
        }
    }
    Ok(out)
}
