//! Split-patch scheme: non-overlapping `P x P` patches, patch order row-major,
//! values inside a patch ordered (row, column, channel).

use crate::ctensor::{ComplexTensor, RealTensor};
use crate::error::{Error, Result};

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(
            "patchify",
            format!("expected [ch, H, W] or [B, ch, H, W], got {shape:?}"),
        )),
    }
}

/// `[ch, H, W] -> [S, P^2 ch]`, or batched `[B, ch, H, W] -> [B, S, P^2 ch]`.
pub fn patchify(x: &RealTensor, patch: usize) -> Result<RealTensor> {
    let (batch, ch, h, w) = image_dims(x.shape())?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "patchify",
            format!("{h}x{w} is not divisible by patch {patch}"),
        ));
    }
    let (ph, pw) = (h / patch, w / patch);
    let seq = ph * pw;
    let dim = patch * patch * ch;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let img = &src[b * ch * h * w..(b + 1) * ch * h * w];
        let dst = &mut out[b * seq * dim..(b + 1) * seq * dim];
        for py in 0..ph {
            for px in 0..pw {
                let row = (py * pw + px) * dim;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for c in 0..ch {
                            let (y, xx) = (py * patch + dy, px * patch + dx);
                            dst[row + (dy * patch + dx) * ch + c] = img[(c * h + y) * w + xx];
                        }
                    }
                }
            }
        }
    }
    let shape = if x.rank() == 3 {
        vec![seq, dim]
    } else {
        vec![batch, seq, dim]
    };
    RealTensor::new(shape, out)
}

/// Inverse of [`patchify`] for a single image.
pub fn unpatchify(
    x: &RealTensor,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<RealTensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::dim(
            "unpatchify",
            format!("{height}x{width} is not divisible by patch {patch}"),
        ));
    }
    let (ph, pw) = (height / patch, width / patch);
    let dim = patch * patch * channels;
    if x.shape() != [ph * pw, dim] {
        return Err(Error::dim(
            "unpatchify",
            format!("expected [{}, {dim}], got {:?}", ph * pw, x.shape()),
        ));
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for py in 0..ph {
        for px in 0..pw {
            let row = (py * pw + px) * dim;
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..channels {
                        let (y, xx) = (py * patch + dy, px * patch + dx);
                        out[(c * height + y) * width + xx] =
                            src[row + (dy * patch + dx) * channels + c];
                    }
                }
            }
        }
    }
    RealTensor::new(vec![channels, height, width], out)
}

pub fn patchify_complex(h: &ComplexTensor, patch: usize) -> Result<ComplexTensor> {
    ComplexTensor::new(patchify(&h.re, patch)?, patchify(&h.im, patch)?)
}

pub fn unpatchify_complex(
    h: &ComplexTensor,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<ComplexTensor> {
    ComplexTensor::new(
        unpatchify(&h.re, channels, height, width, patch)?,
        unpatchify(&h.im, channels, height, width, patch)?,
    )
}
