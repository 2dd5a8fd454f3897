//! Separable bicubic resampling (Catmull-Rom, `a = -0.5`) with edge clamping.
//!
//! When shrinking, the kernel is stretched by the scale factor so every
//! input pixel contributes (antialiased resize, as in the usual image
//! libraries). Taps are normalised to sum to one.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Name recorded in dataset manifests.
pub const KERNEL_NAME: &str = "bicubic-catmull-rom";

const A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output index: the list of `(input index, weight)` taps.
fn taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut row: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic((j as f64 + 0.5 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match row.iter_mut().find(|(k, _)| *k == idx) {
                    Some((_, acc)) => *acc += w,
                    None => row.push((idx, w)),
                }
            }
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            for (_, w) in &mut row {
                *w /= total;
            }
            row
        })
        .collect()
}

/// Resizes to `out_h x out_w`, clamping to the image's declared range.
pub fn resize_bicubic(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (h, w, ch) = img.dims();
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let mut out = ImageTensor::zeros(out_h, out_w, ch, img.range());
    let mut tmp = vec![0.0; h * out_w];
    for c in 0..ch {
        let src = img.plane(c);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, t) in tx.iter().enumerate() {
                tmp[y * out_w + x] = t.iter().map(|&(k, wt)| row[k] * wt).sum();
            }
        }
        let dst = out.plane_mut(c);
        for (y, t) in ty.iter().enumerate() {
            for x in 0..out_w {
                dst[y * out_w + x] = t.iter().map(|&(k, wt)| tmp[k * out_w + x] * wt).sum();
            }
        }
    }
    out.clamp_to_range();
    out
}

/// Bicubic downsampling by an integer factor.
pub fn degrade(hr: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(Error::config("degradation factor must be at least 1"));
    }
    let (h, w, _) = hr.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by {factor}")));
    }
    if factor == 1 {
        return Ok(hr.clone());
    }
    Ok(resize_bicubic(hr, h / factor, w / factor))
}

/// Bicubic upsampling by an integer factor.
pub fn upsample_bicubic(lr: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(Error::config("upsampling factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(lr.clone());
    }
    Ok(resize_bicubic(lr, lr.height() * factor, lr.width() * factor))
}
