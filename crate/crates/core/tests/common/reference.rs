//! Direct transcriptions of the metric definitions, written for clarity
//! rather than speed.

use platesr::metrics::SsimParams;
use platesr::{ImageTensor, Range};

/// Straight per-window transcription of the SSIM definition.
pub fn naive_ssim(x: &ImageTensor, y: &ImageTensor, p: &SsimParams) -> f64 {
    let (lx, ly) = (x.luma(), y.luma());
    let (h, w, k) = (x.height(), x.width(), p.window);
    let mut total = 0.0;
    let mut count = 0;
    for top in 0..=h - k {
        for left in 0..=w - k {
            let mut xw = Vec::with_capacity(k * k);
            let mut yw = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    xw.push(lx[(top + dy) * w + left + dx]);
                    yw.push(ly[(top + dy) * w + left + dx]);
                }
            }
            total += naive_components(&xw, &yw, p).iter().product::<f64>();
            count += 1;
        }
    }
    total / count as f64
}

pub fn naive_components(xw: &[f64], yw: &[f64], p: &SsimParams) -> [f64; 3] {
    let wts = p.window_weights();
    let mean = |v: &[f64]| wts.iter().zip(v).map(|(w, a)| w * a).sum::<f64>();
    let (mx, my) = (mean(xw), mean(yw));
    let var = |v: &[f64], m: f64| wts.iter().zip(v).map(|(w, a)| w * (a - m) * (a - m)).sum::<f64>();
    let (vx, vy) = (var(xw, mx), var(yw, my));
    let cov: f64 = wts.iter().zip(xw.iter().zip(yw)).map(|(w, (a, b))| w * (a - mx) * (b - my)).sum();
    let (sx, sy) = (vx.sqrt(), vy.sqrt());
    [
        (2.0 * mx * my + p.c1()) / (mx * mx + my * my + p.c1()),
        (2.0 * sx * sy + p.c2()) / (vx + vy + p.c2()),
        (cov + p.c3()) / (sx * sy + p.c3()),
    ]
}

pub fn luma_image(x: &ImageTensor) -> ImageTensor {
    ImageTensor::from_planar(x.height(), x.width(), 1, Range::Unit, x.luma()).unwrap()
}

/// Pools the luma planes and composes MS-SSIM from single-scale SSIM maps.
pub fn naive_ms_ssim(x: &ImageTensor, y: &ImageTensor, p: &SsimParams) -> f64 {
    let pool = |img: &ImageTensor| {
        let (h, w) = (img.height() / 2, img.width() / 2);
        ImageTensor::from_fn(h, w, 1, Range::Unit, |r, c, _| {
            (img.get(2 * r, 2 * c, 0)
                + img.get(2 * r, 2 * c + 1, 0)
                + img.get(2 * r + 1, 2 * c, 0)
                + img.get(2 * r + 1, 2 * c + 1, 0))
                / 4.0
        })
    };
    let (mut a, mut b) = (luma_image(x), luma_image(y));
    let m = p.ms_weights.len();
    let mut value = 1.0;
    for (j, w) in p.ms_weights.iter().enumerate() {
        let term = if j + 1 == m {
            naive_ssim(&a, &b, p)
        } else {
            mean_cs(&a, &b, p)
        };
        value *= term.max(0.0).powf(*w);
        a = pool(&a);
        b = pool(&b);
    }
    value
}

pub fn mean_cs(x: &ImageTensor, y: &ImageTensor, p: &SsimParams) -> f64 {
    let k = p.window;
    let (h, w) = (x.height(), x.width());
    let (lx, ly) = (x.luma(), y.luma());
    let mut total = 0.0;
    for top in 0..=h - k {
        for left in 0..=w - k {
            let idx = |dy: usize, dx: usize| (top + dy) * w + left + dx;
            let xw: Vec<f64> = (0..k * k).map(|i| lx[idx(i / k, i % k)]).collect();
            let yw: Vec<f64> = (0..k * k).map(|i| ly[idx(i / k, i % k)]).collect();
            let c = naive_components(&xw, &yw, p);
            total += c[1] * c[2];
        }
    }
    total / ((h - k + 1) * (w - k + 1)) as f64
}

pub fn loop_mse(x: &ImageTensor, y: &ImageTensor) -> f64 {
    let mut s = 0.0;
    for c in 0..x.channels() {
        for r in 0..x.height() {
            for col in 0..x.width() {
                let d = x.get(r, col, c) - y.get(r, col, c);
                s += d * d;
            }
        }
    }
    s / x.len() as f64
}
