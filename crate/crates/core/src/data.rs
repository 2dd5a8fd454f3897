//! Paired LR/HR datasets: loading, deterministic splitting, rotation
//! augmentation and a synthetic plate generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Range};
use crate::resample::{degrade, resize_bicubic, KERNEL_NAME};

/// Side length of high-resolution samples.
pub const HR_SIDE: usize = 192;
/// Rotation angles (degrees) used for training-time augmentation.
pub const AUGMENT_ANGLES: [f64; 6] = [-15.0, -10.0, -5.0, 5.0, 10.0, 15.0];
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub origin: Origin,
}

impl PairedSample {
    /// Pairs `hr` with its bicubic degradation.
    pub fn from_hr(id: impl Into<String>, hr: ImageTensor, factor: usize, origin: Origin) -> Result<Self> {
        let lr = degrade(&hr, factor)?;
        Ok(Self {
            id: id.into(),
            hr,
            lr,
            origin,
        })
    }

    /// Rotates the HR image and re-derives the LR image from it.
    pub fn rotated(&self, angle_degrees: f64, factor: usize) -> Result<Self> {
        let hr = augment_rotate(&self.hr, angle_degrees);
        Self::from_hr(format!("{}@rot{angle_degrees:+}", self.id), hr, factor, Origin::Augmented)
    }
}

/// How to divide the corpus into train and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// `floor(ratio * N)` training samples.
    Ratio(f64),
    /// An exact number of training samples.
    TrainCount(usize),
}

impl SplitRule {
    pub fn train_len(&self, total: usize) -> Result<usize> {
        match *self {
            SplitRule::Ratio(r) if (0.0..=1.0).contains(&r) => Ok((r * total as f64).floor() as usize),
            SplitRule::Ratio(r) => Err(Error::config(format!("split ratio {r} outside [0, 1]"))),
            SplitRule::TrainCount(n) if n <= total => Ok(n),
            SplitRule::TrainCount(n) => Err(Error::config(format!(
                "train count {n} exceeds the {total} available images"
            ))),
        }
    }
}

/// Assigns each id to a split: ids are sorted, shuffled by `seed`, and the
/// first `rule.train_len` become training samples.
pub fn split_ids(ids: &[String], rule: SplitRule, seed: u64) -> Result<BTreeMap<String, Split>> {
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::config("duplicate sample ids"));
    }
    let n_train = rule.train_len(order.len())?;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if i < n_train { Split::Train } else { Split::Test }))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    pub split: BTreeMap<String, Split>,
    pub split_seed: u64,
    pub factor: usize,
}

impl PairedDataset {
    /// Builds a dataset from HR images, splitting by `rule`.
    pub fn from_hr(
        images: Vec<(String, ImageTensor, Origin)>,
        rule: SplitRule,
        split_seed: u64,
        factor: usize,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("no images to build a dataset from".into()));
        }
        let ids: Vec<String> = images.iter().map(|(id, _, _)| id.clone()).collect();
        let split = split_ids(&ids, rule, split_seed)?;
        let samples = images
            .into_iter()
            .map(|(id, hr, origin)| PairedSample::from_hr(id, hr, factor, origin))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            split,
            split_seed,
            factor,
        })
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split.get(id).copied()
    }

    pub fn in_split(&self, which: Split) -> impl Iterator<Item = &PairedSample> {
        self.samples.iter().filter(move |s| self.split_of(&s.id) == Some(which))
    }

    pub fn train(&self) -> Vec<&PairedSample> {
        self.in_split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&PairedSample> {
        self.in_split(Split::Test).collect()
    }

    /// Adds rotated copies of every training sample, assigned to the train split.
    pub fn with_augmented_train(mut self, angles: &[f64]) -> Result<Self> {
        let mut extra = Vec::new();
        for s in self.in_split(Split::Train) {
            for &a in angles.iter().filter(|a| **a != 0.0) {
                extra.push(s.rotated(a, self.factor)?);
            }
        }
        for s in extra {
            self.split.insert(s.id.clone(), Split::Train);
            self.samples.push(s);
        }
        Ok(self)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            samples: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    split: self.split[&s.id],
                    origin: s.origin,
                })
                .collect(),
            split_seed: self.split_seed,
            factor: self.factor,
            kernel: KERNEL_NAME.to_string(),
            hr_side: self.samples.first().map_or(HR_SIDE, |s| s.hr.height()),
        }
    }

    /// Writes `hr/<id>.png`, `lr/<id>.png` and `manifest.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        for sub in ["hr", "lr"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for s in &self.samples {
            s.hr.save_png(dir.join("hr").join(format!("{}.png", s.id)))?;
            s.lr.save_png(dir.join("lr").join(format!("{}.png", s.id)))?;
        }
        let manifest = self.manifest();
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Reads a dataset written by [`PairedDataset::write`]. LR images are
    /// regenerated from the HR files with the recorded factor.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.kernel != KERNEL_NAME {
            return Err(Error::config(format!(
                "dataset was degraded with {:?}, this build uses {KERNEL_NAME:?}",
                manifest.kernel
            )));
        }
        if manifest.samples.is_empty() {
            return Err(Error::Empty(format!("{} lists no samples", path.display())));
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        let mut split = BTreeMap::new();
        for e in &manifest.samples {
            let hr = ImageTensor::load_png(dir.join("hr").join(format!("{}.png", e.id)))?;
            samples.push(PairedSample::from_hr(e.id.clone(), hr, manifest.factor, e.origin)?);
            split.insert(e.id.clone(), e.split);
        }
        Ok(Self {
            samples,
            split,
            split_seed: manifest.split_seed,
            factor: manifest.factor,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
    pub split_seed: u64,
    pub factor: usize,
    pub kernel: String,
    pub hr_side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub split: SplitRule,
    pub split_seed: u64,
    pub factor: usize,
    pub origin: Origin,
    pub side: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            split: SplitRule::Ratio(0.92),
            split_seed: 0,
            factor: 4,
            origin: Origin::Real,
            side: HR_SIDE,
        }
    }
}

/// Files that could not be used, and files that were cropped or resized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub skipped: Vec<(PathBuf, String)>,
    pub resized: Vec<PathBuf>,
}

/// Center-crops to a square and resizes to `side x side`.
pub fn fit_to_side(img: &ImageTensor, side: usize) -> ImageTensor {
    let (h, w, _) = img.dims();
    if h == side && w == side {
        return img.clone();
    }
    let s = h.min(w);
    let square = img.crop((h - s) / 2, (w - s) / 2, s, s).expect("crop inside image");
    if s == side {
        square
    } else {
        resize_bicubic(&square, side, side)
    }
}

/// Loads every `*.png` in `hr_dir` (sorted by name; the id is the file stem).
pub fn load_dataset(hr_dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<(PairedDataset, LoadReport)> {
    let hr_dir = hr_dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(hr_dir)
        .map_err(|e| Error::io(hr_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut report = LoadReport::default();
    let mut images = Vec::new();
    for p in paths {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match ImageTensor::load_png(&p) {
            Ok(img) => {
                let fitted = fit_to_side(&img, opts.side);
                if fitted.dims() != img.dims() {
                    warn!(
                        "{}: {}x{} resized to {}x{}",
                        p.display(),
                        img.height(),
                        img.width(),
                        opts.side,
                        opts.side
                    );
                    report.resized.push(p.clone());
                }
                images.push((id, fitted, opts.origin));
            }
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                report.skipped.push((p, e.to_string()));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Empty(format!("no decodable PNG images in {}", hr_dir.display())));
    }
    let ds = PairedDataset::from_hr(images, opts.split, opts.split_seed, opts.factor)?;
    Ok((ds, report))
}

/// Bilinear rotation about the image center; samples falling outside the
/// frame take the nearest edge value.
pub fn augment_rotate(img: &ImageTensor, angle_degrees: f64) -> ImageTensor {
    if angle_degrees == 0.0 {
        return img.clone();
    }
    let (h, w, ch) = img.dims();
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = ImageTensor::zeros(h, w, ch, img.range());
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cy + cos * dy - sin * dx).clamp(0.0, h as f64 - 1.0);
            let sx = (cx + sin * dy + cos * dx).clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..ch {
                let p = img.plane(c);
                let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
                let top = lerp(p[y0 * w + x0], p[y0 * w + x1], fx);
                let bottom = lerp(p[y1 * w + x0], p[y1 * w + x1], fx);
                out.plane_mut(c)[y * w + x] = lerp(top, bottom, fy);
            }
        }
    }
    out.clamp_to_range();
    out
}

/// Layout and appearance knobs for [`synth_plate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateSpec {
    pub side: usize,
    pub border_px: usize,
    pub digits: usize,
    pub letters: usize,
    pub noise_sigma: f64,
    /// Amplitude of the smooth illumination variation.
    pub shading: f64,
}

impl Default for PlateSpec {
    fn default() -> Self {
        Self {
            side: HR_SIDE,
            border_px: 5,
            digits: 4,
            letters: 3,
            noise_sigma: 0.01,
            shading: 0.06,
        }
    }
}

// 5x7 bitmaps, one byte per row, most significant of the low five bits on the left.
const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

const LETTERS: [[u8; 7]; 12] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E], // D
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F], // G
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11], // N
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // V
];

/// Coverage mask with soft-edged primitives; each primitive keeps the max.
struct Canvas {
    side: usize,
    ink: Vec<f64>,
}

impl Canvas {
    fn new(side: usize) -> Self {
        Self {
            side,
            ink: vec![0.0; side * side],
        }
    }

    fn rect(&mut self, y0: f64, x0: f64, y1: f64, x1: f64) {
        let s = self.side;
        let clip = |v: f64| (v.max(0.0) as usize).min(s);
        for y in clip(y0.floor())..clip(y1.ceil()) {
            let cy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
            for x in clip(x0.floor())..clip(x1.ceil()) {
                let cx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                let v = &mut self.ink[y * s + x];
                *v = v.max(cy * cx);
            }
        }
    }

    fn frame(&mut self, inset: f64, width: f64) {
        let far = self.side as f64 - inset;
        self.rect(inset, inset, inset + width, far);
        self.rect(far - width, inset, far, far);
        self.rect(inset, inset, far, inset + width);
        self.rect(inset, far - width, far, far);
    }

    /// Round-capped stroke from `a` to `b`, points given as `(y, x)`.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64) {
        let s = self.side;
        let lo_y = (a.0.min(b.0) - radius - 1.0).max(0.0) as usize;
        let lo_x = (a.1.min(b.1) - radius - 1.0).max(0.0) as usize;
        let hi_y = ((a.0.max(b.0) + radius + 2.0).max(0.0) as usize).min(s);
        let hi_x = ((a.1.max(b.1) + radius + 2.0).max(0.0) as usize).min(s);
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dy * dy + dx * dx).max(1e-12);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let u = (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0);
                let d = ((py - a.0 - u * dy).powi(2) + (px - a.1 - u * dx).powi(2)).sqrt();
                let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
                let v = &mut self.ink[y * s + x];
                *v = v.max(cov);
            }
        }
    }

    fn bitmap(&mut self, glyph: &[u8; 7], top: f64, left: f64, cell_h: f64, cell_w: f64) {
        for (r, bits) in glyph.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    let y = top + r as f64 * cell_h;
                    let x = left + col as f64 * cell_w;
                    self.rect(y, x, y + cell_h, x + cell_w);
                }
            }
        }
    }

    /// Cursive-looking glyph: a couple of quadratic curves plus optional dots.
    fn stroke_glyph(&mut self, rng: &mut impl Rng, top: f64, left: f64, h: f64, w: f64, radius: f64) {
        let pt = |rng: &mut ChaCha8Rng, fy: (f64, f64)| {
            (top + h * rng.random_range(fy.0..fy.1), left + w * rng.random_range(0.1..0.9))
        };
        let mut local = ChaCha8Rng::seed_from_u64(rng.random());
        let curves = local.random_range(1..=3);
        for _ in 0..curves {
            let p0 = pt(&mut local, (0.2, 0.9));
            let p1 = pt(&mut local, (0.0, 1.0));
            let p2 = pt(&mut local, (0.3, 0.95));
            let mut prev = p0;
            for k in 1..=12 {
                let u = k as f64 / 12.0;
                let q = (
                    (1.0 - u).powi(2) * p0.0 + 2.0 * u * (1.0 - u) * p1.0 + u * u * p2.0,
                    (1.0 - u).powi(2) * p0.1 + 2.0 * u * (1.0 - u) * p1.1 + u * u * p2.1,
                );
                self.segment(prev, q, radius);
                prev = q;
            }
        }
        for _ in 0..local.random_range(0..=2) {
            let c = pt(&mut local, (0.0, 0.15));
            self.segment(c, c, radius * 1.1);
        }
    }
}

/// Renders a synthetic two-row plate: cursive-like glyphs on top, Latin
/// digits and letters below, separated by rules inside a border.
pub fn synth_plate(rng: &mut impl Rng, spec: &PlateSpec) -> ImageTensor {
    let n = spec.side;
    let sf = n as f64 / HR_SIDE as f64;
    let mut canvas = Canvas::new(n);
    let border = spec.border_px as f64 * sf;
    let inset = 4.0 * sf;
    canvas.frame(inset, border);
    let inner0 = inset + border;
    let inner1 = n as f64 - inner0;
    let mid_y = n as f64 * rng.random_range(0.46..0.54);
    let split_x = inner0 + (inner1 - inner0) * rng.random_range(0.56..0.62);
    let rule = 2.0 * sf;
    canvas.rect(mid_y - rule / 2.0, inner0, mid_y + rule / 2.0, inner1);
    canvas.rect(inner0, split_x - rule / 2.0, inner1, split_x + rule / 2.0);

    let pad = 5.0 * sf;
    let regions = [
        (inner0 + pad, mid_y - pad, inner0 + pad, split_x - pad, spec.digits),
        (inner0 + pad, mid_y - pad, split_x + pad, inner1 - pad, spec.letters),
        (mid_y + pad, inner1 - pad, inner0 + pad, split_x - pad, spec.digits),
        (mid_y + pad, inner1 - pad, split_x + pad, inner1 - pad, spec.letters),
    ];
    let stroke = rng.random_range(1.6..2.4) * sf;
    for (row, &(y0, y1, x0, x1, count)) in regions.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let slot = (x1 - x0) / count as f64;
        for i in 0..count {
            let left = x0 + slot * i as f64;
            if row < 2 {
                canvas.stroke_glyph(rng, y0, left + slot * 0.1, y1 - y0, slot * 0.8, stroke);
            } else {
                let glyph = if row == 2 {
                    &DIGITS[rng.random_range(0..DIGITS.len())]
                } else {
                    &LETTERS[rng.random_range(0..LETTERS.len())]
                };
                let cell_w = (slot * 0.75 / 5.0).min((y1 - y0) / 7.0);
                let cell_h = (y1 - y0) * 0.9 / 7.0;
                let gx = left + (slot - 5.0 * cell_w) / 2.0;
                canvas.bitmap(glyph, y0 + (y1 - y0) * 0.05, gx, cell_h, cell_w);
            }
        }
    }

    let bg: [f64; 3] = {
        let base = rng.random_range(0.82..0.96);
        [base, base - rng.random_range(0.0..0.04), base - rng.random_range(0.0..0.1)]
    };
    let ink: [f64; 3] = {
        let base = rng.random_range(0.05..0.2);
        [base, base, base + rng.random_range(0.0..0.08)]
    };
    let (fy, fx): (f64, f64) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (py, px): (f64, f64) = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
    let mut img = ImageTensor::zeros(n, n, 3, Range::Unit);
    for y in 0..n {
        for x in 0..n {
            let u = (y as f64 / n as f64, x as f64 / n as f64);
            let shade = spec.shading * ((fy * 3.14 * u.0 + py).sin() * (fx * 3.14 * u.1 + px).cos());
            let m = canvas.ink[y * n + x];
            for c in 0..3 {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma;
                img.set(y, x, c, bg[c] * (1.0 - m) + ink[c] * m + shade + noise);
            }
        }
    }
    img.clamp_to_range();
    img
}

/// A corpus of `count` plates with ids `plate_0000`, `plate_0001`, ...;
/// plate `i` is drawn from its own generator seeded by `(seed, i)`.
pub fn synth_corpus(count: usize, seed: u64, spec: &PlateSpec) -> Vec<(String, ImageTensor)> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (format!("plate_{i:04}"), synth_plate(&mut rng, spec))
        })
        .collect()
}
