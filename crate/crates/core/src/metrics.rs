//! Full-reference quality metrics (MSE, PSNR, SSIM, MS-SSIM), colour
//! histograms, and the directory evaluation report.
//!
//! SSIM works on Rec. 601 luma with an 11x11 Gaussian window (sigma 1.5)
//! over the valid region. Per window, with weighted moments:
//!
//! ```text
//! l = (2 mx my + C1) / (mx^2 + my^2 + C1)
//! c = (2 sx sy + C2) / (sx^2 + sy^2 + C2)
//! s = (sxy + C3) / (sx sy + C3),   C3 = C2 / 2
//! ```
//!
//! MS-SSIM takes the mean `c*s` map at each of the first `M - 1` scales and
//! the mean full SSIM map at the coarsest, each raised to its scale weight,
//! with 2x2 average pooling between scales.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Range};

/// Standard five-scale exponents, normalised to sum to one in [`SsimParams::default`].
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
    pub ms_weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        let total: f64 = MS_SSIM_WEIGHTS.iter().sum();
        Self {
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
            ms_weights: MS_SSIM_WEIGHTS.iter().map(|w| w / total).collect(),
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    /// Row-major `window x window` weights.
    pub fn window_weights(&self) -> Vec<f64> {
        let t = self.taps();
        t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect()
    }
}

fn check_pair(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    x.check_same_shape(y, "metric inputs")?;
    if x.range() != y.range() {
        return Err(Error::shape(format!("value ranges differ: {:?} vs {:?}", x.range(), y.range())));
    }
    Ok(())
}

pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    if x.is_empty() {
        return Err(Error::Empty("image has no pixels".into()));
    }
    let sum: f64 = x.values().iter().zip(y.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// `10 log10(peak^2 / MSE)` in dB; `f64::INFINITY` for identical images.
pub fn psnr(x: &ImageTensor, y: &ImageTensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::config(format!("PSNR peak {peak} must be positive")));
    }
    let e = mse(x, y)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / e).log10() })
}

/// PSNR with the peak implied by the images' declared range.
pub fn psnr_auto(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    let peak = x
        .range()
        .peak()
        .ok_or_else(|| Error::config("PSNR needs a bounded value range"))?;
    psnr(x, y, peak)
}

/// Luminance, contrast and structure terms from weighted window moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimComponents {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

impl SsimComponents {
    fn from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, p: &SsimParams) -> Self {
        let (sx, sy) = (vx.max(0.0).sqrt(), vy.max(0.0).sqrt());
        Self {
            luminance: (2.0 * mx * my + p.c1()) / (mx * mx + my * my + p.c1()),
            contrast: (2.0 * sx * sy + p.c2()) / (vx.max(0.0) + vy.max(0.0) + p.c2()),
            structure: (cxy + p.c3()) / (sx * sy + p.c3()),
        }
    }

    pub fn ssim(&self) -> f64 {
        self.luminance * self.contrast * self.structure
    }

    pub fn contrast_structure(&self) -> f64 {
        self.contrast * self.structure
    }
}

/// The three terms for one pair of `window x window` patches.
pub fn ssim_components(xw: &[f64], yw: &[f64], params: &SsimParams) -> Result<SsimComponents> {
    let w = params.window_weights();
    if xw.len() != w.len() || yw.len() != w.len() {
        return Err(Error::shape(format!(
            "windows of {} and {} values, expected {}",
            xw.len(),
            yw.len(),
            w.len()
        )));
    }
    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&wi, &a), &b) in w.iter().zip(xw).zip(yw) {
        mx += wi * a;
        my += wi * b;
        xx += wi * a * a;
        yy += wi * b * b;
        xy += wi * a * b;
    }
    Ok(SsimComponents::from_moments(mx, my, xx - mx * mx, yy - my * my, xy - mx * my, params))
}

/// A single-channel plane.
#[derive(Debug, Clone, PartialEq)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luma_of(img: &ImageTensor) -> Self {
        let unit = match img.range() {
            Range::Byte | Range::Symmetric => img.convert(Range::Unit),
            _ => img.clone(),
        };
        Self {
            h: img.height(),
            w: img.width(),
            v: unit.luma(),
        }
    }

    /// Valid-region separable correlation with `taps`.
    fn filter(&self, taps: &[f64]) -> Plane {
        let k = taps.len();
        let (ho, wo) = (self.h + 1 - k, self.w + 1 - k);
        let mut tmp = vec![0.0; self.h * wo];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..wo {
                tmp[y * wo + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
            }
        }
        let mut out = vec![0.0; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * wo + x]).sum();
            }
        }
        Plane { h: ho, w: wo, v: out }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// 2x2 average pooling; a trailing odd row or column is dropped.
    fn pool2(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v[y * w + x] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
        Plane { h, w, v }
    }
}

/// Means of the SSIM and contrast-structure maps over the valid region.
fn ssim_means(x: &Plane, y: &Plane, params: &SsimParams) -> (f64, f64) {
    let taps = params.taps();
    let mx = x.filter(&taps);
    let my = y.filter(&taps);
    let xx = x.zip(x, |a, b| a * b).filter(&taps);
    let yy = y.zip(y, |a, b| a * b).filter(&taps);
    let xy = x.zip(y, |a, b| a * b).filter(&taps);
    let n = mx.v.len() as f64;
    let (mut full, mut cs) = (0.0, 0.0);
    for i in 0..mx.v.len() {
        let (a, b) = (mx.v[i], my.v[i]);
        let c = SsimComponents::from_moments(a, b, xx.v[i] - a * a, yy.v[i] - b * b, xy.v[i] - a * b, params);
        full += c.ssim();
        cs += c.contrast_structure();
    }
    (full / n, cs / n)
}

fn check_window(h: usize, w: usize, params: &SsimParams) -> Result<()> {
    if params.window == 0 || h < params.window || w < params.window {
        return Err(Error::shape(format!(
            "{h}x{w} image is smaller than the {0}x{0} window",
            params.window
        )));
    }
    Ok(())
}

/// Mean SSIM of the luma planes.
pub fn ssim(x: &ImageTensor, y: &ImageTensor, params: &SsimParams) -> Result<f64> {
    check_pair(x, y)?;
    check_window(x.height(), x.width(), params)?;
    Ok(ssim_means(&Plane::luma_of(x), &Plane::luma_of(y), params).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsSsim {
    pub value: f64,
    /// Scales actually used; below the configured count when the image is too small.
    pub scales: usize,
}

/// Multi-scale SSIM. If the image cannot support every configured scale,
/// the largest feasible count is used with renormalised weights and
/// reported in [`MsSsim::scales`].
pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor, params: &SsimParams) -> Result<MsSsim> {
    check_pair(x, y)?;
    check_window(x.height(), x.width(), params)?;
    if params.ms_weights.is_empty() {
        return Err(Error::config("no MS-SSIM scale weights"));
    }
    let min_side = x.height().min(x.width());
    let feasible = (0..params.ms_weights.len())
        .take_while(|&j| min_side >> j >= params.window)
        .count();
    let weights = &params.ms_weights[..feasible];
    let total: f64 = weights.iter().sum();
    let (mut px, mut py) = (Plane::luma_of(x), Plane::luma_of(y));
    let mut value = 1.0;
    for (j, &w) in weights.iter().enumerate() {
        let (full, cs) = ssim_means(&px, &py, params);
        let term = if j + 1 == feasible { full } else { cs };
        value *= term.max(0.0).powf(w / total);
        if j + 1 < feasible {
            px = px.pool2();
            py = py.pool2();
        }
    }
    Ok(MsSsim {
        value,
        scales: feasible,
    })
}

pub const HISTOGRAM_BINS: usize = 256;

/// Per-channel 256-bin counts. Unit-range values map to `round(255 v)`.
pub fn histogram(x: &ImageTensor) -> Result<Vec<[u64; HISTOGRAM_BINS]>> {
    let scale = match x.range() {
        Range::Unit => 255.0,
        Range::Byte => 1.0,
        r => return Err(Error::config(format!("histograms need unit or byte range, got {r:?}"))),
    };
    Ok((0..x.channels())
        .map(|c| {
            let mut h = [0u64; HISTOGRAM_BINS];
            for &v in x.plane(c) {
                h[((v * scale).round().clamp(0.0, 255.0)) as usize] += 1;
            }
            h
        })
        .collect())
}

/// `sum(min(hx, hy)) / max(sum hx, sum hy)` over all channels and bins.
pub fn histogram_intersection(hx: &[[u64; HISTOGRAM_BINS]], hy: &[[u64; HISTOGRAM_BINS]]) -> Result<f64> {
    if hx.len() != hy.len() {
        return Err(Error::shape(format!("{} vs {} histogram channels", hx.len(), hy.len())));
    }
    let (mut common, mut sx, mut sy) = (0u64, 0u64, 0u64);
    for (a, b) in hx.iter().zip(hy) {
        for (&p, &q) in a.iter().zip(b) {
            common += p.min(q);
            sx += p;
            sy += q;
        }
    }
    let denom = sx.max(sy);
    if denom == 0 {
        return Err(Error::Empty("histograms are empty".into()));
    }
    Ok(common as f64 / denom as f64)
}

/// `(ours - theirs) / theirs * 100`.
pub fn improvement_pct(ours: f64, theirs: f64) -> f64 {
    (ours - theirs) / theirs * 100.0
}

mod psnr_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub method: String,
    #[serde(with = "psnr_text")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub ms_ssim_scales: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub images: usize,
    /// Mean over rows with finite PSNR.
    pub psnr_db: f64,
    /// Rows with infinite PSNR left out of the mean.
    pub psnr_inf_excluded: usize,
    pub ssim: f64,
    pub ms_ssim: f64,
}

impl MethodSummary {
    pub fn from_rows<'a>(method: &str, rows: impl IntoIterator<Item = &'a MetricRow>) -> Self {
        let rows: Vec<&MetricRow> = rows.into_iter().collect();
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr_db).filter(|v| v.is_finite()).collect();
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        Self {
            method: method.to_string(),
            images: rows.len(),
            psnr_db: mean(&finite),
            psnr_inf_excluded: rows.len() - finite.len(),
            ssim: mean(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>()),
            ms_ssim: mean(&rows.iter().map(|r| r.ms_ssim).collect::<Vec<_>>()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub ours: String,
    pub baseline: String,
    pub psnr_pct: f64,
    pub ssim_pct: f64,
    pub ms_ssim_pct: f64,
}

/// Improvement of `ours` over every other summary.
pub fn improvements(summaries: &[MethodSummary], ours: &str) -> Result<Vec<Improvement>> {
    let o = summaries
        .iter()
        .find(|s| s.method == ours)
        .ok_or_else(|| Error::config(format!("no method named {ours:?} in the report")))?;
    Ok(summaries
        .iter()
        .filter(|s| s.method != ours)
        .map(|b| Improvement {
            ours: ours.to_string(),
            baseline: b.method.clone(),
            psnr_pct: improvement_pct(o.psnr_db, b.psnr_db),
            ssim_pct: improvement_pct(o.ssim, b.ssim),
            ms_ssim_pct: improvement_pct(o.ms_ssim, b.ms_ssim),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub method: String,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub summaries: Vec<MethodSummary>,
    pub improvements: Vec<Improvement>,
    pub skipped: Vec<SkippedFile>,
}

impl MetricReport {
    /// Summaries and improvements from per-image rows; methods keep the order
    /// in which they first appear.
    pub fn from_rows(rows: Vec<MetricRow>, ours: Option<&str>, skipped: Vec<SkippedFile>) -> Result<Self> {
        let mut methods: Vec<String> = Vec::new();
        for r in &rows {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
        let summaries: Vec<MethodSummary> = methods
            .iter()
            .map(|m| MethodSummary::from_rows(m, rows.iter().filter(|r| &r.method == m)))
            .collect();
        let improvements = match ours.or(methods.first().map(String::as_str)) {
            Some(o) => improvements(&summaries, o)?,
            None => Vec::new(),
        };
        Ok(Self {
            rows,
            summaries,
            improvements,
            skipped,
        })
    }

    /// Per-image rows followed by one `mean` row per method.
    pub fn to_csv(&self) -> String {
        let num = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.6}") };
        let mut out = String::from("id,method,psnr_db,ssim,ms_ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6},{:.6}", r.id, r.method, num(r.psnr_db), r.ssim, r.ms_ssim);
        }
        for s in &self.summaries {
            let _ = writeln!(out, "mean,{},{},{:.6},{:.6}", s.method, num(s.psnr_db), s.ssim, s.ms_ssim);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            rows: &'a [MetricRow],
            summaries: Vec<SummaryOut<'a>>,
            improvements: &'a [Improvement],
            skipped: &'a [SkippedFile],
        }
        #[derive(Serialize)]
        struct SummaryOut<'a> {
            method: &'a str,
            images: usize,
            #[serde(serialize_with = "nan_as_null")]
            psnr_db: f64,
            psnr_inf_excluded: usize,
            ssim: f64,
            ms_ssim: f64,
        }
        fn nan_as_null<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
            if v.is_finite() {
                s.serialize_f64(*v)
            } else {
                s.serialize_none()
            }
        }
        let out = Out {
            rows: &self.rows,
            summaries: self
                .summaries
                .iter()
                .map(|s| SummaryOut {
                    method: &s.method,
                    images: s.images,
                    psnr_db: s.psnr_db,
                    psnr_inf_excluded: s.psnr_inf_excluded,
                    ssim: s.ssim,
                    ms_ssim: s.ms_ssim,
                })
                .collect(),
            improvements: &self.improvements,
            skipped: &self.skipped,
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }

    /// Plain-text table of means and improvements, with footnotes for
    /// excluded infinite PSNR rows and reduced MS-SSIM scales.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>7} {:>10} {:>8} {:>8}", "method", "images", "psnr_db", "ssim", "ms_ssim");
        for s in &self.summaries {
            let mark = if s.psnr_inf_excluded > 0 { "*" } else { "" };
            let _ = writeln!(
                out,
                "{:<16} {:>7} {:>9.4}{mark:1} {:>8.4} {:>8.4}",
                s.method, s.images, s.psnr_db, s.ssim, s.ms_ssim
            );
        }
        for imp in &self.improvements {
            let _ = writeln!(
                out,
                "{} over {}: psnr {:+.2}%  ssim {:+.2}%  ms_ssim {:+.2}%",
                imp.ours, imp.baseline, imp.psnr_pct, imp.ssim_pct, imp.ms_ssim_pct
            );
        }
        for s in self.summaries.iter().filter(|s| s.psnr_inf_excluded > 0) {
            let _ = writeln!(
                out,
                "* {}: {} identical image(s) with infinite PSNR excluded from the mean",
                s.method, s.psnr_inf_excluded
            );
        }
        let reduced: BTreeMap<usize, usize> = self.rows.iter().fold(BTreeMap::new(), |mut m, r| {
            *m.entry(r.ms_ssim_scales).or_insert(0) += 1;
            m
        });
        let full = SsimParams::default().ms_weights.len();
        for (scales, n) in reduced.into_iter().filter(|(s, _)| *s < full) {
            let _ = writeln!(out, "note: {n} row(s) used {scales} MS-SSIM scale(s) instead of {full}");
        }
        for s in &self.skipped {
            let _ = writeln!(out, "skipped {}/{}: {}", s.method, s.id, s.reason);
        }
        out
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let (c, j) = (csv_path.as_ref(), json_path.as_ref());
        fs::write(c, self.to_csv()).map_err(|e| Error::io(c, e))?;
        fs::write(j, self.to_json()?).map_err(|e| Error::io(j, e))?;
        Ok(())
    }
}

/// All metrics for one candidate against its ground truth.
pub fn score_pair(id: &str, method: &str, gt: &ImageTensor, candidate: &ImageTensor, params: &SsimParams) -> Result<MetricRow> {
    let ms = ms_ssim(candidate, gt, params)?;
    Ok(MetricRow {
        id: id.to_string(),
        method: method.to_string(),
        psnr_db: psnr(candidate, gt, 1.0)?,
        ssim: ssim(candidate, gt, params)?,
        ms_ssim: ms.value,
        ms_ssim_scales: ms.scales,
    })
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    Ok(stems)
}

/// Scores every `<id>.png` of each candidate directory against `gt_dir`.
/// Missing or mismatched files are skipped and listed; a candidate with no
/// usable file at all is an error. Improvements are relative to `ours`
/// (default: the first candidate).
pub fn evaluate_directories(
    gt_dir: impl AsRef<Path>,
    candidates: &[(String, PathBuf)],
    ours: Option<&str>,
    params: &SsimParams,
) -> Result<MetricReport> {
    let gt_dir = gt_dir.as_ref();
    let ids = png_stems(gt_dir)?;
    if ids.is_empty() {
        return Err(Error::Empty(format!("no PNG images in {}", gt_dir.display())));
    }
    if candidates.is_empty() {
        return Err(Error::config("no candidate directories given"));
    }
    let mut gts = BTreeMap::new();
    for id in &ids {
        gts.insert(id.clone(), ImageTensor::load_png(gt_dir.join(format!("{id}.png")))?);
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (method, dir) in candidates {
        let before = rows.len();
        for id in &ids {
            let path = dir.join(format!("{id}.png"));
            let skip = |reason: String| SkippedFile {
                method: method.clone(),
                id: id.clone(),
                reason,
            };
            if !path.is_file() {
                skipped.push(skip("missing".into()));
                continue;
            }
            let cand = match ImageTensor::load_png(&path) {
                Ok(c) => c,
                Err(e) => {
                    skipped.push(skip(e.to_string()));
                    continue;
                }
            };
            let gt = &gts[id];
            if cand.dims() != gt.dims() {
                skipped.push(skip(format!(
                    "{}x{} does not match ground truth {}x{}",
                    cand.height(),
                    cand.width(),
                    gt.height(),
                    gt.width()
                )));
                continue;
            }
            rows.push(score_pair(id, method, gt, &cand, params)?);
        }
        if rows.len() == before {
            return Err(Error::Empty(format!(
                "{method} ({}) shares no usable image with {}",
                dir.display(),
                gt_dir.display()
            )));
        }
    }
    MetricReport::from_rows(rows, ours, skipped)
}
