//! Forward noising, the conditional reverse chain, the simplified
//! noise-regression loss and full ancestral sampling.
//!
//! The chain runs at high resolution in the symmetric `[-1, 1]` range on
//! the target image. The denoiser sees the noisy state concatenated along
//! channels with the bicubic-upsampled low-resolution image.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Range};
use crate::nn::{Param, Tensor};
use crate::resample::upsample_bicubic;
use crate::schedule::NoiseSchedule;

/// Spatial ratio between target and conditioning images.
pub const SR_FACTOR: usize = 4;
/// Smallest accepted conditioning image side.
pub const MIN_LR_SIDE: usize = 12;

/// The learned noise predictor `eps_theta`.
pub trait NoisePredictor {
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// Input height and width must be multiples of this.
    fn spatial_multiple(&self) -> usize {
        1
    }
    /// Predicted noise for a batch of `[noisy, conditioning]` inputs at steps `t`.
    fn predict(&self, input: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// A predictor whose parameters can be fitted by gradient descent.
pub trait TrainableNoisePredictor: NoisePredictor {
    fn zero_grad(&mut self);
    fn forward_train(&mut self, input: &Tensor, t: &[usize]) -> Result<Tensor>;
    /// Accumulates parameter gradients; returns the input gradient.
    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor>;
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param));
}

/// Snapshots of the reverse chain, from `x_T` down to the final sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTrace {
    pub stride: usize,
    /// `(t, image in the unit range)`, strictly decreasing in `t`, ending at `t = 0`.
    pub steps: Vec<(usize, ImageTensor)>,
}

pub fn standard_normal(rng: &mut impl Rng, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

pub fn normal_image(rng: &mut impl Rng, height: usize, width: usize, channels: usize) -> ImageTensor {
    let mut img = ImageTensor::zeros(height, width, channels, Range::Unbounded);
    standard_normal(rng, img.values_mut());
    img
}

fn combine(a: &ImageTensor, ca: f64, b: &ImageTensor, cb: f64, range: Range) -> ImageTensor {
    let values = a.values().iter().zip(b.values()).map(|(x, y)| ca * x + cb * y).collect();
    let (h, w, c) = a.dims();
    ImageTensor::from_planar(h, w, c, range, values).expect("same shape")
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &NoiseSchedule) -> Result<ImageTensor> {
    x0.check_same_shape(eps, "q_sample noise")?;
    let row = schedule.lookup(t)?;
    Ok(combine(
        x0,
        row.alpha_bar.sqrt(),
        eps,
        (1.0 - row.alpha_bar).sqrt(),
        Range::Unbounded,
    ))
}

/// Applies the one-step kernel `x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) eps_s`
/// for `s = 1..=t`, with `noise` filling each `eps_s`.
pub fn iterate_forward_with(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    mut noise: impl FnMut(&mut [f64]),
) -> Result<ImageTensor> {
    schedule.check_step(t)?;
    let mut x = x0.clone().with_range(Range::Unbounded);
    let mut eps = vec![0.0; x.len()];
    for &beta in &schedule.betas()[..t] {
        noise(&mut eps);
        let (keep, add) = ((1.0 - beta).sqrt(), beta.sqrt());
        for (v, e) in x.values_mut().iter_mut().zip(&eps) {
            *v = keep * *v + add * e;
        }
    }
    Ok(x)
}

pub fn iterate_forward(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    iterate_forward_with(x0, t, schedule, |buf| standard_normal(rng, buf))
}

/// Inverts [`q_sample`] for a known or predicted noise: `(x_t - sqrt(1 - abar) eps) / sqrt(abar)`.
pub fn predict_x0_from_eps(
    x_t: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
    clamp: bool,
) -> Result<ImageTensor> {
    x_t.check_same_shape(eps, "x0 prediction noise")?;
    let row = schedule.lookup(t)?;
    let inv = 1.0 / row.alpha_bar.sqrt();
    let mut x0 = combine(
        x_t,
        inv,
        eps,
        -(1.0 - row.alpha_bar).sqrt() * inv,
        if clamp { Range::Symmetric } else { Range::Unbounded },
    );
    x0.clamp_to_range();
    Ok(x0)
}

/// Mean of `q(x_{t-1} | x_t, x0)`.
pub fn posterior_mean(
    x0: &ImageTensor,
    x_t: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    x0.check_same_shape(x_t, "posterior mean")?;
    let row = schedule.lookup(t)?;
    Ok(combine(
        x0,
        row.posterior_coef_x0,
        x_t,
        row.posterior_coef_xt,
        Range::Unbounded,
    ))
}

/// Reverse-step mean from a noise estimate:
/// `(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)`.
pub fn predicted_mean(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    x_t.check_same_shape(eps_hat, "predicted mean")?;
    let row = schedule.lookup(t)?;
    let inv = 1.0 / row.alpha.sqrt();
    Ok(combine(
        x_t,
        inv,
        eps_hat,
        -inv * row.beta / (1.0 - row.alpha_bar).sqrt(),
        Range::Unbounded,
    ))
}

/// Stacks `[a_i, b_i]` channel-wise into an NCHW `f32` batch.
pub fn stack_inputs(a: &[ImageTensor], b: &[ImageTensor]) -> Result<Tensor> {
    let first = a.first().ok_or_else(|| Error::Empty("batch".into()))?;
    let (h, w, _) = first.dims();
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} inputs vs {} conditioning images", a.len(), b.len())));
    }
    let c = first.channels() + b[0].channels();
    let mut data = Vec::with_capacity(a.len() * c * h * w);
    for (x, y) in a.iter().zip(b) {
        if x.height() != h || x.width() != w || y.height() != h || y.width() != w {
            return Err(Error::shape("batch images differ in size".to_string()));
        }
        if x.channels() + y.channels() != c {
            return Err(Error::shape("batch images differ in channel count".to_string()));
        }
        data.extend(x.values().iter().map(|&v| v as f32));
        data.extend(y.values().iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(a.len(), c, h, w, data))
}

/// Splits an NCHW batch back into images.
pub fn unstack(t: &Tensor, range: Range) -> Vec<ImageTensor> {
    (0..t.n)
        .map(|i| {
            ImageTensor::from_planar(t.h, t.w, t.c, range, t.sample(i).iter().map(|&v| v as f64).collect())
                .expect("sample length")
        })
        .collect()
}

/// Conditioning image for a low-resolution input: symmetric range, upsampled by [`SR_FACTOR`].
pub fn conditioning(lr: &ImageTensor) -> Result<ImageTensor> {
    upsample_bicubic(&lr.convert(Range::Symmetric), SR_FACTOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutcome {
    /// Mean squared noise-prediction error over every element of the batch.
    pub loss: f64,
    pub timesteps: Vec<usize>,
}

/// Simplified loss `E |eps - eps_theta(sqrt(abar) x0 + sqrt(1 - abar) eps, t)|^2` for
/// given draws. Parameter gradients are accumulated into the model.
pub fn loss_with_draws<M: TrainableNoisePredictor + ?Sized>(
    model: &mut M,
    x0: &[ImageTensor],
    cond: &[ImageTensor],
    t: &[usize],
    eps: &[ImageTensor],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if x0.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    if x0.len() != cond.len() || x0.len() != t.len() || x0.len() != eps.len() {
        return Err(Error::shape("batch components differ in length"));
    }
    let noisy = x0
        .iter()
        .zip(t)
        .zip(eps)
        .map(|((x, &s), e)| q_sample(x, s, e, schedule))
        .collect::<Result<Vec<_>>>()?;
    let input = stack_inputs(&noisy, cond)?;
    let pred = model.forward_train(&input, t)?;
    let target: Vec<f64> = eps.iter().flat_map(|e| e.values().iter().copied()).collect();
    if pred.data.len() != target.len() {
        return Err(Error::shape(format!(
            "predictor returned {} values for {} noise values",
            pred.data.len(),
            target.len()
        )));
    }
    let n = target.len() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(pred.n, pred.c, pred.h, pred.w);
    for ((g, &p), &e) in grad.data.iter_mut().zip(&pred.data).zip(&target) {
        let r = p as f64 - e;
        sum += r * r;
        *g = (2.0 * r / n) as f32;
    }
    model.backward(&grad)?;
    Ok(sum / n)
}

/// Draws `t ~ U{1..T}` per element and `eps ~ N(0, I)`, then evaluates the loss
/// against an already-upsampled conditioning batch.
pub fn training_loss_conditioned<M: TrainableNoisePredictor + ?Sized>(
    model: &mut M,
    x0: &[ImageTensor],
    cond: &[ImageTensor],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LossOutcome> {
    if x0.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let t: Vec<usize> = x0.iter().map(|_| rng.random_range(1..=schedule.timesteps())).collect();
    let eps: Vec<ImageTensor> = x0
        .iter()
        .map(|x| normal_image(rng, x.height(), x.width(), x.channels()))
        .collect();
    let loss = loss_with_draws(model, x0, cond, &t, &eps, schedule)?;
    Ok(LossOutcome { loss, timesteps: t })
}

/// Loss for paired batches: `hr` in the symmetric range, `lr` [`SR_FACTOR`] times smaller.
pub fn training_loss<M: TrainableNoisePredictor + ?Sized>(
    model: &mut M,
    hr: &[ImageTensor],
    lr: &[ImageTensor],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LossOutcome> {
    if hr.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    if hr.len() != lr.len() {
        return Err(Error::shape(format!("{} HR vs {} LR images", hr.len(), lr.len())));
    }
    let mut cond = Vec::with_capacity(lr.len());
    for (h, l) in hr.iter().zip(lr) {
        if h.height() != l.height() * SR_FACTOR || h.width() != l.width() * SR_FACTOR {
            return Err(Error::shape(format!(
                "HR {}x{} is not {SR_FACTOR}x LR {}x{}",
                h.height(),
                h.width(),
                l.height(),
                l.width()
            )));
        }
        cond.push(conditioning(l)?);
    }
    training_loss_conditioned(model, hr, &cond, schedule, rng)
}

/// One ancestral step for a batch sharing the same `t`, with upsampled conditioning.
/// `noise[i]` supplies the fresh Gaussian draw for image `i` (unused at `t = 1`).
pub fn p_sample_step_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &[ImageTensor],
    t: usize,
    cond: &[ImageTensor],
    schedule: &NoiseSchedule,
    mut noise: impl FnMut(usize, &mut [f64]),
) -> Result<Vec<ImageTensor>> {
    let row = schedule.lookup(t)?;
    let input = stack_inputs(x_t, cond)?;
    let steps = vec![t; x_t.len()];
    let eps_hat = unstack(&model.predict(&input, &steps)?, Range::Unbounded);
    let sigma = row.posterior_variance.sqrt();
    let mut out = Vec::with_capacity(x_t.len());
    for (i, (x, e)) in x_t.iter().zip(&eps_hat).enumerate() {
        let x0 = predict_x0_from_eps(x, t, e, schedule, true)?;
        let mut next = posterior_mean(&x0, x, t, schedule)?;
        if t > 1 {
            let mut z = vec![0.0; next.len()];
            noise(i, &mut z);
            for (v, zi) in next.values_mut().iter_mut().zip(&z) {
                *v += sigma * zi;
            }
        }
        out.push(next);
    }
    Ok(out)
}

/// `x_{t-1}` given `x_t` and the low-resolution conditioning image.
pub fn p_sample_step<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &ImageTensor,
    t: usize,
    lr_cond: &ImageTensor,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    let cond = conditioning(lr_cond)?;
    x_t.check_same_shape(&ImageTensor::zeros(cond.height(), cond.width(), x_t.channels(), Range::Unbounded), "reverse step state")?;
    let mut out = p_sample_step_batch(model, std::slice::from_ref(x_t), t, &[cond], schedule, |_, z| {
        standard_normal(rng, z)
    })?;
    Ok(out.pop().expect("one image"))
}

fn check_sampling_inputs<M: NoisePredictor + ?Sized>(
    model: &M,
    lr: &ImageTensor,
    trace_stride: Option<usize>,
) -> Result<()> {
    if lr.height() < MIN_LR_SIDE || lr.width() < MIN_LR_SIDE {
        return Err(Error::shape(format!(
            "low-resolution input {}x{} is below {MIN_LR_SIDE}x{MIN_LR_SIDE}",
            lr.height(),
            lr.width()
        )));
    }
    if model.in_channels() != model.out_channels() + lr.channels() {
        return Err(Error::shape(format!(
            "denoiser takes {} channels, chain supplies {} + {}",
            model.in_channels(),
            model.out_channels(),
            lr.channels()
        )));
    }
    let m = model.spatial_multiple();
    if (lr.height() * SR_FACTOR) % m != 0 || (lr.width() * SR_FACTOR) % m != 0 {
        return Err(Error::shape(format!(
            "output {}x{} is not a multiple of {m}",
            lr.height() * SR_FACTOR,
            lr.width() * SR_FACTOR
        )));
    }
    if trace_stride == Some(0) {
        return Err(Error::config("trace stride must be at least 1"));
    }
    Ok(())
}

/// Runs the full reverse chain for several images at once. Image `i` draws
/// all of its noise from `rngs[i]`, so each output depends only on its own
/// input and generator, exactly as [`super_resolve`] would produce it.
pub fn super_resolve_batch<M: NoisePredictor + ?Sized, R: Rng>(
    model: &M,
    lr: &[ImageTensor],
    schedule: &NoiseSchedule,
    rngs: &mut [R],
    trace_stride: Option<usize>,
) -> Result<(Vec<ImageTensor>, Vec<SamplerTrace>)> {
    if lr.len() != rngs.len() {
        return Err(Error::shape(format!("{} images but {} generators", lr.len(), rngs.len())));
    }
    if lr.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    for img in lr {
        check_sampling_inputs(model, img, trace_stride)?;
    }
    let cond = lr.iter().map(conditioning).collect::<Result<Vec<_>>>()?;
    let channels = model.out_channels();
    let mut x: Vec<ImageTensor> = cond
        .iter()
        .zip(rngs.iter_mut())
        .map(|(c, rng)| normal_image(rng, c.height(), c.width(), channels))
        .collect();
    let big_t = schedule.timesteps();
    let mut traces: Vec<SamplerTrace> = match trace_stride {
        Some(stride) => (0..lr.len())
            .map(|_| SamplerTrace {
                stride,
                steps: Vec::new(),
            })
            .collect(),
        None => Vec::new(),
    };
    for t in (1..=big_t).rev() {
        if let Some(stride) = trace_stride {
            if (big_t - t) % stride == 0 {
                for (trace, xi) in traces.iter_mut().zip(&x) {
                    trace.steps.push((t, xi.clone().with_range(Range::Symmetric).convert(Range::Unit)));
                }
            }
        }
        x = p_sample_step_batch(model, &x, t, &cond, schedule, |i, z| standard_normal(&mut rngs[i], z))?;
    }
    let out: Vec<ImageTensor> = x
        .into_iter()
        .map(|xi| xi.with_range(Range::Symmetric).convert(Range::Unit))
        .collect();
    for (trace, xi) in traces.iter_mut().zip(&out) {
        trace.steps.push((0, xi.clone()));
    }
    Ok((out, traces))
}

/// Samples a [`SR_FACTOR`]x larger image from `x_T ~ N(0, I)` conditioned on
/// `lr` (unit range). The result is in the unit range.
pub fn super_resolve<M: NoisePredictor + ?Sized, R: Rng>(
    model: &M,
    lr: &ImageTensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
    trace_stride: Option<usize>,
) -> Result<(ImageTensor, Option<SamplerTrace>)> {
    let mut rngs = [rng];
    let (mut out, mut traces) = super_resolve_batch(model, std::slice::from_ref(lr), schedule, &mut rngs, trace_stride)?;
    Ok((out.pop().expect("one image"), traces.pop()))
}
