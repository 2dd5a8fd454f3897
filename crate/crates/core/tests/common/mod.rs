#![allow(dead_code)]

pub mod reference;

use platesr::diffusion::{iterate_forward, loss_with_draws, normal_image, NoisePredictor, TrainableNoisePredictor};
use platesr::nn::{Param, Tensor};
use platesr::{ImageTensor, NoiseSchedule, Range};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub fn oracles() -> Value {
    let text = include_str!("../oracles/oracles.json");
    serde_json::from_str(text).expect("oracles.json parses")
}

pub fn oracle(path: &str) -> f64 {
    let root = oracles();
    let mut v = &root;
    for key in path.split('.') {
        v = &v[key];
    }
    v.as_f64().unwrap_or_else(|| panic!("no oracle value at {path}"))
}

/// Same integer hash as `gen_oracles.py`.
pub fn hash_byte(i: u64, seed: u64) -> u8 {
    let mut h = (i.wrapping_mul(2654435761) + seed * 40503 + 12345) & 0xFFFF_FFFF;
    h ^= h >> 13;
    h = (h * 1274126177) & 0xFFFF_FFFF;
    h ^= h >> 16;
    (h & 0xFF) as u8
}

pub fn pattern_bytes(h: usize, w: usize, c: usize, seed: u64) -> Vec<i64> {
    (0..h * w * c).map(|i| hash_byte(i as u64, seed) as i64).collect()
}

pub fn perturbed_bytes(base: &[i64], h: usize, w: usize, c: usize, seed: u64, spread: i64) -> Vec<i64> {
    let noise = pattern_bytes(h, w, c, seed);
    base.iter()
        .zip(noise)
        .map(|(&b, n)| (b + n % (2 * spread + 1) - spread).clamp(0, 255))
        .collect()
}

/// Bilinear blow-up of a hashed 4x4 grid, as in `gen_oracles.py`.
pub fn smooth_bytes(h: usize, w: usize, c: usize, seed: u64) -> Vec<i64> {
    let grid = pattern_bytes(4, 4, c, seed);
    let lin = |n: usize, i: usize| if n == 1 { 0.0 } else { 3.0 * i as f64 / (n - 1) as f64 };
    let mut out = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        let g = |y: usize, x: usize| grid[(ch * 4 + y) * 4 + x] as f64;
        for yi in 0..h {
            let y = lin(h, yi);
            let y0 = (y as usize).min(2);
            let fy = y - y0 as f64;
            for xi in 0..w {
                let x = lin(w, xi);
                let x0 = (x as usize).min(2);
                let fx = x - x0 as f64;
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
                let bot = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
                out.push((top * (1.0 - fy) + bot * fy).round_ties_even() as i64);
            }
        }
    }
    out
}

pub fn unit_image(bytes: &[i64], h: usize, w: usize, c: usize) -> ImageTensor {
    ImageTensor::from_planar(h, w, c, Range::Unit, bytes.iter().map(|&b| b as f64 / 255.0).collect())
        .expect("sizes agree")
}

pub fn random_unit(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, c, Range::Unit, |_, _, _| rng.random::<f64>())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-pixel affine predictor `W x + b + g t / T`, small enough for exact
/// finite-difference checks.
pub struct ToyDenoiser {
    pub weight: Param,
    pub bias: Param,
    pub time_gain: Param,
    pub timesteps: usize,
    cache: Option<(Tensor, Vec<usize>)>,
}

impl ToyDenoiser {
    pub fn new(in_channels: usize, out_channels: usize, timesteps: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut weight = Param::fan_in_uniform(&[out_channels, in_channels], in_channels, &mut r);
        let mut bias = Param::zeros(&[out_channels]);
        let mut time_gain = Param::zeros(&[out_channels]);
        for p in [&mut weight, &mut bias, &mut time_gain] {
            for v in &mut p.value {
                *v += r.random_range(-0.2..0.2);
            }
        }
        Self { weight, bias, time_gain, timesteps, cache: None }
    }

    fn out_c(&self) -> usize {
        self.bias.len()
    }

    fn in_c(&self) -> usize {
        self.weight.len() / self.out_c()
    }
}

impl NoisePredictor for ToyDenoiser {
    fn in_channels(&self) -> usize {
        self.in_c()
    }

    fn out_channels(&self) -> usize {
        self.out_c()
    }

    fn predict(&self, input: &Tensor, t: &[usize]) -> platesr::Result<Tensor> {
        let (ci, co, hw) = (self.in_c(), self.out_c(), input.spatial());
        let mut out = Tensor::zeros(input.n, co, input.h, input.w);
        for (n, &step) in t.iter().enumerate() {
            let x = input.sample(n);
            let tt = step as f32 / self.timesteps as f32;
            let y = out.sample_mut(n);
            for o in 0..co {
                for p in 0..hw {
                    let mut acc = self.bias.value[o] + self.time_gain.value[o] * tt;
                    for i in 0..ci {
                        acc += self.weight.value[o * ci + i] * x[i * hw + p];
                    }
                    y[o * hw + p] = acc;
                }
            }
        }
        Ok(out)
    }
}

impl TrainableNoisePredictor for ToyDenoiser {
    fn zero_grad(&mut self) {
        for p in [&mut self.weight, &mut self.bias, &mut self.time_gain] {
            p.grad.fill(0.0);
        }
    }

    fn forward_train(&mut self, input: &Tensor, t: &[usize]) -> platesr::Result<Tensor> {
        self.cache = Some((input.clone(), t.to_vec()));
        self.predict(input, t)
    }

    fn backward(&mut self, grad_output: &Tensor) -> platesr::Result<Tensor> {
        let (input, t) = self.cache.take().expect("forward_train first");
        let (ci, co, hw) = (self.in_c(), self.out_c(), input.spatial());
        let mut dx = Tensor::zeros(input.n, ci, input.h, input.w);
        for (n, &step) in t.iter().enumerate() {
            let x = input.sample(n);
            let g = grad_output.sample(n);
            let tt = step as f32 / self.timesteps as f32;
            let d = dx.sample_mut(n);
            for o in 0..co {
                for p in 0..hw {
                    let go = g[o * hw + p];
                    self.bias.grad[o] += go;
                    self.time_gain.grad[o] += go * tt;
                    for i in 0..ci {
                        self.weight.grad[o * ci + i] += go * x[i * hw + p];
                        d[i * hw + p] += go * self.weight.value[o * ci + i];
                    }
                }
            }
        }
        Ok(dx)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
        f("time_gain", &mut self.time_gain);
    }
}

/// Returns queued outputs verbatim, ignoring its input.
pub struct ScriptedDenoiser {
    pub channels: usize,
    pub outputs: Vec<Tensor>,
}

impl NoisePredictor for ScriptedDenoiser {
    fn in_channels(&self) -> usize {
        2 * self.channels
    }

    fn out_channels(&self) -> usize {
        self.channels
    }

    fn predict(&self, input: &Tensor, _t: &[usize]) -> platesr::Result<Tensor> {
        Ok(self
            .outputs
            .first()
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.n, self.channels, input.h, input.w)))
    }
}

impl TrainableNoisePredictor for ScriptedDenoiser {
    fn zero_grad(&mut self) {}

    fn forward_train(&mut self, input: &Tensor, t: &[usize]) -> platesr::Result<Tensor> {
        self.predict(input, t)
    }

    fn backward(&mut self, grad_output: &Tensor) -> platesr::Result<Tensor> {
        Ok(Tensor::zeros(grad_output.n, 2 * self.channels, grad_output.h, grad_output.w))
    }

    fn for_each_param(&mut self, _f: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Stacks images into the `[n, c, h, w]` layout predictors return.
pub fn batch_tensor(images: &[ImageTensor]) -> Tensor {
    let (h, w, c) = images[0].dims();
    let data = images.iter().flat_map(|i| i.values().iter().map(|&v| v as f32)).collect();
    Tensor::from_vec(images.len(), c, h, w, data)
}

/// Monte-Carlo comparison of the iterated one-step kernel with the closed form.
#[derive(Debug)]
pub struct ForwardMoments {
    /// Largest per-pixel |mean error| in standard errors.
    pub max_mean_z: f64,
    /// Largest per-pixel |variance error| in standard errors.
    pub max_var_z: f64,
    /// Pixel-pooled mean error in standard errors.
    pub pooled_mean_z: f64,
    /// Pixel-pooled variance error in standard errors.
    pub pooled_var_z: f64,
    /// Largest per-pixel relative variance error.
    pub max_var_rel: f64,
}

pub fn forward_moments(x0: &ImageTensor, t: usize, trials: usize, schedule: &NoiseSchedule, seed: u64) -> ForwardMoments {
    let n = x0.len();
    let ab = schedule.alpha_bars()[t - 1];
    let (scale, var) = (ab.sqrt(), 1.0 - ab);
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut r = rng(seed);
    for _ in 0..trials {
        let x = iterate_forward(x0, t, schedule, &mut r).unwrap();
        for (i, (&v, &m)) in x.values().iter().zip(x0.values()).enumerate() {
            let d = v - scale * m;
            sum[i] += d;
            sum_sq[i] += d * d;
        }
    }
    let k = trials as f64;
    let se_mean = (var / k).sqrt();
    // Fourth moment of a Gaussian gives Var(s^2) ~ 2 var^2 / (k - 1).
    let se_var = var * (2.0 / (k - 1.0)).sqrt();
    let (mut max_mean_z, mut max_var_z, mut max_var_rel) = (0.0f64, 0.0f64, 0.0f64);
    let (mut mean_acc, mut var_acc) = (0.0, 0.0);
    for i in 0..n {
        let mean = sum[i] / k;
        let s2 = (sum_sq[i] - k * mean * mean) / (k - 1.0);
        max_mean_z = max_mean_z.max(mean.abs() / se_mean);
        max_var_z = max_var_z.max((s2 - var).abs() / se_var);
        max_var_rel = max_var_rel.max((s2 - var).abs() / var);
        mean_acc += mean;
        var_acc += s2;
    }
    let nf = n as f64;
    ForwardMoments {
        max_mean_z,
        max_var_z,
        pooled_mean_z: (mean_acc / nf).abs() / (se_mean / nf.sqrt()),
        pooled_var_z: (var_acc / nf - var).abs() / (se_var / nf.sqrt()),
        max_var_rel,
    }
}

pub fn symmetric(seed: u64, h: usize, w: usize, c: usize) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::from_fn(h, w, c, Range::Symmetric, |_, _, _| r.random_range(-1.0..=1.0))
}

/// `(x0, conditioning, t, eps)` for a batch of `n` images.
pub type LossDraws = (Vec<ImageTensor>, Vec<ImageTensor>, Vec<usize>, Vec<ImageTensor>);

pub fn draws(seed: u64, n: usize, side: usize) -> LossDraws {
    let mut r = rng(seed);
    let x0 = (0..n).map(|i| symmetric(seed * 31 + i as u64, side, side, 3)).collect();
    let cond = (0..n).map(|i| symmetric(seed * 37 + i as u64, side, side, 3)).collect();
    let t = (0..n).map(|_| r.random_range(1..=1000)).collect();
    let eps = (0..n).map(|_| normal_image(&mut r, side, side, 3)).collect();
    (x0, cond, t, eps)
}

fn loss_of(net: &mut ToyDenoiser, d: &LossDraws, s: &NoiseSchedule) -> f64 {
    net.zero_grad();
    loss_with_draws(net, &d.0, &d.1, &d.2, &d.3, s).unwrap()
}

/// Largest relative disagreement between analytic and central-difference
/// gradients over every toy parameter.
pub fn toy_gradient_error(seed: u64) -> f64 {
    let s = NoiseSchedule::standard();
    let d = draws(seed, 2, 8);
    let mut net = ToyDenoiser::new(6, 3, 1000, seed);
    loss_of(&mut net, &d, &s);
    let mut analytic = Vec::new();
    net.for_each_param(&mut |_, p| analytic.extend(p.grad.iter().map(|&g| g as f64)));
    let h = 1e-2f32;
    let mut worst = 0.0f64;
    let mut k = 0;
    for which in 0..3 {
        let len = [net.weight.len(), net.bias.len(), net.time_gain.len()][which];
        for i in 0..len {
            let nudge = |net: &mut ToyDenoiser, delta: f32| {
                [&mut net.weight, &mut net.bias, &mut net.time_gain][which].value[i] += delta;
            };
            nudge(&mut net, h);
            let up = loss_of(&mut net, &d, &s);
            nudge(&mut net, -2.0 * h);
            let down = loss_of(&mut net, &d, &s);
            nudge(&mut net, h);
            let fd = (up - down) / (2.0 * h as f64);
            let an = analytic[k];
            worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3));
            k += 1;
        }
    }
    worst
}

