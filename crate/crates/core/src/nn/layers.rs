use rand::Rng;

use super::{gemm, gemm_strided, join, Module, Param, Tensor};

/// Target size (in floats) of one unfolded convolution band.
const BAND_FLOATS: usize = 1 << 16;

/// Valid output columns `[lo, hi)` for kernel offset `k` along an axis of length `len`.
#[inline]
fn valid_span(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix = o * stride + k - pad must lie in [0, len)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[cout, cin * kernel * kernel]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::fan_in_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
            bias: Param::zeros(&[cout]),
            input: None,
        }
    }

    /// Same-size 3x3 convolution.
    pub fn same3(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(cin, cout, 3, 1, 1, rng)
    }

    pub fn pointwise(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(cin, cout, 1, 1, 0, rng)
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
        self
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds output rows `band` into `col` (`cin*k*k` rows of `band.len() * wo`).
    fn im2col(&self, x: &[f32], h: usize, w: usize, wo: usize, band: (usize, usize), col: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ho = band.1;
        let bplane = (band.1 - band.0) * wo;
        for ci in 0..self.cin {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_span(ho, h, ky, s, p);
                for kx in 0..k {
                    let (ox0, ox1) = valid_span(wo, w, kx, s, p);
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * bplane..(row + 1) * bplane];
                    for oy in band.0..band.1 {
                        let drow = &mut dst[(oy - band.0) * wo..(oy - band.0 + 1) * wo];
                        if oy < oy0 || oy >= oy1 || ox0 >= ox1 {
                            drow.fill(0.0);
                            continue;
                        }
                        drow[..ox0].fill(0.0);
                        drow[ox1..].fill(0.0);
                        let iy = oy * s + ky - p;
                        let srow = &src[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            drow[ox0..ox1].copy_from_slice(&srow[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] = srow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2d::im2col`] for one band, accumulating into `dx`.
    fn col2im(&self, col: &[f32], h: usize, w: usize, wo: usize, band: (usize, usize), dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let ho = band.1;
        let bplane = (band.1 - band.0) * wo;
        for ci in 0..self.cin {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_span(ho, h, ky, s, p);
                for kx in 0..k {
                    let (ox0, ox1) = valid_span(wo, w, kx, s, p);
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * bplane..(row + 1) * bplane];
                    for oy in oy0.max(band.0)..oy1 {
                        let iy = oy * s + ky - p;
                        let drow = &mut dst[iy * w..(iy + 1) * w];
                        let srow = &src[(oy - band.0) * wo..(oy - band.0 + 1) * wo];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            for (d, v) in drow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&srow[ox0..ox1]) {
                                *d += v;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox * s + kx - p] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output row bands sized so one unfolded band stays cache resident.
    fn bands(&self, ho: usize, wo: usize) -> impl Iterator<Item = (usize, usize)> {
        let kk = self.cin * self.kernel * self.kernel;
        let rows = (BAND_FLOATS / (kk * wo).max(1)).clamp(1, ho.max(1));
        (0..ho).step_by(rows).map(move |r| (r, (r + rows).min(ho)))
    }

    fn band_capacity(&self, ho: usize, wo: usize) -> usize {
        let kk = self.cin * self.kernel * self.kernel;
        self.bands(ho, wo).map(|(a, b)| (b - a) * wo * kk).max().unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.output_hw(x.h, x.w);
        let kk = self.cin * self.kernel * self.kernel;
        let plane = ho * wo;
        let mut out = Tensor::zeros(x.n, self.cout, ho, wo);
        let pointwise = self.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![0.0; self.band_capacity(ho, wo)] };
        for i in 0..x.n {
            let dst = out.sample_mut(i);
            for (co, b) in self.bias.value.iter().enumerate() {
                dst[co * plane..(co + 1) * plane].fill(*b);
            }
            if pointwise {
                gemm(self.cout, kk, plane, &self.weight.value, false, x.sample(i), false, dst, true);
                continue;
            }
            for band in self.bands(ho, wo) {
                let bn = (band.1 - band.0) * wo;
                self.im2col(x.sample(i), x.h, x.w, wo, band, &mut col);
                // dst[:, band] += W * col, output rows strided by the full plane
                gemm_strided(
                    self.cout,
                    kk,
                    bn,
                    (&self.weight.value, kk, 1),
                    (&col, bn, 1),
                    (&mut dst[band.0 * wo..], plane),
                    true,
                );
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without forward_train");
        let (ho, wo) = (dy.h, dy.w);
        let kk = self.cin * self.kernel * self.kernel;
        let plane = ho * wo;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let pointwise = self.is_pointwise();
        let cap = if pointwise { 0 } else { self.band_capacity(ho, wo) };
        let mut col = vec![0.0; cap];
        let mut dcol = vec![0.0; cap];
        for i in 0..x.n {
            let g = dy.sample(i);
            for co in 0..self.cout {
                self.bias.grad[co] += g[co * plane..(co + 1) * plane].iter().sum::<f32>();
            }
            if pointwise {
                gemm(self.cout, plane, kk, g, false, x.sample(i), true, &mut self.weight.grad, true);
                gemm(kk, self.cout, plane, &self.weight.value, true, g, false, dx.sample_mut(i), false);
                continue;
            }
            let bands: Vec<_> = self.bands(ho, wo).collect();
            for band in bands {
                let bn = (band.1 - band.0) * wo;
                let gb = &g[band.0 * wo..];
                self.im2col(x.sample(i), x.h, x.w, wo, band, &mut col);
                // dW += g[:, band] * col^T
                gemm_strided(
                    self.cout,
                    bn,
                    kk,
                    (gb, plane, 1),
                    (&col, 1, bn),
                    (&mut self.weight.grad, kk),
                    true,
                );
                // dcol = W^T * g[:, band]
                gemm_strided(
                    kk,
                    self.cout,
                    bn,
                    (&self.weight.value, 1, kk),
                    (gb, plane, 1),
                    (&mut dcol, bn),
                    false,
                );
                self.col2im(&dcol, x.h, x.w, wo, band, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels in {groups} groups");
        Self {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let per_group = self.channels / self.groups * x.spatial();
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.n * self.groups);
        for chunk in xhat.data.chunks_mut(per_group) {
            let mean = sum_f64(chunk, |v| v) / per_group as f64;
            let m32 = mean as f32;
            let var = sum_f64(chunk, |v| (v - m32) * (v - m32)) / per_group as f64;
            let r = (1.0 / (var + self.eps as f64).sqrt()) as f32;
            for v in chunk.iter_mut() {
                *v = (*v - m32) * r;
            }
            rstd.push(r);
        }
        (xhat, rstd)
    }

    fn affine(&self, xhat: &Tensor) -> Tensor {
        let mut y = xhat.clone();
        self.affine_in_place(&mut y);
        y
    }

    fn affine_in_place(&self, y: &mut Tensor) {
        let plane = y.spatial();
        for i in 0..y.n {
            let s = y.sample_mut(i);
            for c in 0..self.channels {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for v in &mut s[c * plane..(c + 1) * plane] {
                    *v = *v * g + b;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (mut y, _) = self.normalize(x);
        self.affine_in_place(&mut y);
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (xhat, rstd) = self.normalize(x);
        let y = self.affine(&xhat);
        self.cache = Some((xhat, rstd));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, rstd) = self.cache.take().expect("group norm backward without forward_train");
        let plane = dy.spatial();
        let cpg = self.channels / self.groups;
        let m = (cpg * plane) as f64;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        let mut sg = vec![0.0f64; self.channels];
        let mut sgx = vec![0.0f64; self.channels];
        for i in 0..dy.n {
            let (g, xh) = (dy.sample(i), xhat.sample(i));
            for c in 0..self.channels {
                let r = c * plane..(c + 1) * plane;
                sg[c] = sum_f64(&g[r.clone()], |v| v);
                sgx[c] = dot_f64(&g[r.clone()], &xh[r]);
                self.beta.grad[c] += sg[c] as f32;
                self.gamma.grad[c] += sgx[c] as f32;
            }
            let out = dx.sample_mut(i);
            for grp in 0..self.groups {
                let chans = grp * cpg..(grp + 1) * cpg;
                let gam = |c: usize| self.gamma.value[c] as f64;
                let mean_d = (chans.clone().map(|c| gam(c) * sg[c]).sum::<f64>() / m) as f32;
                let mean_dx = (chans.clone().map(|c| gam(c) * sgx[c]).sum::<f64>() / m) as f32;
                let rs = rstd[i * self.groups + grp];
                for c in chans {
                    let r = c * plane..(c + 1) * plane;
                    let gc = self.gamma.value[c];
                    for ((o, &gv), &x) in out[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                        *o = rs * (gv * gc - mean_d - x * mean_dx);
                    }
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
    }
}

/// Dense layer over `[n, features]` tensors (`h = w = 1`).
#[derive(Debug, Clone)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    /// `[fout, fin]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Self {
            fin,
            fout,
            weight: Param::fan_in_uniform(&[fout, fin], fin, rng),
            bias: Param::zeros(&[fout]),
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.fin, "linear input features");
        let mut y = Tensor::zeros(x.n, self.fout, 1, 1);
        for row in y.data.chunks_mut(self.fout) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(x.n, self.fin, self.fout, &x.data, false, &self.weight.value, true, &mut y.data, true);
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without forward_train");
        for row in dy.data.chunks(self.fout) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        gemm(self.fout, x.n, self.fin, &dy.data, true, &x.data, false, &mut self.weight.grad, true);
        let mut dx = Tensor::zeros(x.n, self.fin, 1, 1);
        gemm(x.n, self.fout, self.fin, &dy.data, false, &self.weight.value, false, &mut dx.data, false);
        dx
    }
}

impl Module for Linear {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[inline]
/// Sum in blocks of `f32` partials folded into an `f64` total.
fn sum_f64(xs: &[f32], f: impl Fn(f32) -> f32) -> f64 {
    let mut total = 0.0f64;
    for block in xs.chunks(256) {
        let mut lanes = [0.0f32; 16];
        let mut it = block.chunks_exact(16);
        for c in &mut it {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += f(v);
            }
        }
        let tail: f32 = it.remainder().iter().map(|&v| f(v)).sum();
        total += lanes.iter().map(|&l| l as f64).sum::<f64>() + tail as f64;
    }
    total
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut total = 0.0f64;
    for (ba, bb) in a.chunks(256).zip(b.chunks(256)) {
        let mut lanes = [0.0f32; 16];
        let (ca, cb) = (ba.chunks_exact(16), bb.chunks_exact(16));
        let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
        for (x, y) in ca.zip(cb) {
            for k in 0..16 {
                lanes[k] += x[k] * y[k];
            }
        }
        total += lanes.iter().map(|&l| l as f64).sum::<f64>() + tail as f64;
    }
    total
}

/// `exp` by range reduction and a degree-6 polynomial; relative error
/// around `2e-7` over the clamped domain, and vectorizable.
#[inline(always)]
pub(crate) fn fast_exp(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    // round to nearest via the 1.5 * 2^23 shift, which stays vectorizable
    let n = (x * std::f32::consts::LOG2_E + 12_582_912.0) - 12_582_912.0;
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_889)))));
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

#[inline(always)]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

pub fn silu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in &mut y.data {
        *v *= sigmoid(*v);
    }
    y
}

/// Gradient of SiLU given the pre-activation `x`.
pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    }
    dx
}

pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    for (src, dst) in x.data.chunks(x.spatial()).zip(y.data.chunks_mut(h2 * w2)) {
        for yy in 0..h2 {
            let srow = &src[(yy / 2) * x.w..(yy / 2 + 1) * x.w];
            let drow = &mut dst[yy * w2..(yy + 1) * w2];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks(dy.spatial()).zip(dx.data.chunks_mut(h * w)) {
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct convolution, one output at a time.
    fn conv_naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (ho, wo) = conv.output_hw(x.h, x.w);
        let k = conv.kernel;
        let mut y = Tensor::zeros(x.n, conv.cout, ho, wo);
        for n in 0..x.n {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.value[co] as f64;
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * conv.cin + ci) * k + ky) * k + kx];
                                    let xv = x.data[((n * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    acc += (wv * xv) as f64;
                                }
                            }
                        }
                        y.data[((n * conv.cout + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            for b in &mut conv.bias.value {
                *b = rng.random_range(-0.5..0.5);
            }
            let x = rand_tensor(&mut rng, 2, 3, 7, 6);
            let fast = conv.forward(&x);
            let slow = conv_naive(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "k{k} s{s}: {a} vs {b}");
            }
        }
    }

    /// Checks `backward` against central differences of `sum(y * probe)`.
    fn check_input_grad(
        mut fwd: impl FnMut(&Tensor, bool) -> Tensor,
        mut bwd: impl FnMut(&Tensor) -> Tensor,
        x: &Tensor,
        rng: &mut impl Rng,
    ) {
        let y = fwd(x, true);
        let probe = rand_tensor(rng, y.n, y.c, y.h, y.w);
        let dx = bwd(&probe);
        let objective = |t: &Tensor, f: &mut dyn FnMut(&Tensor, bool) -> Tensor| -> f64 {
            f(t, false).data.iter().zip(&probe.data).map(|(a, b)| (a * b) as f64).sum()
        };
        let h = 1e-2;
        for idx in [0, x.data.len() / 3, x.data.len() - 1] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(&xp, &mut fwd) - objective(&xm, &mut fwd)) / (2.0 * h as f64);
            let an = dx.data[idx] as f64;
            assert!((fd - an).abs() <= 2e-3 * (1.0 + an.abs()), "idx {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 2, 3, 6, 5);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let conv = std::cell::RefCell::new(Conv2d::new(3, 2, k, s, p, &mut rng));
            check_input_grad(
                |t, train| {
                    if train {
                        conv.borrow_mut().forward_train(t)
                    } else {
                        conv.borrow().forward(t)
                    }
                },
                |g| conv.borrow_mut().backward(g),
                &x,
                &mut rng,
            );
        }
    }

    #[test]
    fn group_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 2, 4, 3, 3);
        let gn = std::cell::RefCell::new(GroupNorm::new(2, 4));
        for (i, g) in gn.borrow_mut().gamma.value.iter_mut().enumerate() {
            *g = 0.5 + i as f32 * 0.3;
        }
        check_input_grad(
            |t, train| {
                if train {
                    gn.borrow_mut().forward_train(t)
                } else {
                    gn.borrow().forward(t)
                }
            },
            |g| gn.borrow_mut().backward(g),
            &x,
            &mut rng,
        );
    }

    #[test]
    fn linear_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 3, 5, 1, 1);
        let lin = std::cell::RefCell::new(Linear::new(5, 4, &mut rng));
        check_input_grad(
            |t, train| {
                if train {
                    lin.borrow_mut().forward_train(t)
                } else {
                    lin.borrow().forward(t)
                }
            },
            |g| lin.borrow_mut().backward(g),
            &x,
            &mut rng,
        );
        let img = rand_tensor(&mut rng, 1, 2, 3, 4);
        check_input_grad(|t, _| upsample_nearest2(t), upsample_nearest2_backward, &img, &mut rng);
        let cache = std::cell::RefCell::new(img.clone());
        check_input_grad(
            |t, train| {
                if train {
                    *cache.borrow_mut() = t.clone();
                }
                silu(t)
            },
            |g| silu_backward(&cache.borrow(), g),
            &img,
            &mut rng,
        );
    }

    #[test]
    fn group_norm_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 1, 4, 5, 5);
        let y = GroupNorm::new(2, 4).forward(&x);
        for g in y.data.chunks(50) {
            let mean: f32 = g.iter().sum::<f32>() / 50.0;
            let var: f32 = g.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 50.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
    }
}
