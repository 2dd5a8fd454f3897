//! Minimal CPU tensor engine for the denoiser: NCHW `f32` tensors, layers
//! with explicit forward/backward passes, and a GEMM shim over
//! `matrixmultiply`.
//!
//! Layers cache what they need during `forward_train` and consume it in
//! `backward`, which accumulates parameter gradients into [`Param::grad`]
//! and returns the gradient with respect to the layer input.

mod attention;
mod layers;
mod resblock;

pub use attention::AttnBlock;
pub use layers::{
    silu, silu_backward, upsample_nearest2, upsample_nearest2_backward, Conv2d, GroupNorm, Linear,
};
pub use resblock::ResBlock;

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel-wise concatenation `[self, other]`.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.n, self.h, self.w), (other.n, other.h, other.w));
        let mut out = Tensor::zeros(self.n, self.c + other.c, self.h, self.w);
        for i in 0..self.n {
            let dst = out.sample_mut(i);
            let split = self.sample_len();
            dst[..split].copy_from_slice(self.sample(i));
            dst[split..].copy_from_slice(other.sample(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c_first` channels and the rest.
    pub fn split_channels(&self, c_first: usize) -> (Tensor, Tensor) {
        let mut a = Tensor::zeros(self.n, c_first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - c_first, self.h, self.w);
        let split = c_first * self.spatial();
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..split]);
            b.sample_mut(i).copy_from_slice(&src[split..]);
        }
        (a, b)
    }
}

/// A learnable tensor with its accumulated gradient. `value` is row-major in `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let bound = 1.0 / (fan_in as f32).sqrt();
        for v in &mut p.value {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters. Collection order is stable and defines
/// the optimizer state layout.
pub trait Module {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `c = a * b (+ c when accumulate)` for row-major `a: m x k`, `b: k x n`.
/// `a_t`/`b_t` mean the operand is stored transposed (`k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides and extents describe in-bounds views of the slices,
    // checked by the debug assertion above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided `c = a * b (+ c)`: `a` and `b` are `(slice, row stride, column
/// stride)` views, `c` is `(slice, row stride)` with unit column stride.
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f32], usize, usize),
    b: (&[f32], usize, usize),
    c: (&mut [f32], usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.0.len() >= extent(m, k, a.1, a.2), "gemm lhs view out of bounds");
    assert!(b.0.len() >= extent(k, n, b.1, b.2), "gemm rhs view out of bounds");
    assert!(c.0.len() >= extent(m, n, c.1, 1), "gemm output view out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertions above bound every element addressed by the views.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            1,
        );
    }
}
