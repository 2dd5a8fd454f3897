use rand::Rng;

use super::layers::{fast_exp, Conv2d, GroupNorm};
use super::{gemm, join, Module, Param, Tensor};

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub norm: GroupNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub proj: Conv2d,
    cache: Option<AttnCache>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Row-softmaxed attention weights, `[n, p, p]` flattened.
    weights: Vec<f32>,
}

impl AttnBlock {
    pub fn new(channels: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: GroupNorm::new(groups.min(channels), channels),
            q: Conv2d::pointwise(channels, channels, rng),
            k: Conv2d::pointwise(channels, channels, rng),
            v: Conv2d::pointwise(channels, channels, rng),
            proj: Conv2d::pointwise(channels, channels, rng),
            cache: None,
        }
    }

    fn scale(&self) -> f32 {
        1.0 / (self.q.cout as f32).sqrt()
    }

    /// Returns the mixed values `[n, c, h, w]`, plus the attention weights
    /// of every sample when `keep` is set (otherwise one scratch buffer is reused).
    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, keep: bool) -> (Tensor, Vec<f32>) {
        let (c, p) = (q.c, q.spatial());
        let mut out = Tensor::zeros(q.n, c, q.h, q.w);
        let mut weights = vec![0.0; if keep { q.n } else { 1 } * p * p];
        let scale = self.scale();
        for i in 0..q.n {
            let slot = if keep { i } else { 0 };
            let a = &mut weights[slot * p * p..(slot + 1) * p * p];
            gemm(p, c, p, q.sample(i), true, k.sample(i), false, a, false);
            for row in a.chunks_mut(p) {
                let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = fast_exp(*v * scale - max);
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            gemm(c, p, p, v.sample(i), false, a, true, out.sample_mut(i), false);
        }
        (out, weights)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.norm.forward(x);
        let (o, _) = self.attend(&self.q.forward(&h), &self.k.forward(&h), &self.v.forward(&h), false);
        let mut out = self.proj.forward(&o);
        out.add_assign(x);
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.norm.forward_train(x);
        let q = self.q.forward_train(&h);
        let k = self.k.forward_train(&h);
        let v = self.v.forward_train(&h);
        let (o, weights) = self.attend(&q, &k, &v, true);
        let mut out = self.proj.forward_train(&o);
        out.add_assign(x);
        self.cache = Some(AttnCache { q, k, v, weights });
        out
    }

    pub fn backward(&mut self, dout: &Tensor) -> Tensor {
        let AttnCache { q, k, v, weights } =
            self.cache.take().expect("attention backward without forward_train");
        let (c, p) = (q.c, q.spatial());
        let scale = self.scale();
        let d_o = self.proj.backward(dout);
        let mut dq = Tensor::zeros(q.n, c, q.h, q.w);
        let mut dk = dq.clone();
        let mut dv = dq.clone();
        let mut da = vec![0.0; p * p];
        for i in 0..q.n {
            let a = &weights[i * p * p..(i + 1) * p * p];
            // o = v a^T
            gemm(c, p, p, d_o.sample(i), false, a, false, dv.sample_mut(i), false);
            gemm(p, c, p, d_o.sample(i), true, v.sample(i), false, &mut da, false);
            for (drow, arow) in da.chunks_mut(p).zip(a.chunks(p)) {
                let dot: f32 = drow.iter().zip(arow).map(|(d, a)| d * a).sum();
                for (d, a) in drow.iter_mut().zip(arow) {
                    *d = a * (*d - dot) * scale;
                }
            }
            // s = q^T k
            gemm(c, p, p, k.sample(i), false, &da, true, dq.sample_mut(i), false);
            gemm(c, p, p, q.sample(i), false, &da, false, dk.sample_mut(i), false);
        }
        let mut dh = self.q.backward(&dq);
        dh.add_assign(&self.k.backward(&dk));
        dh.add_assign(&self.v.backward(&dv));
        let mut dx = self.norm.backward(&dh);
        dx.add_assign(dout);
        dx
    }
}

impl Module for AttnBlock {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.norm.collect_params(&join(prefix, "norm"), out);
        self.q.collect_params(&join(prefix, "q"), out);
        self.k.collect_params(&join(prefix, "k"), out);
        self.v.collect_params(&join(prefix, "v"), out);
        self.proj.collect_params(&join(prefix, "proj"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.norm.collect_params_mut(&join(prefix, "norm"), out);
        self.q.collect_params_mut(&join(prefix, "q"), out);
        self.k.collect_params_mut(&join(prefix, "k"), out);
        self.v.collect_params_mut(&join(prefix, "v"), out);
        self.proj.collect_params_mut(&join(prefix, "proj"), out);
    }
}
