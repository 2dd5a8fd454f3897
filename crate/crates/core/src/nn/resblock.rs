use rand::Rng;

use super::layers::{silu, silu_backward, Conv2d, GroupNorm, Linear};
use super::{join, Module, Param, Tensor};

/// Pre-activation residual block with an additive timestep projection:
/// `out = skip(x) + conv2(silu(norm2(conv1(silu(norm1(x))) + proj(temb))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time_proj: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    /// 1x1 projection when the channel count changes.
    pub skip: Option<Conv2d>,
    pre1: Option<Tensor>,
    pre2: Option<Tensor>,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, temb_dim: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: GroupNorm::new(groups.min(cin), cin),
            conv1: Conv2d::same3(cin, cout, rng),
            time_proj: Linear::new(temb_dim, cout, rng),
            norm2: GroupNorm::new(groups.min(cout), cout),
            conv2: Conv2d::same3(cout, cout, rng),
            skip: (cin != cout).then(|| Conv2d::pointwise(cin, cout, rng)),
            pre1: None,
            pre2: None,
        }
    }

    fn add_time(h: &mut Tensor, tp: &Tensor) {
        let plane = h.spatial();
        for i in 0..h.n {
            let bias = tp.sample(i);
            let s = h.sample_mut(i);
            for (c, b) in bias.iter().enumerate() {
                for v in &mut s[c * plane..(c + 1) * plane] {
                    *v += b;
                }
            }
        }
    }

    /// `temb` is the already-activated timestep embedding, `[n, temb_dim]`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Tensor {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)));
        Self::add_time(&mut h, &self.time_proj.forward(temb));
        let mut out = self.conv2.forward(&silu(&self.norm2.forward(&h)));
        match &self.skip {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor, temb: &Tensor) -> Tensor {
        let a1 = self.norm1.forward_train(x);
        let mut h = self.conv1.forward_train(&silu(&a1));
        Self::add_time(&mut h, &self.time_proj.forward_train(temb));
        let a2 = self.norm2.forward_train(&h);
        let mut out = self.conv2.forward_train(&silu(&a2));
        match &mut self.skip {
            Some(s) => out.add_assign(&s.forward_train(x)),
            None => out.add_assign(x),
        }
        self.pre1 = Some(a1);
        self.pre2 = Some(a2);
        out
    }

    /// Returns `(d input, d temb)`.
    pub fn backward(&mut self, dout: &Tensor) -> (Tensor, Tensor) {
        let a1 = self.pre1.take().expect("resblock backward without forward_train");
        let a2 = self.pre2.take().expect("resblock backward without forward_train");
        let ds2 = self.conv2.backward(dout);
        let dh = self.norm2.backward(&silu_backward(&a2, &ds2));
        let plane = dh.spatial();
        let mut dtp = Tensor::zeros(dh.n, dh.c, 1, 1);
        for i in 0..dh.n {
            let src = dh.sample(i);
            for (c, d) in dtp.sample_mut(i).iter_mut().enumerate() {
                *d = src[c * plane..(c + 1) * plane].iter().sum();
            }
        }
        let dtemb = self.time_proj.backward(&dtp);
        let ds1 = self.conv1.backward(&dh);
        let mut dx = self.norm1.backward(&silu_backward(&a1, &ds1));
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(dout)),
            None => dx.add_assign(dout),
        }
        (dx, dtemb)
    }
}

impl Module for ResBlock {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.time_proj.collect_params(&join(prefix, "time_proj"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        if let Some(s) = &self.skip {
            s.collect_params(&join(prefix, "skip"), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.norm1.collect_params_mut(&join(prefix, "norm1"), out);
        self.conv1.collect_params_mut(&join(prefix, "conv1"), out);
        self.time_proj.collect_params_mut(&join(prefix, "time_proj"), out);
        self.norm2.collect_params_mut(&join(prefix, "norm2"), out);
        self.conv2.collect_params_mut(&join(prefix, "conv2"), out);
        if let Some(s) = &mut self.skip {
            s.collect_params_mut(&join(prefix, "skip"), out);
        }
    }
}
