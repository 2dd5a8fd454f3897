//! The noise-prediction U-Net.
//!
//! Layout: a 3x3 input convolution, a contracting path of residual blocks
//! with strided-convolution downsampling, a bottleneck with self-attention
//! at the lowest resolution, and an expanding path that mirrors the
//! contracting one, concatenating the stored activations before every block
//! and upsampling by nearest-neighbour followed by a 3x3 convolution.
//! The output convolution is zero-initialised, so an untrained network
//! predicts zero noise.
//!
//! # Parameter count
//!
//! With `conv(i, o, k) = o*i*k^2 + o`, `lin(i, o) = o*i + o`, `gn(c) = 2c`,
//! `E = time_embed_dim`, `b = base_channels`, `c_l = b * mult[l]`:
//!
//! ```text
//! res(i, o)  = gn(i) + conv(i, o, 3) + lin(E, o) + gn(o) + conv(o, o, 3)
//!              + [i != o] conv(i, o, 1)
//! attn(c)    = gn(c) + 4 conv(c, c, 1)
//! total      = 2 lin(E, E) + conv(in, b, 3)
//!              + sum over contracting blocks res(.,.) + sum over levels l < L-1 conv(c_l, c_l, 3)
//!              + 2 res(c_L, c_L) + attn(c_L)
//!              + sum over expanding blocks res(h + skip, c_l) + sum over levels l > 0 conv(c_l, c_l, 3)
//!              + gn(c_0) + conv(c_0, out, 3)
//! ```
//!
//! where the expanding path has `blocks_per_level + 1` blocks per level, each
//! consuming one stored activation.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoisePredictor, TrainableNoisePredictor};
use crate::error::{Error, Result};
use crate::nn::{
    silu, silu_backward, upsample_nearest2, upsample_nearest2_backward, AttnBlock, Conv2d,
    GroupNorm, Linear, Module, Param, ResBlock, Tensor,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Noisy image channels plus conditioning channels.
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    /// Upper bound on group-norm groups; layers narrower than this use one group per channel.
    pub norm_groups: usize,
    /// Number of diffusion steps the network is trained for.
    pub num_timesteps: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    /// 32 base channels, multipliers (1, 2, 4, 4), two blocks per level.
    pub fn desk() -> Self {
        Self {
            in_channels: 6,
            out_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 4],
            blocks_per_level: 2,
            time_embed_dim: 128,
            norm_groups: 8,
            num_timesteps: crate::schedule::DEFAULT_TIMESTEPS,
            seed: 0,
        }
    }

    /// Same four levels at half width with one block per level, sized for
    /// training and sampling on a single CPU core.
    pub fn compact() -> Self {
        Self {
            base_channels: 16,
            blocks_per_level: 1,
            time_embed_dim: 64,
            num_timesteps: crate::schedule::DESK_TIMESTEPS,
            ..Self::desk()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn groups_for(&self, channels: usize) -> usize {
        self.norm_groups.min(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.channel_multipliers.len() < 2 {
            return Err(Error::config("need at least two resolution levels"));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::config("channel multipliers must be positive"));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::config("blocks_per_level must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "time_embed_dim {} must be even and positive",
                self.time_embed_dim
            )));
        }
        if self.norm_groups == 0 {
            return Err(Error::config("norm_groups must be positive"));
        }
        if self.num_timesteps == 0 {
            return Err(Error::config("num_timesteps must be positive"));
        }
        for &m in &self.channel_multipliers {
            let c = self.base_channels * m;
            if c % self.groups_for(c) != 0 {
                return Err(Error::config(format!(
                    "{c} channels not divisible into {} groups",
                    self.groups_for(c)
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding: interleaved `(sin(t f_i), cos(t f_i))` pairs with
/// `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f32>> {
    if dim % 2 != 0 {
        return Err(Error::config(format!("embedding dimension {dim} is odd")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin() as f32);
        out.push(arg.cos() as f32);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Weights by parameter path, e.g. `down.1.block.0.conv1.weight`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenoiserParams {
    pub tensors: BTreeMap<String, ParamTensor>,
}

impl DenoiserParams {
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// True when both maps have the same names with the same shapes.
    pub fn same_layout(&self, other: &DenoiserParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape)
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    /// Strided conv on the contracting path, nearest+conv on the expanding path.
    resample: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct TrainCache {
    time_hidden: Tensor,
    temb: Tensor,
    /// Channels of the running activation before each expanding-path concat, in backward order.
    concat_split: Vec<usize>,
    out_pre: Tensor,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    /// Deepest level first.
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    cache: Option<TrainCache>,
}

impl Denoiser {
    /// Fresh network with fan-in scaled weights drawn from `config.seed`.
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cfg = &config;
        let e = cfg.time_embed_dim;
        let ch = |l: usize| cfg.base_channels * cfg.channel_multipliers[l];
        let g = cfg.norm_groups;
        let last = cfg.levels() - 1;

        let time1 = Linear::new(e, e, &mut rng);
        let time2 = Linear::new(e, e, &mut rng);
        let conv_in = Conv2d::same3(cfg.in_channels, cfg.base_channels, &mut rng);

        let mut skip_channels = vec![cfg.base_channels];
        let mut cur = cfg.base_channels;
        let mut down = Vec::new();
        for l in 0..cfg.levels() {
            let mut blocks = Vec::new();
            for _ in 0..cfg.blocks_per_level {
                blocks.push(ResBlock::new(cur, ch(l), e, g, &mut rng));
                cur = ch(l);
                skip_channels.push(cur);
            }
            let resample = (l != last).then(|| Conv2d::new(cur, cur, 3, 2, 1, &mut rng));
            if resample.is_some() {
                skip_channels.push(cur);
            }
            down.push(Level { blocks, resample });
        }

        let mid1 = ResBlock::new(cur, cur, e, g, &mut rng);
        let mid_attn = AttnBlock::new(cur, g, &mut rng);
        let mid2 = ResBlock::new(cur, cur, e, g, &mut rng);

        let mut up = Vec::new();
        for l in (0..cfg.levels()).rev() {
            let mut blocks = Vec::new();
            for _ in 0..=cfg.blocks_per_level {
                let skip = skip_channels.pop().expect("one stored activation per block");
                blocks.push(ResBlock::new(cur + skip, ch(l), e, g, &mut rng));
                cur = ch(l);
            }
            let resample = (l != 0).then(|| Conv2d::same3(cur, cur, &mut rng));
            up.push(Level { blocks, resample });
        }
        debug_assert!(skip_channels.is_empty());

        let norm_out = GroupNorm::new(cfg.groups_for(cur), cur);
        let conv_out = Conv2d::same3(cur, cfg.out_channels, &mut rng).zero_init();

        Ok(Self {
            config,
            time1,
            time2,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
            cache: None,
        })
    }

    /// Network with the given weights; names and shapes must match `config`.
    pub fn from_params(config: DenoiserConfig, params: &DenoiserParams) -> Result<Self> {
        let mut net = Self::new(config)?;
        net.load_params(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn params(&self) -> DenoiserParams {
        DenoiserParams {
            tensors: self
                .named_params()
                .into_iter()
                .map(|(name, p)| {
                    (
                        name,
                        ParamTensor {
                            shape: p.shape.clone(),
                            data: p.value.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn load_params(&mut self, params: &DenoiserParams) -> Result<()> {
        let mut live = self.named_params_mut();
        if live.len() != params.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                live.len(),
                params.tensors.len()
            )));
        }
        for (name, p) in live.iter_mut() {
            let src = params
                .tensors
                .get(name.as_str())
                .ok_or_else(|| Error::shape(format!("missing parameter {name}")))?;
            if src.shape != p.shape {
                return Err(Error::shape(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    src.shape, p.shape
                )));
            }
            p.value.copy_from_slice(&src.data);
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor, t: &[usize]) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::shape(format!(
                "denoiser expects {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let m = self.config.spatial_multiple();
        if x.h % m != 0 || x.w % m != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::shape(format!(
                "input {}x{} is not a positive multiple of {m}",
                x.h, x.w
            )));
        }
        if t.len() != x.n {
            return Err(Error::shape(format!("{} timesteps for a batch of {}", t.len(), x.n)));
        }
        for &step in t {
            if step == 0 || step > self.config.num_timesteps {
                return Err(Error::StepOutOfRange {
                    t: step,
                    max: self.config.num_timesteps,
                });
            }
        }
        Ok(())
    }

    fn sinusoids(&self, t: &[usize]) -> Tensor {
        let e = self.config.time_embed_dim;
        let mut data = Vec::with_capacity(t.len() * e);
        for &step in t {
            data.extend(timestep_embedding(step, e).expect("validated even dimension"));
        }
        Tensor::from_vec(t.len(), e, 1, 1, data)
    }

    /// Predicted noise for `x` (noisy image channels followed by conditioning channels).
    pub fn denoise(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.check_input(x, t)?;
        Ok(self.forward_inner(x, t, None))
    }

    fn forward_inner(&self, x: &Tensor, t: &[usize], ablate_skip: Option<usize>) -> Tensor {
        let temb = self.time2.forward(&silu(&self.time1.forward(&self.sinusoids(t))));
        let ta = silu(&temb);

        let mut h = self.conv_in.forward(x);
        let mut skips = vec![h.clone()];
        for level in &self.down {
            for block in &level.blocks {
                h = block.forward(&h, &ta);
                skips.push(h.clone());
            }
            if let Some(conv) = &level.resample {
                h = conv.forward(&h);
                skips.push(h.clone());
            }
        }
        h = self.mid1.forward(&h, &ta);
        h = self.mid_attn.forward(&h);
        h = self.mid2.forward(&h, &ta);
        for level in &self.up {
            for block in &level.blocks {
                let idx = skips.len() - 1;
                let mut s = skips.pop().expect("stored activation");
                if ablate_skip == Some(idx) {
                    s.data.fill(0.0);
                }
                h = block.forward(&h.concat_channels(&s), &ta);
            }
            if let Some(conv) = &level.resample {
                h = conv.forward(&upsample_nearest2(&h));
            }
        }
        self.conv_out.forward(&silu(&self.norm_out.forward(&h)))
    }

    /// Forward pass that records what [`Denoiser::backward`] needs.
    pub fn forward_train(&mut self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.check_input(x, t)?;
        let sin = self.sinusoids(t);
        let time_hidden = self.time1.forward_train(&sin);
        let temb = self.time2.forward_train(&silu(&time_hidden));
        let ta = silu(&temb);

        let mut h = self.conv_in.forward_train(x);
        let mut skips = vec![h.clone()];
        for level in &mut self.down {
            for block in &mut level.blocks {
                h = block.forward_train(&h, &ta);
                skips.push(h.clone());
            }
            if let Some(conv) = &mut level.resample {
                h = conv.forward_train(&h);
                skips.push(h.clone());
            }
        }
        h = self.mid1.forward_train(&h, &ta);
        h = self.mid_attn.forward_train(&h);
        h = self.mid2.forward_train(&h, &ta);
        let mut concat_split = Vec::new();
        for level in &mut self.up {
            for block in &mut level.blocks {
                let s = skips.pop().expect("stored activation");
                concat_split.push(h.c);
                h = block.forward_train(&h.concat_channels(&s), &ta);
            }
            if let Some(conv) = &mut level.resample {
                h = conv.forward_train(&upsample_nearest2(&h));
            }
        }
        concat_split.reverse();
        let out_pre = self.norm_out.forward_train(&h);
        let out = self.conv_out.forward_train(&silu(&out_pre));
        self.cache = Some(TrainCache {
            time_hidden,
            temb,
            concat_split,
            out_pre,
        });
        Ok(out)
    }

    /// Accumulates parameter gradients for the last `forward_train` and
    /// returns the gradient with respect to the network input.
    pub fn backward(&mut self, dout: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::shape("backward called without forward_train"))?;
        let mut d = self.conv_out.backward(dout);
        d = self.norm_out.backward(&silu_backward(&cache.out_pre, &d));
        let mut dta = Tensor::zeros(d.n, self.config.time_embed_dim, 1, 1);

        let mut dskips: Vec<Option<Tensor>> = Vec::new();
        let mut split = cache.concat_split.iter();
        for level in self.up.iter_mut().rev() {
            if let Some(conv) = &mut level.resample {
                d = upsample_nearest2_backward(&conv.backward(&d));
            }
            for block in level.blocks.iter_mut().rev() {
                let (dcat, dt) = block.backward(&d);
                dta.add_assign(&dt);
                let (dh, ds) = dcat.split_channels(*split.next().expect("split per block"));
                dskips.push(Some(ds));
                d = dh;
            }
        }

        let (dh, dt) = self.mid2.backward(&d);
        dta.add_assign(&dt);
        d = self.mid_attn.backward(&dh);
        let (dh, dt) = self.mid1.backward(&d);
        dta.add_assign(&dt);
        d = dh;

        let mut idx = dskips.len() - 1;
        let mut take = |idx: usize, d: &mut Tensor| {
            if let Some(ds) = dskips[idx].take() {
                d.add_assign(&ds);
            }
        };
        for level in self.down.iter_mut().rev() {
            if let Some(conv) = &mut level.resample {
                take(idx, &mut d);
                idx -= 1;
                d = conv.backward(&d);
            }
            for block in level.blocks.iter_mut().rev() {
                take(idx, &mut d);
                idx -= 1;
                let (dh, dt) = block.backward(&d);
                dta.add_assign(&dt);
                d = dh;
            }
        }
        take(idx, &mut d);
        let dx = self.conv_in.backward(&d);

        let dtemb = silu_backward(&cache.temb, &dta);
        let dhid = self.time2.backward(&dtemb);
        self.time1.backward(&silu_backward(&cache.time_hidden, &dhid));
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

impl Module for Denoiser {
    fn collect_params<'a>(&'a self, _prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.time1.collect_params("time_embed.0", out);
        self.time2.collect_params("time_embed.1", out);
        self.conv_in.collect_params("conv_in", out);
        for (l, level) in self.down.iter().enumerate() {
            for (b, block) in level.blocks.iter().enumerate() {
                block.collect_params(&format!("down.{l}.block.{b}"), out);
            }
            if let Some(c) = &level.resample {
                c.collect_params(&format!("down.{l}.downsample"), out);
            }
        }
        self.mid1.collect_params("mid.block1", out);
        self.mid_attn.collect_params("mid.attn", out);
        self.mid2.collect_params("mid.block2", out);
        for (i, level) in self.up.iter().enumerate() {
            let l = self.down.len() - 1 - i;
            for (b, block) in level.blocks.iter().enumerate() {
                block.collect_params(&format!("up.{l}.block.{b}"), out);
            }
            if let Some(c) = &level.resample {
                c.collect_params(&format!("up.{l}.upsample"), out);
            }
        }
        self.norm_out.collect_params("norm_out", out);
        self.conv_out.collect_params("conv_out", out);
    }

    fn collect_params_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.time1.collect_params_mut("time_embed.0", out);
        self.time2.collect_params_mut("time_embed.1", out);
        self.conv_in.collect_params_mut("conv_in", out);
        let levels = self.down.len();
        for (l, level) in self.down.iter_mut().enumerate() {
            for (b, block) in level.blocks.iter_mut().enumerate() {
                block.collect_params_mut(&format!("down.{l}.block.{b}"), out);
            }
            if let Some(c) = &mut level.resample {
                c.collect_params_mut(&format!("down.{l}.downsample"), out);
            }
        }
        self.mid1.collect_params_mut("mid.block1", out);
        self.mid_attn.collect_params_mut("mid.attn", out);
        self.mid2.collect_params_mut("mid.block2", out);
        for (i, level) in self.up.iter_mut().enumerate() {
            let l = levels - 1 - i;
            for (b, block) in level.blocks.iter_mut().enumerate() {
                block.collect_params_mut(&format!("up.{l}.block.{b}"), out);
            }
            if let Some(c) = &mut level.resample {
                c.collect_params_mut(&format!("up.{l}.upsample"), out);
            }
        }
        self.norm_out.collect_params_mut("norm_out", out);
        self.conv_out.collect_params_mut("conv_out", out);
    }
}

impl NoisePredictor for Denoiser {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    fn spatial_multiple(&self) -> usize {
        self.config.spatial_multiple()
    }

    fn predict(&self, input: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.denoise(input, t)
    }
}

impl TrainableNoisePredictor for Denoiser {
    fn zero_grad(&mut self) {
        Denoiser::zero_grad(self);
    }

    fn forward_train(&mut self, input: &Tensor, t: &[usize]) -> Result<Tensor> {
        Denoiser::forward_train(self, input, t)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        Denoiser::backward(self, grad_output)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (name, p) in self.named_params_mut() {
            f(&name, p);
        }
    }
}
