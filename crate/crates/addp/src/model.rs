//! Four-stage spatiotemporal regression network: a difference-normalization
//! input module, convolution mixers in the first two stages, temporal
//! self-attention over spatially pooled tokens in the last two, a parallel
//! adapter next to every FFN, and a transposed-convolution regression head.
//!
//! The shallow feature h (stage-2 output) and the pooled high-level feature
//! z (stage-4 output) are exposed as taps; style and noise augmentation are
//! applied at those taps inside the forward pass with gradients flowing
//! through the augmented path.

use crate::augment::{adain_forward, mix_noise_forward, AdainCache, MixCache};
use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::attention::TemporalAttention;
use crate::nn::conv::{Conv1d, ConvTranspose1d, DepthwiseConv3, PatchEmbed3, PointwiseConv};
use crate::nn::norm::{BatchNorm, LayerNorm};
use crate::nn::tensor::Tensor;
use crate::nn::{Buffer, Gelu, LayerCtx, Param, ParamGroup};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Temporal stride of each stage entry (total temporal downsampling 4).
pub const TEMPORAL_STRIDES: [usize; 4] = [1, 2, 2, 1];
/// Spatial downsampling factor of each stage entry.
pub const SPATIAL_STRIDE: usize = 2;

fn default_stage_channels() -> [usize; 4] {
    [16, 32, 64, 64]
}
fn default_blocks() -> [usize; 4] {
    [1, 1, 1, 1]
}
fn default_ratio() -> f64 {
    0.25
}
fn default_attention_stages() -> [bool; 4] {
    [false, false, true, true]
}
fn default_heads() -> usize {
    2
}
fn default_ffn_expansion() -> usize {
    2
}
fn default_head_channels() -> usize {
    16
}
fn default_in_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_stage_channels")]
    pub stage_channels: [usize; 4],
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: [usize; 4],
    /// Adapter bottleneck ratio; bottleneck width = max(1, round(ratio * C)).
    #[serde(default = "default_ratio")]
    pub adapter_ratio: f64,
    /// Which stages use temporal self-attention as their token mixer.
    #[serde(default = "default_attention_stages")]
    pub attention_stages: [bool; 4],
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: usize,
    #[serde(default = "default_head_channels")]
    pub head_channels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: default_stage_channels(),
            blocks_per_stage: default_blocks(),
            adapter_ratio: default_ratio(),
            attention_stages: default_attention_stages(),
            attention_heads: default_heads(),
            ffn_expansion: default_ffn_expansion(),
            head_channels: default_head_channels(),
            in_channels: default_in_channels(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if !(self.adapter_ratio > 0.0 && self.adapter_ratio <= 1.0) {
            return Err(Error::Config("adapter_ratio must be in (0, 1]".into()));
        }
        if self.attention_heads == 0 || self.ffn_expansion == 0 || self.head_channels == 0 {
            return Err(Error::Config("heads/expansion/head_channels must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        for (s, &attn) in self.attention_stages.iter().enumerate() {
            if attn && self.stage_channels[s] % self.attention_heads != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} not divisible by {} heads",
                    s + 1,
                    self.stage_channels[s],
                    self.attention_heads
                )));
            }
        }
        Ok(())
    }

    pub fn adapter_bottleneck(channels: usize, ratio: f64) -> usize {
        ((ratio * channels as f64).round() as usize).max(1)
    }

    /// Total temporal downsampling between the taps and the input.
    pub fn temporal_downsample_total() -> usize {
        TEMPORAL_STRIDES.iter().product()
    }

    /// Shapes of the feature taps for a `[3, T, H, W]` input:
    /// `(h: [C1, T1, H1, W1], z: [C2, T2])`.
    pub fn tap_dims(&self, t: usize, h: usize, w: usize) -> ((usize, usize, usize, usize), (usize, usize)) {
        let mut tt = t - 1; // DiffNorm
        let mut hh = h;
        let mut ww = w;
        let mut h_tap = (0, 0, 0, 0);
        for s in 0..4 {
            tt = tt.div_ceil(TEMPORAL_STRIDES[s]);
            hh /= SPATIAL_STRIDE;
            ww /= SPATIAL_STRIDE;
            if s == 1 {
                h_tap = (self.stage_channels[1], tt, hh, ww);
            }
        }
        (h_tap, (self.stage_channels[3], tt))
    }

    /// Validate a clip geometry against the architecture.
    pub fn check_input(&self, t: usize, h: usize, w: usize) -> Result<()> {
        if t < 2 {
            return Err(Error::InvalidArgument(
                "input must have at least 2 frames".into(),
            ));
        }
        let factor = SPATIAL_STRIDE.pow(4);
        if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims ({h}, {w}) must be positive multiples of {factor}"
            )));
        }
        Ok(())
    }
}

/// Shallow and high-level features exposed by a forward pass.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    /// Stage-2 output `[C1, T1, H1, W1]` (after style augmentation, if any).
    pub h: Tensor,
    /// Spatially pooled stage-4 output `[C2, T2]` (after noise mixing, if any).
    pub z: Tensor,
}

/// Training stage policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    /// All parameters trainable (initial task).
    Initial,
    /// Backbone frozen: only adapters and the head receive updates, and
    /// normalization running statistics are pinned.
    Incremental,
}

/// Names of the parameters in each partition group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub backbone_params: Vec<String>,
    pub adapter_params: Vec<String>,
    pub head_params: Vec<String>,
}

/// Per-forward options: training mode plus optional style transfer (at the h
/// tap) and noise mixing (at the z tap).
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub train: bool,
    /// Target (mu, sigma) for AdaIN at the shallow tap.
    pub style: Option<(&'a [f64], &'a [f64])>,
    /// (noise matrix, alpha) for SVD mixing at the high-level tap.
    pub noise: Option<(&'a Tensor, usize)>,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn training() -> Self {
        ForwardOptions {
            train: true,
            ..Self::default()
        }
    }
}

pub struct ForwardOutput {
    pub pred: Vec<f64>,
    pub taps: FeatureTaps,
}

/// Input module: fuse the appearance frames with batch-normalized frame
/// differences through concatenation and a 1x1x1 convolution.
pub struct DiffNorm {
    bn: BatchNorm,
    fuse: PointwiseConv,
    in_c: usize,
    cache_t: usize,
}

impl DiffNorm {
    pub fn new<R: Rng>(name: &str, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        DiffNorm {
            bn: BatchNorm::new(&format!("{name}.bn"), ParamGroup::Backbone, in_c),
            fuse: PointwiseConv::he(
                &format!("{name}.fuse"),
                ParamGroup::Backbone,
                2 * in_c,
                out_c,
                rng,
            ),
            in_c,
            cache_t: 0,
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: LayerCtx) -> Result<Tensor> {
        let &[c, t, h, w] = x.shape() else {
            return Err(Error::ShapeMismatch(format!(
                "expected [C, T, H, W], got {:?}",
                x.shape()
            )));
        };
        if c != self.in_c {
            return Err(Error::ShapeMismatch(format!(
                "expected {} input channels, got {c}",
                self.in_c
            )));
        }
        if t < 2 {
            return Err(Error::InvalidArgument(
                "difference branch needs at least 2 frames".into(),
            ));
        }
        let plane = h * w;
        let vol = t * plane;
        let out_vol = (t - 1) * plane;
        let mut diff = Tensor::zeros(&[c, t - 1, h, w]);
        {
            let dd = diff.data_mut();
            let xd = x.data();
            for ci in 0..c {
                for ti in 0..t - 1 {
                    let a = ci * vol + ti * plane;
                    let o = ci * out_vol + ti * plane;
                    for p in 0..plane {
                        dd[o + p] = xd[a + plane + p] - xd[a + p];
                    }
                }
            }
        }
        let normed = self.bn.forward(&diff, ctx);
        let mut cat = Tensor::zeros(&[2 * c, t - 1, h, w]);
        {
            let cd = cat.data_mut();
            let xd = x.data();
            // appearance branch: frames 1..T-1
            for ci in 0..c {
                for ti in 0..t - 1 {
                    let src = ci * vol + ti * plane;
                    let dst = ci * out_vol + ti * plane;
                    cd[dst..dst + plane].copy_from_slice(&xd[src..src + plane]);
                }
            }
            cd[c * out_vol..].copy_from_slice(normed.data());
        }
        self.cache_t = t;
        Ok(self.fuse.forward(&cat))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let dcat = self.fuse.backward(dy);
        let &[c2, tm1, h, w] = dcat.shape() else { unreachable!() };
        let c = c2 / 2;
        let t = self.cache_t;
        debug_assert_eq!(tm1, t - 1);
        let plane = h * w;
        let out_vol = tm1 * plane;
        let vol = t * plane;

        let mut dnormed = Tensor::zeros(&[c, tm1, h, w]);
        dnormed
            .data_mut()
            .copy_from_slice(&dcat.data()[c * out_vol..]);
        let ddiff = self.bn.backward(&dnormed);

        let mut dx = Tensor::zeros(&[c, t, h, w]);
        {
            let dxd = dx.data_mut();
            let dc = dcat.data();
            let dfd = ddiff.data();
            for ci in 0..c {
                for ti in 0..tm1 {
                    let app = ci * out_vol + ti * plane;
                    let cur = ci * vol + ti * plane;
                    for p in 0..plane {
                        // appearance: dx[t] += dapp[t]
                        dxd[cur + p] += dc[app + p];
                        // difference: diff[t] = x[t+1] - x[t]
                        dxd[cur + plane + p] += dfd[app + p];
                        dxd[cur + p] -= dfd[app + p];
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn.visit_params(f);
        self.fuse.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.bn.visit_buffers(f);
    }
}

/// Bottleneck adapter: `out = W_up(GELU(W_down(x)))`, no inner skip. The
/// output is added to the host block's FFN output (parallel placement).
pub struct Adapter {
    down: PointwiseConv,
    up: PointwiseConv,
    act: Gelu,
    bottleneck: usize,
}

impl Adapter {
    pub fn new<R: Rng>(name: &str, channels: usize, ratio: f64, rng: &mut R) -> Self {
        let b = ModelConfig::adapter_bottleneck(channels, ratio);
        Adapter {
            down: PointwiseConv::he(&format!("{name}.down"), ParamGroup::Adapter, channels, b, rng),
            up: PointwiseConv::zeroed(&format!("{name}.up"), ParamGroup::Adapter, b, channels),
            act: Gelu::default(),
            bottleneck: b,
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let d = self.down.forward(x);
        let a = self.act.forward(&d);
        self.up.forward(&a)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let da = self.up.backward(dy);
        let dd = self.act.backward(&da);
        self.down.backward(&dd)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.down.visit_params(f);
        self.up.visit_params(f);
    }

    /// Number of scalar parameters: C*b + b + b*C + C.
    pub fn param_count(channels: usize, ratio: f64) -> usize {
        let b = ModelConfig::adapter_bottleneck(channels, ratio);
        channels * b + b + b * channels + channels
    }
}

enum Mixer {
    Conv {
        norm: BatchNorm,
        dw: DepthwiseConv3,
        pw: PointwiseConv,
    },
    Attention {
        ln: LayerNorm,
        attn: TemporalAttention,
        pooled_dims: (usize, usize), // (H, W) cached for backward
    },
}

/// One backbone block: depthwise position encoding, token mixer, and an FFN
/// with a parallel adapter.
pub struct Block {
    dpe: DepthwiseConv3,
    mixer: Mixer,
    norm2: BatchNorm,
    ffn1: PointwiseConv,
    ffn_act: Gelu,
    ffn2: PointwiseConv,
    adapter: Adapter,
}

impl Block {
    pub fn new<R: Rng>(
        name: &str,
        channels: usize,
        attention: bool,
        heads: usize,
        ffn_expansion: usize,
        adapter_ratio: f64,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Backbone;
        let dpe = DepthwiseConv3::new(&format!("{name}.dpe"), g, channels, rng);
        let mixer = if attention {
            Mixer::Attention {
                ln: LayerNorm::new(&format!("{name}.ln"), g, channels),
                attn: TemporalAttention::new(&format!("{name}.attn"), g, channels, heads, rng),
                pooled_dims: (0, 0),
            }
        } else {
            Mixer::Conv {
                norm: BatchNorm::new(&format!("{name}.norm1"), g, channels),
                dw: DepthwiseConv3::new(&format!("{name}.mix_dw"), g, channels, rng),
                pw: PointwiseConv::he(&format!("{name}.mix_pw"), g, channels, channels, rng),
            }
        };
        let hidden = channels * ffn_expansion;
        Block {
            dpe,
            mixer,
            norm2: BatchNorm::new(&format!("{name}.norm2"), g, channels),
            ffn1: PointwiseConv::he(&format!("{name}.ffn1"), g, channels, hidden, rng),
            ffn_act: Gelu::default(),
            ffn2: PointwiseConv::he(&format!("{name}.ffn2"), g, hidden, channels, rng),
            adapter: Adapter::new(&format!("{name}.adapter"), channels, adapter_ratio, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: LayerCtx) -> Tensor {
        // position encoding
        let mut x2 = x.clone();
        x2.add_assign(&self.dpe.forward(x));
        // token mixer
        let mut x3 = x2.clone();
        match &mut self.mixer {
            Mixer::Conv { norm, dw, pw } => {
                let n = norm.forward(&x2, ctx);
                let mixed = pw.forward(&dw.forward(&n));
                x3.add_assign(&mixed);
            }
            Mixer::Attention {
                ln,
                attn,
                pooled_dims,
            } => {
                let &[c, t, h, w] = x2.shape() else { unreachable!() };
                *pooled_dims = (h, w);
                let tokens = spatial_mean(&x2);
                let normed = ln.forward(&tokens);
                let out = attn.forward(&normed); // [C, T]
                // broadcast back over the spatial grid
                let x3d = x3.data_mut();
                let od = out.data();
                let plane = h * w;
                for ci in 0..c {
                    for ti in 0..t {
                        let v = od[ci * t + ti];
                        let base = (ci * t + ti) * plane;
                        for p in 0..plane {
                            x3d[base + p] += v;
                        }
                    }
                }
            }
        }
        // FFN + parallel adapter
        let y2 = self.norm2.forward(&x3, ctx);
        let ffn = self.ffn2.forward(&self.ffn_act.forward(&self.ffn1.forward(&y2)));
        let ad = self.adapter.forward(&y2);
        let mut out = x3;
        out.add_assign(&ffn);
        out.add_assign(&ad);
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        // FFN + adapter tail
        let mut dy2 = self
            .ffn1
            .backward(&self.ffn_act.backward(&self.ffn2.backward(dy)));
        dy2.add_assign(&self.adapter.backward(dy));
        let mut dx3 = dy.clone();
        dx3.add_assign(&self.norm2.backward(&dy2));
        // mixer
        let mut dx2 = dx3.clone();
        match &mut self.mixer {
            Mixer::Conv { norm, dw, pw } => {
                let dn = dw.backward(&pw.backward(&dx3));
                dx2.add_assign(&norm.backward(&dn));
            }
            Mixer::Attention {
                ln,
                attn,
                pooled_dims,
            } => {
                let &[c, t, h, w] = dx3.shape() else { unreachable!() };
                debug_assert_eq!((h, w), *pooled_dims);
                let plane = h * w;
                // broadcast backward: sum spatial gradients per token
                let mut dout = Tensor::zeros(&[c, t]);
                {
                    let dod = dout.data_mut();
                    let dd = dx3.data();
                    for ci in 0..c {
                        for ti in 0..t {
                            let base = (ci * t + ti) * plane;
                            dod[ci * t + ti] = dd[base..base + plane].iter().sum();
                        }
                    }
                }
                let dtokens = ln.backward(&attn.backward(&dout));
                // spatial-mean backward: distribute evenly
                {
                    let dd = dx2.data_mut();
                    let dtd = dtokens.data();
                    for ci in 0..c {
                        for ti in 0..t {
                            let g = dtd[ci * t + ti] / plane as f64;
                            let base = (ci * t + ti) * plane;
                            for p in 0..plane {
                                dd[base + p] += g;
                            }
                        }
                    }
                }
            }
        }
        // position encoding backward
        let mut dx = dx2.clone();
        dx.add_assign(&self.dpe.backward(&dx2));
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.dpe.visit_params(f);
        match &mut self.mixer {
            Mixer::Conv { norm, dw, pw } => {
                norm.visit_params(f);
                dw.visit_params(f);
                pw.visit_params(f);
            }
            Mixer::Attention { ln, attn, .. } => {
                ln.visit_params(f);
                attn.visit_params(f);
            }
        }
        self.norm2.visit_params(f);
        self.ffn1.visit_params(f);
        self.ffn2.visit_params(f);
        self.adapter.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        if let Mixer::Conv { norm, .. } = &mut self.mixer {
            norm.visit_buffers(f);
        }
        self.norm2.visit_buffers(f);
    }
}

/// Mean over the spatial grid: `[C, T, H, W] -> [C, T]`.
fn spatial_mean(x: &Tensor) -> Tensor {
    let &[c, t, h, w] = x.shape() else {
        panic!("spatial_mean expects [C,T,H,W]");
    };
    let plane = h * w;
    let mut out = Tensor::zeros(&[c, t]);
    let od = out.data_mut();
    let xd = x.data();
    for ci in 0..c {
        for ti in 0..t {
            let base = (ci * t + ti) * plane;
            od[ci * t + ti] = xd[base..base + plane].iter().sum::<f64>() / plane as f64;
        }
    }
    out
}

struct Stage {
    entry: PatchEmbed3,
    blocks: Vec<Block>,
}

impl Stage {
    fn forward(&mut self, x: &Tensor, ctx: LayerCtx) -> Tensor {
        let mut y = self.entry.forward(x);
        for b in &mut self.blocks {
            y = b.forward(&y, ctx);
        }
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        self.entry.backward(&d)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.entry.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        for b in &mut self.blocks {
            b.visit_buffers(f);
        }
    }
}

/// Regression head: transposed temporal convolution (stride equal to the
/// accumulated temporal downsampling) followed by two 1D convolutions down
/// to a single channel, cropped or edge-padded to the input length.
struct Head {
    up: ConvTranspose1d,
    act1: Gelu,
    conv1: Conv1d,
    act2: Gelu,
    conv2: Conv1d,
    produced_len: usize,
    target_len: usize,
}

impl Head {
    fn new<R: Rng>(name: &str, in_c: usize, mid_c: usize, stride: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Head;
        Head {
            up: ConvTranspose1d::new(&format!("{name}.up"), g, in_c, mid_c, stride, rng),
            act1: Gelu::default(),
            conv1: Conv1d::new(&format!("{name}.conv1"), g, mid_c, mid_c, rng),
            act2: Gelu::default(),
            conv2: Conv1d::new(&format!("{name}.conv2"), g, mid_c, 1, rng),
            produced_len: 0,
            target_len: 0,
        }
    }

    fn forward(&mut self, z: &Tensor, target_len: usize) -> Vec<f64> {
        let y = self.up.forward(z);
        let y = self.act1.forward(&y);
        let y = self.conv1.forward(&y);
        let y = self.act2.forward(&y);
        let y = self.conv2.forward(&y); // [1, L]
        let l = y.shape()[1];
        self.produced_len = l;
        self.target_len = target_len;
        let yd = y.data();
        let mut pred = Vec::with_capacity(target_len);
        for t in 0..target_len {
            pred.push(yd[t.min(l - 1)]);
        }
        pred
    }

    fn backward(&mut self, dpred: &[f64]) -> Tensor {
        let l = self.produced_len;
        let t = self.target_len;
        let mut dy = Tensor::zeros(&[1, l]);
        {
            let dd = dy.data_mut();
            for (ti, &g) in dpred.iter().enumerate().take(t) {
                dd[ti.min(l - 1)] += g;
            }
        }
        let d = self.conv2.backward(&dy);
        let d = self.act2.backward(&d);
        let d = self.conv1.backward(&d);
        let d = self.act1.backward(&d);
        self.up.backward(&d)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.up.visit_params(f);
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
    }
}

/// The full regression model with its training-stage policy.
pub struct Model {
    pub config: ModelConfig,
    diffnorm: DiffNorm,
    stages: Vec<Stage>,
    head: Head,
    stage_policy: TrainStage,
    // caches for the tap-point backward
    adain_cache: Option<AdainCache>,
    mix_cache: Option<MixCache>,
    gap_dims: (usize, usize),
    input_t: usize,
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels;
        let diffnorm = DiffNorm::new("diffnorm", config.in_channels, ch[0], rng);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let in_c = if s == 0 { ch[0] } else { ch[s - 1] };
            let entry = PatchEmbed3::new(
                &format!("stage{}.entry", s + 1),
                ParamGroup::Backbone,
                in_c,
                ch[s],
                (TEMPORAL_STRIDES[s], SPATIAL_STRIDE, SPATIAL_STRIDE),
                rng,
            );
            let blocks = (0..config.blocks_per_stage[s])
                .map(|b| {
                    Block::new(
                        &format!("stage{}.block{}", s + 1, b),
                        ch[s],
                        config.attention_stages[s],
                        config.attention_heads,
                        config.ffn_expansion,
                        config.adapter_ratio,
                        rng,
                    )
                })
                .collect();
            stages.push(Stage { entry, blocks });
        }
        let head = Head::new(
            "head",
            ch[3],
            config.head_channels,
            ModelConfig::temporal_downsample_total(),
            rng,
        );
        Ok(Model {
            config,
            diffnorm,
            stages,
            head,
            stage_policy: TrainStage::Initial,
            adain_cache: None,
            mix_cache: None,
            gap_dims: (0, 0),
            input_t: 0,
        })
    }

    pub fn stage_policy(&self) -> TrainStage {
        self.stage_policy
    }

    /// Switch between initial (everything trainable) and incremental
    /// (backbone frozen, running statistics pinned) training.
    pub fn set_stage(&mut self, stage: TrainStage) -> ParameterPartition {
        self.stage_policy = stage;
        self.partition()
    }

    pub fn partition(&mut self) -> ParameterPartition {
        let mut part = ParameterPartition {
            backbone_params: Vec::new(),
            adapter_params: Vec::new(),
            head_params: Vec::new(),
        };
        self.visit_params(&mut |p| match p.group {
            ParamGroup::Backbone => part.backbone_params.push(p.name.clone()),
            ParamGroup::Adapter => part.adapter_params.push(p.name.clone()),
            ParamGroup::Head => part.head_params.push(p.name.clone()),
        });
        part
    }

    pub fn forward(&mut self, x: &Tensor, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let shape = x.shape();
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected [{}, T, H, W], got {:?}",
                self.config.in_channels, shape
            )));
        }
        let (t, h, w) = (shape[1], shape[2], shape[3]);
        self.config.check_input(t, h, w)?;
        self.input_t = t;
        let ctx = LayerCtx {
            train: opts.train,
            stats_frozen: self.stage_policy == TrainStage::Incremental,
        };

        let mut y = self.diffnorm.forward(x, ctx)?;
        y = self.stages[0].forward(&y, ctx);
        y = self.stages[1].forward(&y, ctx);

        // shallow tap: optional style transfer
        self.adain_cache = None;
        if let Some((mu, sigma)) = opts.style {
            let (out, cache) = adain_forward(&y, mu, sigma)?;
            y = out;
            self.adain_cache = Some(cache);
        }
        let h_tap = y.clone();

        y = self.stages[2].forward(&y, ctx);
        y = self.stages[3].forward(&y, ctx);

        let &[_, _, h4, w4] = y.shape() else { unreachable!() };
        self.gap_dims = (h4, w4);
        let mut z = spatial_mean(&y);

        // high-level tap: optional noise mixing
        self.mix_cache = None;
        if let Some((n, alpha)) = opts.noise {
            let (out, cache) = mix_noise_forward(&z, n, alpha)?;
            z = out;
            self.mix_cache = Some(cache);
        }
        let z_tap = z.clone();

        let pred = self.head.forward(&z, t);
        Ok(ForwardOutput {
            pred,
            taps: FeatureTaps { h: h_tap, z: z_tap },
        })
    }

    /// Backpropagate a gradient on the prediction; accumulates parameter
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, dpred: &[f64]) -> Tensor {
        assert_eq!(dpred.len(), self.input_t, "gradient length mismatch");
        let mut dz = self.head.backward(dpred);
        if let Some(cache) = &self.mix_cache {
            dz = crate::augment::mix_noise_backward(cache, &dz);
        }
        // spatial mean backward
        let (h4, w4) = self.gap_dims;
        let &[c2, t2] = dz.shape() else { unreachable!() };
        let plane = h4 * w4;
        let mut ds4 = Tensor::zeros(&[c2, t2, h4, w4]);
        {
            let dd = ds4.data_mut();
            let dzd = dz.data();
            for ci in 0..c2 {
                for ti in 0..t2 {
                    let g = dzd[ci * t2 + ti] / plane as f64;
                    let base = (ci * t2 + ti) * plane;
                    dd[base..base + plane].iter_mut().for_each(|v| *v = g);
                }
            }
        }
        let mut d = self.stages[3].backward(&ds4);
        d = self.stages[2].backward(&d);
        if let Some(cache) = &self.adain_cache {
            d = crate::augment::adain_backward(cache, &d);
        }
        d = self.stages[1].backward(&d);
        d = self.stages[0].backward(&d);
        self.diffnorm.backward(&d)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.diffnorm.visit_params(f);
        for s in &mut self.stages {
            s.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.diffnorm.visit_buffers(f);
        for s in &mut self.stages {
            s.visit_buffers(f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Scale all accumulated gradients (e.g. by 1/batch).
    pub fn scale_grads(&mut self, s: f64) {
        self.visit_params(&mut |p| p.grad.scale(s));
    }

    /// Whether a parameter group is trainable under the current stage.
    pub fn group_trainable(&self, group: ParamGroup) -> bool {
        match self.stage_policy {
            TrainStage::Initial => true,
            TrainStage::Incremental => group != ParamGroup::Backbone,
        }
    }

    /// Squared global gradient norm over currently trainable parameters.
    pub fn trainable_grad_sq_norm(&mut self) -> f64 {
        let policy = self.stage_policy;
        let mut n = 0.0;
        self.visit_params(&mut |p| {
            let trainable = match policy {
                TrainStage::Initial => true,
                TrainStage::Incremental => p.group != ParamGroup::Backbone,
            };
            if trainable {
                n += p.grad.sq_norm();
            }
        });
        n
    }

    /// Apply one optimizer update to all currently trainable parameters.
    pub fn optimizer_step(&mut self, opt: &mut Adam) {
        opt.next_step();
        let policy = self.stage_policy;
        self.visit_params(&mut |p| {
            let trainable = match policy {
                TrainStage::Initial => true,
                TrainStage::Incremental => p.group != ParamGroup::Backbone,
            };
            if trainable {
                opt.update(p);
            }
        });
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn trainable_param_count(&mut self) -> usize {
        let policy = self.stage_policy;
        let mut n = 0;
        self.visit_params(&mut |p| {
            let trainable = match policy {
                TrainStage::Initial => true,
                TrainStage::Incremental => p.group != ParamGroup::Backbone,
            };
            if trainable {
                n += p.value.len();
            }
        });
        n
    }

    /// SHA-256 digest over the exact bit patterns of one parameter group;
    /// the backbone digest also covers normalization running statistics.
    pub fn group_checksum(&mut self, group: ParamGroup) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.visit_params(&mut |p| {
            if p.group == group {
                for &v in p.value.data() {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
        });
        if group == ParamGroup::Backbone {
            self.visit_buffers(&mut |b| {
                for &v in b.value.data() {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            });
        }
        hasher.finalize().into()
    }

    /// Named parameter snapshot (values only), used for checkpointing.
    pub fn export_params(&mut self) -> Vec<(String, ParamGroup, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.group, p.value.clone())));
        out
    }

    pub fn export_buffers(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_buffers(&mut |b| out.push((b.name.clone(), b.value.clone())));
        out
    }

    /// Load parameter and buffer values by name. Every model tensor must be
    /// present with a matching shape.
    pub fn import_state(
        &mut self,
        params: &std::collections::HashMap<String, Tensor>,
        buffers: &std::collections::HashMap<String, Tensor>,
    ) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        self.visit_params(&mut |p| {
            if let Some(v) = params.get(&p.name) {
                if v.shape() == p.value.shape() {
                    p.value = v.clone();
                } else {
                    missing.push(format!("{} (shape mismatch)", p.name));
                }
            } else {
                missing.push(p.name.clone());
            }
        });
        self.visit_buffers(&mut |b| {
            if let Some(v) = buffers.get(&b.name) {
                if v.shape() == b.value.shape() {
                    b.value = v.clone();
                } else {
                    missing.push(format!("{} (shape mismatch)", b.name));
                }
            } else {
                missing.push(b.name.clone());
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Serde(format!(
                "checkpoint missing or mismatched tensors: {missing:?}"
            )))
        }
    }
}
