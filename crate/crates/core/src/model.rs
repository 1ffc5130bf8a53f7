//! Dual-input U-Net with SE blocks and channel-split latents, plus the
//! spectrogram discriminator.
//!
//! Every encoder layer output is split in two: channels `[0, c/2)` carry the
//! source factor and `[c/2, c)` the reverb factor. Decoding one track with the
//! reverb halves of another is what performs the conversion.

use ndarray::{s, Array1, Array3, Array4, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, join, Conv2d, Geom, Params, SeCache, SqueezeExcite};
use crate::stft::{MagnitudeSpectrogram, StftConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    /// Kernel of both convs in the first (and last decoder) block.
    pub first_kernel: usize,
    pub kernel: usize,
    pub se_reduction: usize,
    pub input_channels: usize,
    pub freq_bins: usize,
    pub time_frames: usize,
    /// Discriminator pooling target `(freq, time)`; also the head kernel.
    pub disc_pool: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 512],
            first_kernel: 5,
            kernel: 3,
            se_reduction: 16,
            input_channels: 2,
            freq_bins: 1024,
            time_frames: 640,
            disc_pool: (4, 3),
        }
    }
}

impl ModelConfig {
    /// Small network for gradient checks and overfit runs: 128 bins x 96
    /// frames, i.e. a 256-point STFT over 6144 samples.
    pub fn reduced() -> Self {
        Self {
            channels: vec![4, 8, 16, 32, 64],
            freq_bins: 128,
            time_frames: 96,
            ..Self::default()
        }
    }

    pub fn n_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.channels.is_empty() {
            return bad("model needs at least one layer".into());
        }
        if self.channels.iter().any(|&c| c == 0 || c % 2 != 0) {
            return bad(format!("channel counts must be even and positive: {:?}", self.channels));
        }
        if self.channels.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad(format!("channel counts must double per layer: {:?}", self.channels));
        }
        if self.first_kernel.is_multiple_of(2) || self.kernel.is_multiple_of(2) {
            return bad("kernels must be odd".into());
        }
        if self.se_reduction == 0 || self.input_channels == 0 {
            return bad("se_reduction and input_channels must be positive".into());
        }
        let scale = 1usize << self.n_layers();
        if !self.freq_bins.is_multiple_of(scale) || !self.time_frames.is_multiple_of(scale) {
            return bad(format!(
                "input {}x{} is not divisible by 2^{}",
                self.freq_bins,
                self.time_frames,
                self.n_layers()
            ));
        }
        let (fh, fw) = self.bottleneck_hw();
        if fh < self.disc_pool.0 || fw < self.disc_pool.1 {
            return bad(format!(
                "bottleneck map {fh}x{fw} is smaller than the discriminator pool {:?}",
                self.disc_pool
            ));
        }
        Ok(())
    }

    /// Shape `(channels, freq, time)` of encoder layer `i` (0-based).
    pub fn layer_shape(&self, i: usize) -> (usize, usize, usize) {
        let f = 1 << (i + 1);
        (self.channels[i], self.freq_bins / f, self.time_frames / f)
    }

    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let f = 1 << self.n_layers();
        (self.freq_bins / f, self.time_frames / f)
    }

    /// Analysis settings whose cropped half-spectrum matches `freq_bins`.
    pub fn stft_config(&self) -> StftConfig {
        StftConfig::with_window(2 * self.freq_bins)
    }

    fn kernel_for(&self, layer: usize) -> usize {
        if layer == 0 {
            self.first_kernel
        } else {
            self.kernel
        }
    }
}

/// conv -> ReLU -> SE -> conv (stride 2 or transposed) -> ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub conv1: Conv2d,
    pub se: SqueezeExcite,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    input: Array4<f64>,
    a1: Array4<f64>,
    se: SeCache,
    gated: Array4<f64>,
    out: Array4<f64>,
}

impl BlockTrace {
    pub fn output(&self) -> &Array4<f64> {
        &self.out
    }

    pub fn se_gates(&self) -> &ndarray::Array2<f64> {
        &self.se.gates
    }
}

impl SeBlock {
    fn encoder(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, reduction: usize) -> Self {
        Self {
            conv1: Conv2d::new(rng, c_in, c_out, Geom::same(k, 1)),
            se: SqueezeExcite::new(rng, c_out, reduction),
            conv2: Conv2d::new(rng, c_out, c_out, Geom::same(k, 2)),
        }
    }

    fn decoder(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, reduction: usize) -> Self {
        Self {
            conv1: Conv2d::new(rng, c_in, c_out, Geom::same(k, 1)),
            se: SqueezeExcite::new(rng, c_out, reduction),
            conv2: Conv2d::new_transposed(rng, c_out, c_out, Geom::same(k, 2)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            se: self.se.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }

    pub fn forward(&self, x: Array4<f64>) -> BlockTrace {
        let mut a1 = self.conv1.forward(&x);
        nn::relu(&mut a1);
        let (gated, se) = self.se.forward(&a1);
        let mut out = self.conv2.forward(&gated);
        nn::relu(&mut out);
        BlockTrace {
            input: x,
            a1,
            se,
            gated,
            out,
        }
    }

    /// Forward pass that keeps nothing but the output.
    pub fn apply(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut a1 = self.conv1.forward(x);
        nn::relu(&mut a1);
        let (gated, _) = self.se.forward(&a1);
        drop(a1);
        let mut out = self.conv2.forward(&gated);
        nn::relu(&mut out);
        out
    }

    pub fn backward(&self, t: &BlockTrace, mut dout: Array4<f64>, grad: &mut SeBlock, need_dx: bool) -> Option<Array4<f64>> {
        nn::relu_backward(&t.out, &mut dout);
        let dgated = self.conv2.backward(&t.gated, &dout, &mut grad.conv2, true).unwrap();
        let mut da1 = self.se.backward(&t.a1, &t.se, &dgated, &mut grad.se);
        nn::relu_backward(&t.a1, &mut da1);
        self.conv1.backward(&t.input, &da1, &mut grad.conv1, need_dx)
    }
}

impl Params for SeBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.se.visit(&join(prefix, "se"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.se.visit_mut(&join(prefix, "se"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

fn visit_blocks<'a>(blocks: &'a [SeBlock], prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
    for (i, b) in blocks.iter().enumerate() {
        b.visit(&join(prefix, &i.to_string()), f);
    }
}

fn visit_blocks_mut(blocks: &mut [SeBlock], prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit_mut(&join(prefix, &i.to_string()), f);
    }
}

/// Per-layer encoder outputs, batch-first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStack {
    pub layers: Vec<Array4<f64>>,
}

impl LatentStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, i: usize) -> &Array4<f64> {
        &self.layers[i]
    }

    fn half(&self, i: usize) -> usize {
        self.layers[i].dim().1 / 2
    }

    pub fn source_half(&self, i: usize) -> ArrayView4<'_, f64> {
        let h = self.half(i);
        self.layers[i].slice(s![.., ..h, .., ..])
    }

    pub fn reverb_half(&self, i: usize) -> ArrayView4<'_, f64> {
        let h = self.half(i);
        self.layers[i].slice(s![.., h.., .., ..])
    }

    pub fn reverb_half_mut(&mut self, i: usize) -> ndarray::ArrayViewMut4<'_, f64> {
        let h = self.half(i);
        self.layers[i].slice_mut(s![.., h.., .., ..])
    }

    /// Batch size of the stack.
    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.dim().0)
    }

    fn check_compatible(&self, other: &LatentStack) -> Result<()> {
        let same = self.len() == other.len() && self.layers.iter().zip(&other.layers).all(|(a, b)| a.dim() == b.dim());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("latent stacks come from different configurations".into()))
        }
    }
}

/// `own source half ++ counterpart reverb half` for one layer.
fn swapped_layer(own: &LatentStack, other: &LatentStack, i: usize) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[own.source_half(i), other.reverb_half(i)]).expect("compatible stacks")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<SeBlock>,
}

pub struct EncodeTrace {
    blocks: Vec<BlockTrace>,
}

impl EncodeTrace {
    pub fn stack(&self) -> LatentStack {
        LatentStack {
            layers: self.blocks.iter().map(|b| b.out.clone()).collect(),
        }
    }

    pub fn blocks(&self) -> &[BlockTrace] {
        &self.blocks
    }
}

impl Encoder {
    pub fn forward_traced(&self, x: &Array4<f64>) -> EncodeTrace {
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let t = b.forward(h);
            h = t.out.clone();
            blocks.push(t);
        }
        EncodeTrace { blocks }
    }

    pub fn forward(&self, x: &Array4<f64>) -> LatentStack {
        let mut layers: Vec<Array4<f64>> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let out = b.apply(layers.last().unwrap_or(x));
            layers.push(out);
        }
        LatentStack { layers }
    }

    /// `d_layers[i]` is the loss gradient w.r.t. layer `i`'s output (from
    /// skips, the bottleneck and latent terms); block inputs chain backwards.
    pub fn backward(&self, t: &EncodeTrace, mut d_layers: Vec<Array4<f64>>, grad: &mut Encoder, need_dx: bool) -> Option<Array4<f64>> {
        let n = self.blocks.len();
        let mut carry: Option<Array4<f64>> = None;
        for i in (0..n).rev() {
            let mut d = std::mem::replace(&mut d_layers[i], Array4::zeros((0, 0, 0, 0)));
            if let Some(c) = carry.take() {
                d += &c;
            }
            carry = self.blocks[i].backward(&t.blocks[i], d, &mut grad.blocks[i], i > 0 || need_dx);
        }
        carry
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// Ordered from the bottleneck level down to level 1.
    pub blocks: Vec<SeBlock>,
    pub proj: Conv2d,
}

pub struct DecodeTrace {
    blocks: Vec<BlockTrace>,
    proj_in: Array4<f64>,
    out: Array4<f64>,
}

impl DecodeTrace {
    pub fn output(&self) -> &Array4<f64> {
        &self.out
    }
}

/// Gradients flowing out of the decoder into the two latent stacks. Entries
/// are full layer-shaped; the unused half is zero.
pub struct StackGrads {
    pub own: Vec<Array4<f64>>,
    pub other: Vec<Array4<f64>>,
}

impl Decoder {
    /// Level index (1-based, counting up from the output) of `blocks[idx]`.
    fn level(&self, idx: usize) -> usize {
        self.blocks.len() - idx
    }

    fn input_for(&self, idx: usize, prev: Option<Array4<f64>>, own: &LatentStack, other: &LatentStack) -> Array4<f64> {
        let n = self.blocks.len();
        let level = self.level(idx);
        match prev {
            None => swapped_layer(own, other, n - 1),
            Some(h) if level >= 2 => nn::concat_channels(&h, &swapped_layer(own, other, level - 1)),
            Some(h) => h,
        }
    }

    pub fn forward_traced(&self, own: &LatentStack, other: &LatentStack) -> DecodeTrace {
        let mut prev = None;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (idx, b) in self.blocks.iter().enumerate() {
            let x = self.input_for(idx, prev.take(), own, other);
            let t = b.forward(x);
            prev = Some(t.out.clone());
            blocks.push(t);
        }
        let proj_in = prev.expect("at least one decoder block");
        let mut out = self.proj.forward(&proj_in);
        nn::relu(&mut out);
        DecodeTrace { blocks, proj_in, out }
    }

    pub fn forward(&self, own: &LatentStack, other: &LatentStack) -> Array4<f64> {
        let mut prev = None;
        for (idx, b) in self.blocks.iter().enumerate() {
            let x = self.input_for(idx, prev.take(), own, other);
            prev = Some(b.apply(&x));
        }
        let mut out = self.proj.forward(&prev.expect("at least one decoder block"));
        nn::relu(&mut out);
        out
    }

    pub fn backward(&self, t: &DecodeTrace, mut dout: Array4<f64>, grad: &mut Decoder, own: &LatentStack) -> StackGrads {
        let n = self.blocks.len();
        let mut sg = StackGrads {
            own: own.layers.iter().map(|l| Array4::zeros(l.raw_dim())).collect(),
            other: own.layers.iter().map(|l| Array4::zeros(l.raw_dim())).collect(),
        };
        nn::relu_backward(&t.out, &mut dout);
        let mut dh = self.proj.backward(&t.proj_in, &dout, &mut grad.proj, true).unwrap();
        for idx in (0..n).rev() {
            let level = self.level(idx);
            let dx = self.blocks[idx].backward(&t.blocks[idx], dh, &mut grad.blocks[idx], true).unwrap();
            let (dskip, rest) = if idx == 0 {
                (Some((dx, n - 1)), None)
            } else if level >= 2 {
                let prev_c = t.blocks[idx - 1].out.dim().1;
                let (dprev, dskip) = nn::split_channels(&dx, prev_c);
                (Some((dskip, level - 1)), Some(dprev))
            } else {
                (None, Some(dx))
            };
            if let Some((d, layer)) = dskip {
                let half = d.dim().1 / 2;
                sg.own[layer].slice_mut(s![.., ..half, .., ..]).assign(&d.slice(s![.., ..half, .., ..]));
                sg.other[layer].slice_mut(s![.., half.., .., ..]).assign(&d.slice(s![.., half.., .., ..]));
            }
            match rest {
                Some(r) => dh = r,
                None => break,
            }
        }
        sg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Valid convolution whose kernel covers the whole pooled map.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub trunk: Vec<SeBlock>,
    pub head: DenseHead,
}

pub struct DiscTrace {
    blocks: Vec<BlockTrace>,
    pool_arg: Vec<usize>,
    pooled: Array4<f64>,
    pub prob: Array1<f64>,
}

impl Discriminator {
    pub fn forward_traced(&self, x: &Array4<f64>, pool: (usize, usize)) -> DiscTrace {
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.trunk.len());
        for b in &self.trunk {
            let t = b.forward(h);
            h = t.out.clone();
            blocks.push(t);
        }
        let (pooled, pool_arg) = nn::max_pool_to(&h, pool.0, pool.1);
        let prob = self.head_prob(&pooled);
        DiscTrace {
            blocks,
            pool_arg,
            pooled,
            prob,
        }
    }

    pub fn forward(&self, x: &Array4<f64>, pool: (usize, usize)) -> Array1<f64> {
        let mut h = x.clone();
        for b in &self.trunk {
            h = b.apply(&h);
        }
        let (pooled, _) = nn::max_pool_to(&h, pool.0, pool.1);
        self.head_prob(&pooled)
    }

    fn head_prob(&self, pooled: &Array4<f64>) -> Array1<f64> {
        let w = self.head.weight.index_axis(Axis(0), 0);
        pooled
            .outer_iter()
            .map(|p| nn::sigmoid((&p * &w).sum() + self.head.bias[0]))
            .collect()
    }

    /// Backpropagates `d_prob` (gradient w.r.t. each example's probability).
    pub fn backward(&self, t: &DiscTrace, d_prob: &Array1<f64>, grad: &mut Discriminator, need_dx: bool) -> Option<Array4<f64>> {
        let w = self.head.weight.index_axis(Axis(0), 0).to_owned();
        let mut dpooled = Array4::zeros(t.pooled.raw_dim());
        for (i, (&dp, &p)) in d_prob.iter().zip(&t.prob).enumerate() {
            let dlogit = dp * p * (1.0 - p);
            grad.head.bias[0] += dlogit;
            let pi = t.pooled.index_axis(Axis(0), i);
            let mut gw = grad.head.weight.index_axis_mut(Axis(0), 0);
            gw.scaled_add(dlogit, &pi);
            dpooled.index_axis_mut(Axis(0), i).assign(&(&w * dlogit));
        }
        let last = t.blocks.last().expect("non-empty trunk");
        let mut dh = nn::max_pool_backward(last.out.dim(), &t.pool_arg, &dpooled);
        for i in (0..self.trunk.len()).rev() {
            {
                let d = self.trunk[i].backward(&t.blocks[i], dh, &mut grad.trunk[i], i > 0 || need_dx)?;
                dh = d
            }
        }
        Some(dh)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.iter().map(SeBlock::zeros_like).collect(),
            head: DenseHead {
                weight: Array4::zeros(self.head.weight.raw_dim()),
                bias: Array1::zeros(1),
            },
        }
    }
}

impl Params for Discriminator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        visit_blocks(&self.trunk, &join(prefix, "trunk"), f);
        f(join(prefix, "head.weight"), self.head.weight.view().into_dyn());
        f(join(prefix, "head.bias"), self.head.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        visit_blocks_mut(&mut self.trunk, &join(prefix, "trunk"), f);
        f(join(prefix, "head.weight"), self.head.weight.view_mut().into_dyn());
        f(join(prefix, "head.bias"), self.head.bias.view_mut().into_dyn());
    }
}

impl Generator {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: Encoder {
                blocks: self.encoder.blocks.iter().map(SeBlock::zeros_like).collect(),
            },
            decoder: Decoder {
                blocks: self.decoder.blocks.iter().map(SeBlock::zeros_like).collect(),
                proj: self.decoder.proj.zeros_like(),
            },
        }
    }
}

impl Params for Generator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        visit_blocks(&self.encoder.blocks, &join(prefix, "encoder"), f);
        visit_blocks(&self.decoder.blocks, &join(prefix, "decoder"), f);
        self.decoder.proj.visit(&join(prefix, "decoder.proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        visit_blocks_mut(&mut self.encoder.blocks, &join(prefix, "encoder"), f);
        visit_blocks_mut(&mut self.decoder.blocks, &join(prefix, "decoder"), f);
        self.decoder.proj.visit_mut(&join(prefix, "decoder.proj"), f);
    }
}

/// Generator and discriminator weights together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Params for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, f64>)) {
        self.generator.visit(&join(prefix, "generator"), f);
        self.discriminator.visit(&join(prefix, "discriminator"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>)) {
        self.generator.visit_mut(&join(prefix, "generator"), f);
        self.discriminator.visit_mut(&join(prefix, "discriminator"), f);
    }
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = &config.channels;
        let n = ch.len();
        let r = config.se_reduction;

        let mut enc = Vec::with_capacity(n);
        let mut c_in = config.input_channels;
        for (i, &c) in ch.iter().enumerate() {
            enc.push(SeBlock::encoder(&mut rng, c_in, c, config.kernel_for(i), r));
            c_in = c;
        }

        let mut dec = Vec::with_capacity(n);
        for level in (1..=n).rev() {
            let c_in = if level == n {
                ch[n - 1]
            } else if level >= 2 {
                2 * ch[level - 1]
            } else {
                ch[0]
            };
            let c_out = if level >= 2 { ch[level - 2] } else { ch[0] };
            dec.push(SeBlock::decoder(&mut rng, c_in, c_out, config.kernel_for(level - 1), r));
        }
        let proj = Conv2d::new(&mut rng, ch[0], config.input_channels, Geom::same(1, 1));

        let mut trunk = Vec::with_capacity(n);
        let mut c_in = config.input_channels;
        for (i, &c) in ch.iter().enumerate() {
            trunk.push(SeBlock::encoder(&mut rng, c_in, c, config.kernel_for(i), r));
            c_in = c;
        }
        let (ph, pw) = config.disc_pool;
        let bound = (6.0 / (ch[n - 1] * ph * pw) as f64).sqrt();
        let head = DenseHead {
            weight: Array4::from_shape_simple_fn((1, ch[n - 1], ph, pw), || rng.gen_range(-bound..bound)),
            bias: Array1::zeros(1),
        };

        Ok(Self {
            generator: Generator {
                encoder: Encoder { blocks: enc },
                decoder: Decoder { blocks: dec, proj },
            },
            discriminator: Discriminator { trunk, head },
            config,
        })
    }

    /// Rejects tensors whose shape differs from the configured input.
    pub fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let c = &self.config;
        let (_, ch, f, t) = x.dim();
        if ch != c.input_channels || f != c.freq_bins || t != c.time_frames {
            return Err(Error::Shape(format!(
                "network input {ch}x{f}x{t} does not match configured {}x{}x{}",
                c.input_channels, c.freq_bins, c.time_frames
            )));
        }
        Ok(())
    }

    pub fn encode_batch(&self, x: &Array4<f64>) -> Result<LatentStack> {
        self.check_input(x)?;
        Ok(self.generator.encoder.forward(x))
    }

    pub fn decode_batch(&self, own: &LatentStack, other: &LatentStack) -> Result<Array4<f64>> {
        own.check_compatible(other)?;
        if own.len() != self.config.n_layers() {
            return Err(Error::Shape("latent stack depth does not match the model".into()));
        }
        for (i, l) in own.layers.iter().enumerate() {
            let (c, h, w) = self.config.layer_shape(i);
            if l.dim().1 != c || l.dim().2 != h || l.dim().3 != w {
                return Err(Error::Shape(format!("latent layer {i} has shape {:?}", l.dim())));
            }
        }
        Ok(self.generator.decoder.forward(own, other))
    }

    pub fn convert_batch(&self, a: &Array4<f64>, b: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
        let sa = self.encode_batch(a)?;
        let sb = self.encode_batch(b)?;
        Ok((self.decode_batch(&sa, &sb)?, self.decode_batch(&sb, &sa)?))
    }

    pub fn discriminate_batch(&self, x: &Array4<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.discriminator.forward(x, self.config.disc_pool))
    }

    /// Stereo magnitude (Nyquist cropped) as a batch of one.
    pub fn to_input(&self, mag: &MagnitudeSpectrogram) -> Result<Array4<f64>> {
        let v = mag.network_bins();
        let x = v.insert_axis(Axis(0));
        self.check_input(&x)?;
        Ok(x)
    }

    pub fn to_magnitude(&self, out: Array4<f64>) -> Result<MagnitudeSpectrogram> {
        if out.dim().0 != 1 {
            return Err(Error::Shape("expected a batch of one".into()));
        }
        let v: Array3<f64> = out.index_axis_move(Axis(0), 0);
        MagnitudeSpectrogram::from_network_bins(v, self.config.stft_config())
    }
}

pub fn encode(mag: &MagnitudeSpectrogram, params: &ModelParams) -> Result<LatentStack> {
    params.encode_batch(&params.to_input(mag)?)
}

pub fn swap_and_decode(stack_self: &LatentStack, stack_ref: &LatentStack, params: &ModelParams) -> Result<MagnitudeSpectrogram> {
    let out = params.decode_batch(stack_self, stack_ref)?;
    params.to_magnitude(out)
}

pub fn convert(
    mag_a: &MagnitudeSpectrogram,
    mag_b: &MagnitudeSpectrogram,
    params: &ModelParams,
) -> Result<(MagnitudeSpectrogram, MagnitudeSpectrogram)> {
    let (oa, ob) = params.convert_batch(&params.to_input(mag_a)?, &params.to_input(mag_b)?)?;
    Ok((params.to_magnitude(oa)?, params.to_magnitude(ob)?))
}

pub fn discriminate(mag: &MagnitudeSpectrogram, params: &ModelParams) -> Result<f64> {
    Ok(params.discriminate_batch(&params.to_input(mag)?)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: vec![2, 4, 8],
            freq_bins: 32,
            time_frames: 24,
            se_reduction: 2,
            ..ModelConfig::default()
        }
    }

    fn input(cfg: &ModelConfig, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((1, cfg.input_channels, cfg.freq_bins, cfg.time_frames), || rng.gen_range(0.0..2.0))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::reduced().validate().is_ok());
        let odd = ModelConfig {
            channels: vec![4, 8, 15],
            ..tiny()
        };
        assert!(odd.validate().is_err());
        let not_doubling = ModelConfig {
            channels: vec![4, 8, 12],
            ..tiny()
        };
        assert!(not_doubling.validate().is_err());
        let indivisible = ModelConfig {
            freq_bins: 64,
            time_frames: 40,
            ..ModelConfig::reduced()
        };
        assert!(indivisible.validate().is_err());
    }

    #[test]
    fn layer_shapes_halve() {
        let cfg = ModelConfig::default();
        let shapes: Vec<_> = (0..5).map(|i| cfg.layer_shape(i)).collect();
        assert_eq!(shapes, vec![(32, 512, 320), (64, 256, 160), (128, 128, 80), (256, 64, 40), (512, 32, 20)]);
    }

    #[test]
    fn tiny_model_shapes_and_nonnegative_output() {
        let cfg = tiny();
        let p = ModelParams::new(cfg.clone(), 0).unwrap();
        let x = input(&cfg, 1);
        let stack = p.encode_batch(&x).unwrap();
        for i in 0..3 {
            let (c, h, w) = cfg.layer_shape(i);
            assert_eq!(stack.layer(i).dim(), (1, c, h, w));
        }
        let out = p.decode_batch(&stack, &stack).unwrap();
        assert_eq!(out.dim(), x.dim());
        assert!(out.iter().all(|&v| v >= 0.0));
        let d = p.discriminate_batch(&x).unwrap();
        assert!(d[0] > 0.0 && d[0] < 1.0);
    }

    #[test]
    fn traced_and_plain_paths_agree() {
        let cfg = tiny();
        let p = ModelParams::new(cfg.clone(), 3).unwrap();
        let a = input(&cfg, 4);
        let b = input(&cfg, 5);
        let ta = p.generator.encoder.forward_traced(&a);
        let tb = p.generator.encoder.forward_traced(&b);
        assert_eq!(ta.stack(), p.encode_batch(&a).unwrap());
        let d = p.generator.decoder.forward_traced(&ta.stack(), &tb.stack());
        assert_eq!(d.output(), &p.decode_batch(&ta.stack(), &tb.stack()).unwrap());
        let dt = p.discriminator.forward_traced(&a, cfg.disc_pool);
        assert_eq!(dt.prob, p.discriminate_batch(&a).unwrap());
    }

    #[test]
    fn halves_partition_each_layer() {
        let cfg = tiny();
        let p = ModelParams::new(cfg.clone(), 0).unwrap();
        let stack = p.encode_batch(&input(&cfg, 2)).unwrap();
        for i in 0..stack.len() {
            let joined = ndarray::concatenate(Axis(1), &[stack.source_half(i), stack.reverb_half(i)]).unwrap();
            assert_eq!(&joined, stack.layer(i));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = tiny();
        let p = ModelParams::new(cfg, 0).unwrap();
        let x = Array4::zeros((1, 2, 16, 24));
        assert!(matches!(p.encode_batch(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_names_are_unique_and_seeded() {
        let p = ModelParams::new(tiny(), 9).unwrap();
        let names = p.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.iter().any(|n| n == "generator.encoder.0.conv1.weight"));
        assert!(names.iter().any(|n| n == "discriminator.head.weight"));
        assert_eq!(p, ModelParams::new(tiny(), 9).unwrap());
        assert_ne!(p, ModelParams::new(tiny(), 10).unwrap());
    }
}
