//! Shared-encoder, multi-decoder segmentation network.
//!
//! The encoder is a ladder of conv blocks with 2× max pooling after each,
//! followed by patch embedding and token blocks. Every decoder starts with
//! its own token block, then climbs back to input resolution with its own
//! upsampling strategy, concatenating the matching encoder skip at each
//! stage, and ends in a 1×1 classification head.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kan::{KanConfig, KanLayer};
use crate::nn::blocks::{token_block_registry, tokens_to_map};
use crate::nn::upsample::registry as upsampler_registry;
use crate::nn::{Buffer, ConvBlock, Module, Param, PatchEmbedding, TokenBlock, Upsampler};
use crate::tensor::{add_channel_bias, conv2d, max_pool2d, no_grad, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Encoder widths, shallowest first.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub patch: usize,
    /// Token blocks at the bottom of the encoder.
    pub kan_blocks: usize,
    /// One upsampling strategy per decoder.
    pub strategies: Vec<String>,
    /// Token block kind, e.g. `kan_conv` or `conv`.
    pub token_block: String,
    pub kan: KanConfig,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            channels: vec![16, 32, 64],
            embed_dim: 128,
            patch: 2,
            kan_blocks: 1,
            strategies: ["nearest", "bilinear", "transposed_conv"].map(String::from).to_vec(),
            token_block: "kan_conv".into(),
            kan: KanConfig::default(),
            height: 64,
            width: 64,
        }
    }
}

impl ModelConfig {
    pub fn num_decoders(&self) -> usize {
        self.strategies.len()
    }

    /// Spatial size must be a multiple of this.
    pub fn divisor(&self) -> usize {
        (1 << self.channels.len()) * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        let b = self.num_decoders();
        if !(2..=3).contains(&b) {
            return Err(Error::Config(format!("need 2 or 3 decoders, got {b}")));
        }
        let distinct: HashSet<&String> = self.strategies.iter().collect();
        if distinct.len() != b {
            return Err(Error::Config(format!("upsampling strategies must be pairwise distinct: {:?}", self.strategies)));
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<()> {
        let positive = self.in_channels > 0
            && self.num_classes > 0
            && !self.channels.is_empty()
            && self.channels.iter().all(|&c| c > 0)
            && self.embed_dim > 0
            && self.patch > 0
            && self.kan_blocks > 0;
        if !positive {
            return Err(Error::Config("channels, patch size, embedding dim and block count must be positive".into()));
        }
        let div = self.divisor();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by {div} (2^{} pooling x patch {})",
                self.height,
                self.width,
                self.channels.len(),
                self.patch
            )));
        }
        Ok(())
    }
}

pub struct Encoder {
    pub stages: Vec<ConvBlock>,
    pub embed: PatchEmbedding,
    pub blocks: Vec<Box<dyn TokenBlock>>,
}

/// Encoder output shared by all decoders.
pub struct Encoded {
    /// Conv-stage outputs before pooling, shallowest first.
    pub skips: Vec<Tensor>,
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl Encoder {
    fn forward(&self, x: &Tensor, training: bool) -> Result<Encoded> {
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            let s = stage.forward(&h, training)?;
            h = max_pool2d(&s, 2)?;
            skips.push(s);
        }
        let (mut tokens, grid) = self.embed.tokenize(&h)?;
        for b in &self.blocks {
            tokens = b.forward(&tokens, grid, training)?;
        }
        Ok(Encoded { skips, tokens, grid })
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.stages.iter().flat_map(|s| s.params()).collect();
        p.extend(self.embed.params());
        p.extend(self.blocks.iter().flat_map(|b| b.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.stages.iter_mut().flat_map(|s| s.params_mut()).collect();
        p.extend(self.embed.params_mut());
        p.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        p
    }

    fn buffers(&self) -> Vec<Buffer<'_>> {
        let mut b: Vec<Buffer<'_>> = self.stages.iter().flat_map(|s| s.buffers()).collect();
        b.extend(self.blocks.iter().flat_map(|t| t.buffers()));
        b
    }
}

pub struct Decoder {
    pub strategy: String,
    pub block: Box<dyn TokenBlock>,
    /// `None` when the patch size is 1.
    pub token_up: Option<Box<dyn Upsampler>>,
    pub entry: ConvBlock,
    /// Deepest first; one per encoder stage.
    pub ups: Vec<Box<dyn Upsampler>>,
    pub stages: Vec<ConvBlock>,
    pub head_weight: Param,
    pub head_bias: Param,
}

impl Decoder {
    fn forward(&self, enc: &Encoded, training: bool) -> Result<Tensor> {
        let tokens = self.block.forward(&enc.tokens, enc.grid, training)?;
        let mut h = tokens_to_map(&tokens, enc.grid)?;
        if let Some(up) = &self.token_up {
            h = up.forward(&h)?;
        }
        h = self.entry.forward(&h, training)?;
        for ((up, stage), skip) in self.ups.iter().zip(&self.stages).zip(enc.skips.iter().rev()) {
            let u = up.forward(&h)?;
            h = stage.forward(&Tensor::concat(&[u, skip.clone()], 1)?, training)?;
        }
        add_channel_bias(&conv2d(&h, self.head_weight.tensor(), 1, 0)?, self.head_bias.tensor())
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.block.params();
        if let Some(u) = &self.token_up {
            p.extend(u.params());
        }
        p.extend(self.entry.params());
        for (u, s) in self.ups.iter().zip(&self.stages) {
            p.extend(u.params());
            p.extend(s.params());
        }
        p.push(&self.head_weight);
        p.push(&self.head_bias);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.block.params_mut();
        if let Some(u) = &mut self.token_up {
            p.extend(u.params_mut());
        }
        p.extend(self.entry.params_mut());
        for (u, s) in self.ups.iter_mut().zip(&mut self.stages) {
            p.extend(u.params_mut());
            p.extend(s.params_mut());
        }
        p.push(&mut self.head_weight);
        p.push(&mut self.head_bias);
        p
    }

    fn buffers(&self) -> Vec<Buffer<'_>> {
        let mut b = self.block.buffers();
        b.extend(self.entry.buffers());
        b.extend(self.stages.iter().flat_map(|s| s.buffers()));
        b
    }
}

pub struct SemiKanModel {
    config: ModelConfig,
    pub encoder: Encoder,
    pub decoders: Vec<Decoder>,
    encoder_passes: AtomicUsize,
}

/// Logits of every decoder plus the deepest shared feature map.
pub struct ForwardOutput {
    pub logits: Vec<Tensor>,
    /// `[N, D, H/(2^depth·P), W/(2^depth·P)]`
    pub bottleneck: Tensor,
}

impl SemiKanModel {
    /// Validates `cfg` and initialises all parameters from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::build_unchecked(cfg, seed)
    }

    /// Like [`build`](Self::build) but accepts any decoder count and repeated
    /// strategies. For tests.
    #[doc(hidden)]
    pub fn build_unchecked(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate_shape()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = token_block_registry();
        let token_factory = tokens.get(&cfg.token_block)?;
        let ups = upsampler_registry();
        let c = &cfg.channels;
        let depth = c.len();

        let mut stages = Vec::with_capacity(depth);
        let mut prev = cfg.in_channels;
        for (i, &ch) in c.iter().enumerate() {
            stages.push(ConvBlock::new(&format!("enc.stage{i}"), prev, ch, &mut rng)?);
            prev = ch;
        }
        let embed = PatchEmbedding::new("enc.embed", cfg.patch, c[depth - 1], cfg.embed_dim, &mut rng)?;
        let blocks = (0..cfg.kan_blocks)
            .map(|i| token_factory(&format!("enc.tok{i}"), cfg.embed_dim, &cfg.kan, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let encoder = Encoder { stages, embed, blocks };

        let mut decoders = Vec::with_capacity(cfg.num_decoders());
        for (d, strategy) in cfg.strategies.iter().enumerate() {
            let up = ups.get(strategy)?;
            let p = format!("dec{d}");
            let block = token_factory(&format!("{p}.tok"), cfg.embed_dim, &cfg.kan, &mut rng)?;
            let token_up = match cfg.patch {
                1 => None,
                f => Some(up(&format!("{p}.up_tokens"), cfg.embed_dim, f, &mut rng)?),
            };
            let entry = ConvBlock::new(&format!("{p}.entry"), cfg.embed_dim, c[depth - 1], &mut rng)?;
            let mut d_ups = Vec::with_capacity(depth);
            let mut d_stages = Vec::with_capacity(depth);
            for i in (0..depth).rev() {
                d_ups.push(up(&format!("{p}.up{i}"), c[i], 2, &mut rng)?);
                let out = c[i.saturating_sub(1)];
                d_stages.push(ConvBlock::new(&format!("{p}.stage{i}"), 2 * c[i], out, &mut rng)?);
            }
            let k = cfg.num_classes;
            let bound = (1.0 / c[0] as f64).sqrt();
            let hw = (0..k * c[0]).map(|_| rng.random_range(-bound..bound)).collect();
            decoders.push(Decoder {
                strategy: strategy.clone(),
                block,
                token_up,
                entry,
                ups: d_ups,
                stages: d_stages,
                head_weight: Param::new(format!("{p}.head.weight"), &[k, c[0], 1, 1], hw)?,
                head_bias: Param::new(format!("{p}.head.bias"), &[k], vec![0.0; k])?,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            encoder,
            decoders,
            encoder_passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_decoders(&self) -> usize {
        self.decoders.len()
    }

    /// Number of encoder evaluations so far.
    pub fn encoder_passes(&self) -> usize {
        self.encoder_passes.load(Ordering::Relaxed)
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let &[_, c, h, w] = images.shape() else {
            return Err(Error::dim("forward", format!("expected [N,C,H,W], got {:?}", images.shape())));
        };
        if c != self.config.in_channels {
            return Err(Error::dim("forward", format!("axis 1: got {c} channels, model expects {}", self.config.in_channels)));
        }
        let div = self.config.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::dim("forward", format!("axes 2,3: {h}x{w} not divisible by {div}")));
        }
        Ok(())
    }

    pub fn forward_with_features(&self, images: &Tensor, training: bool) -> Result<ForwardOutput> {
        self.check_input(images)?;
        let enc = self.encoder.forward(images, training)?;
        self.encoder_passes.fetch_add(1, Ordering::Relaxed);
        let logits = self
            .decoders
            .iter()
            .map(|d| d.forward(&enc, training))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            logits,
            bottleneck: tokens_to_map(&enc.tokens, enc.grid)?,
        })
    }

    /// One `[N, K, H, W]` logit map per decoder.
    pub fn forward(&self, images: &Tensor, training: bool) -> Result<Vec<Tensor>> {
        Ok(self.forward_with_features(images, training)?.logits)
    }

    /// Eval-mode class map `[N, H, W]` from the decoder-averaged softmax.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        no_grad(|| {
            let logits = self.forward(images, false)?;
            average_argmax(&logits)
        })
    }

    /// All KAN layers with a descriptive name, encoder first.
    pub fn kan_layers(&self) -> Vec<(String, &KanLayer)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            out.extend(b.kan_layers().into_iter().map(|l| (format!("encoder.tok{i}"), l)));
        }
        for (d, dec) in self.decoders.iter().enumerate() {
            out.extend(dec.block.kan_layers().into_iter().map(|l| (format!("decoder{d}"), l)));
        }
        out
    }

    pub fn kan_layers_mut(&mut self) -> Vec<&mut KanLayer> {
        let mut out: Vec<&mut KanLayer> = self.encoder.blocks.iter_mut().flat_map(|b| b.kan_layers_mut()).collect();
        out.extend(self.decoders.iter_mut().flat_map(|d| d.block.kan_layers_mut()));
        out
    }
}

impl Module for SemiKanModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoders.iter().flat_map(|d| d.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoders.iter_mut().flat_map(|d| d.params_mut()));
        p
    }

    fn buffers(&self) -> Vec<Buffer<'_>> {
        let mut b = self.encoder.buffers();
        b.extend(self.decoders.iter().flat_map(|d| d.buffers()));
        b
    }
}

/// Averages the per-decoder softmax and takes the per-pixel argmax, lower
/// class index on ties. Returns `[N, H, W]`.
pub fn average_argmax(logits: &[Tensor]) -> Result<Tensor> {
    let first = logits.first().ok_or_else(|| Error::Contract("no decoder outputs".into()))?;
    let &[n, k, h, w] = first.shape() else {
        return Err(Error::dim("predict", format!("expected [N,K,H,W], got {:?}", first.shape())));
    };
    let mut avg = vec![0.0; n * k * h * w];
    for l in logits {
        if l.shape() != first.shape() {
            return Err(Error::dim("predict", format!("decoder outputs {:?} vs {:?}", l.shape(), first.shape())));
        }
        let p = l.softmax(1)?;
        for (a, v) in avg.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    for s in 0..n {
        for a in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if avg[(s * k + c) * hw + a] > avg[(s * k + best) * hw + a] {
                    best = c;
                }
            }
            out[s * hw + a] = best as f64;
        }
    }
    Tensor::new(&[n, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: vec![2, 3],
            embed_dim: 4,
            patch: 2,
            height: 8,
            width: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shapes_and_single_encoder_pass() {
        let m = SemiKanModel::build(&tiny(), 0).unwrap();
        let out = m.forward(&Tensor::zeros(&[2, 1, 8, 8]), true).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.shape() == [2, 2, 8, 8]));
        assert_eq!(m.encoder_passes(), 1);
    }

    #[test]
    fn config_errors() {
        let mut c = tiny();
        c.height = 12;
        assert!(matches!(SemiKanModel::build(&c, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.strategies = vec!["nearest".into(), "nearest".into()];
        assert!(matches!(SemiKanModel::build(&c, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.strategies = vec!["nearest".into()];
        assert!(matches!(SemiKanModel::build(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tie_goes_to_lower_class() {
        let l = Tensor::zeros(&[1, 2, 1, 1]);
        assert_eq!(average_argmax(&[l]).unwrap().data(), &[0.0]);
    }
}
