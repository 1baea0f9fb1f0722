//! Convolutional, tokenization and token-mixing blocks.

use std::sync::Mutex;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::{Buffer, Module, Param, Registry};
use crate::error::{Error, Result};
use crate::kan::{KanConfig, KanLayer};
use crate::tensor::{batch_norm2d, conv2d, depthwise_conv2d, layer_norm, RunningStats, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

fn he_normal(n: usize, fan_in: usize, rng: &mut (impl Rng + ?Sized)) -> Vec<f64> {
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// `ReLU(BN(Conv3x3(x)))`, stride 1, padding 1, no conv bias.
pub struct ConvBlock {
    pub kernel: Param,
    pub gamma: Param,
    pub beta: Param,
    stats: Mutex<RunningStats>,
    name: String,
}

impl ConvBlock {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        Ok(Self {
            kernel: Param::new(format!("{prefix}.conv"), &[out_ch, in_ch, 3, 3], he_normal(out_ch * in_ch * 9, in_ch * 9, rng))?,
            gamma: Param::new(format!("{prefix}.bn.gamma"), &[out_ch], vec![1.0; out_ch])?,
            beta: Param::new(format!("{prefix}.bn.beta"), &[out_ch], vec![0.0; out_ch])?,
            stats: Mutex::new(RunningStats::new(out_ch)),
            name: format!("{prefix}.bn.running"),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = conv2d(x, self.kernel.tensor(), 1, 1)?;
        let mut stats = self.stats.lock().expect("running stats poisoned");
        Ok(batch_norm2d(&y, self.gamma.tensor(), self.beta.tensor(), &mut stats, training, BN_EPS)?.relu())
    }

    pub fn running_stats(&self) -> RunningStats {
        self.stats.lock().expect("running stats poisoned").clone()
    }
}

impl Module for ConvBlock {
    fn params(&self) -> Vec<&Param> {
        vec![&self.kernel, &self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.kernel, &mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<Buffer<'_>> {
        vec![Buffer {
            name: self.name.clone(),
            stats: &self.stats,
        }]
    }
}

/// Non-overlapping `P×P` patches, flattened in `(c, py, px)` order and
/// projected to `D` dimensions. Tokens follow raster order of the patches.
pub struct PatchEmbedding {
    patch: usize,
    /// `[P²·C, D]`
    pub proj: Param,
}

impl PatchEmbedding {
    pub fn new(prefix: &str, patch: usize, in_ch: usize, dim: usize, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        let fan_in = patch * patch * in_ch;
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self::with_projection(patch, Param::new(format!("{prefix}.proj"), &[fan_in, dim], data)?)
    }

    pub fn with_projection(patch: usize, proj: Param) -> Result<Self> {
        if patch == 0 || proj.shape().len() != 2 || !proj.shape()[0].is_multiple_of(patch * patch) {
            return Err(Error::Config(format!("projection {:?} does not fit patch size {patch}", proj.shape())));
        }
        Ok(Self { patch, proj })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.proj.shape()[1]
    }

    /// `[N,C,H,W] -> ([N, T, D], (H/P, W/P))`.
    pub fn tokenize(&self, x: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let patches = patchify(x, self.patch)?;
        let &[n, t, pc] = patches.shape() else { unreachable!() };
        if pc != self.proj.shape()[0] {
            return Err(Error::dim(
                "tokenize",
                format!("axis 1: patches carry {pc} values, projection expects {}", self.proj.shape()[0]),
            ));
        }
        let p = self.patch;
        let grid = (x.shape()[2] / p, x.shape()[3] / p);
        let y = patches.reshape(&[n * t, pc])?.matmul(self.proj.tensor())?;
        Ok((y.reshape(&[n, t, self.dim()])?, grid))
    }
}

impl Module for PatchEmbedding {
    fn params(&self) -> Vec<&Param> {
        vec![&self.proj]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.proj]
    }
}

/// `[N,C,H,W] -> [N, (H/P)(W/P), C·P²]`.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::dim("patchify", format!("expected [N,C,H,W], got {:?}", x.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Tokenization {
            patch,
            height: h,
            width: w,
        });
    }
    let (th, tw) = (h / patch, w / patch);
    x.reshape(&[n, c, th, patch, tw, patch])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[n, th * tw, c * patch * patch])
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: usize, channels: usize, grid: (usize, usize)) -> Result<Tensor> {
    let &[n, t, pc] = tokens.shape() else {
        return Err(Error::dim("unpatchify", format!("expected [N,T,P²C], got {:?}", tokens.shape())));
    };
    let (th, tw) = grid;
    if t != th * tw || pc != channels * patch * patch {
        return Err(Error::dim("unpatchify", format!("{:?} does not fit grid {th}x{tw}, patch {patch}, {channels} channels", tokens.shape())));
    }
    tokens
        .reshape(&[n, th, tw, channels, patch, patch])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[n, channels, th * patch, tw * patch])
}

/// `[N, T, D] -> [N, D, th, tw]`.
pub fn tokens_to_map(tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let &[n, t, d] = tokens.shape() else {
        return Err(Error::dim("tokens_to_map", format!("expected [N,T,D], got {:?}", tokens.shape())));
    };
    if t != grid.0 * grid.1 {
        return Err(Error::dim("tokens_to_map", format!("axis 1: {t} tokens do not fill a {}x{} grid", grid.0, grid.1)));
    }
    tokens.permute(&[0, 2, 1])?.reshape(&[n, d, grid.0, grid.1])
}

/// `[N, D, th, tw] -> [N, T, D]`.
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    let &[n, d, th, tw] = map.shape() else {
        return Err(Error::dim("map_to_tokens", format!("expected [N,D,h,w], got {:?}", map.shape())));
    };
    map.reshape(&[n, d, th * tw])?.permute(&[0, 2, 1])
}

/// A shape-preserving block acting on a token grid.
pub trait TokenBlock: Module + Send + Sync {
    fn kind(&self) -> &'static str;

    /// `tokens [N, T, D]` with `T = grid.0 · grid.1`.
    fn forward(&self, tokens: &Tensor, grid: (usize, usize), training: bool) -> Result<Tensor>;

    fn kan_layers(&self) -> Vec<&KanLayer> {
        Vec::new()
    }

    fn kan_layers_mut(&mut self) -> Vec<&mut KanLayer> {
        Vec::new()
    }
}

fn check_tokens(op: &'static str, tokens: &Tensor, grid: (usize, usize), dim: usize) -> Result<(usize, usize)> {
    let &[n, t, d] = tokens.shape() else {
        return Err(Error::dim(op, format!("expected [N,T,D], got {:?}", tokens.shape())));
    };
    if t != grid.0 * grid.1 {
        return Err(Error::dim(op, format!("axis 1: {t} tokens do not fill a {}x{} grid", grid.0, grid.1)));
    }
    if d != dim {
        return Err(Error::dim(op, format!("axis 2: got {d} channels, block expects {dim}")));
    }
    Ok((n, t))
}

/// `x + DwConv(LN₁(x)) + KAN(LN₂(x))`; the residual term can be switched off.
pub struct KanConvBlock {
    pub ln1_gamma: Param,
    pub ln1_beta: Param,
    /// `[D, 1, 3, 3]`
    pub dw_kernel: Param,
    pub ln2_gamma: Param,
    pub ln2_beta: Param,
    pub kan: KanLayer,
    pub residual: bool,
}

impl KanConvBlock {
    pub fn new(prefix: &str, dim: usize, kan: &KanConfig, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        let dw = (0..dim * 9).map(|_| rng.random_range(-1.0 / 3.0..1.0 / 3.0)).collect();
        Ok(Self {
            ln1_gamma: Param::new(format!("{prefix}.ln1.gamma"), &[dim], vec![1.0; dim])?,
            ln1_beta: Param::new(format!("{prefix}.ln1.beta"), &[dim], vec![0.0; dim])?,
            dw_kernel: Param::new(format!("{prefix}.dwconv"), &[dim, 1, 3, 3], dw)?,
            ln2_gamma: Param::new(format!("{prefix}.ln2.gamma"), &[dim], vec![1.0; dim])?,
            ln2_beta: Param::new(format!("{prefix}.ln2.beta"), &[dim], vec![0.0; dim])?,
            kan: KanLayer::new(&format!("{prefix}.kan"), dim, dim, kan, rng)?,
            residual: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.ln1_gamma.numel()
    }
}

impl Module for KanConvBlock {
    fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.ln1_gamma, &self.ln1_beta, &self.dw_kernel, &self.ln2_gamma, &self.ln2_beta];
        p.extend(self.kan.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.dw_kernel,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ];
        p.extend(self.kan.params_mut());
        p
    }
}

impl TokenBlock for KanConvBlock {
    fn kind(&self) -> &'static str {
        "kan_conv"
    }

    fn forward(&self, tokens: &Tensor, grid: (usize, usize), _training: bool) -> Result<Tensor> {
        let d = self.dim();
        let (n, t) = check_tokens("kan_conv_forward", tokens, grid, d)?;
        let a = layer_norm(tokens, self.ln1_gamma.tensor(), self.ln1_beta.tensor(), LN_EPS)?;
        let conv = map_to_tokens(&depthwise_conv2d(&tokens_to_map(&a, grid)?, self.dw_kernel.tensor())?)?;
        let b = layer_norm(tokens, self.ln2_gamma.tensor(), self.ln2_beta.tensor(), LN_EPS)?;
        let kan = self.kan.forward(&b.reshape(&[n * t, d])?)?.reshape(&[n, t, d])?;
        let mixed = conv.add(&kan)?;
        if self.residual {
            tokens.add(&mixed)
        } else {
            Ok(mixed)
        }
    }

    fn kan_layers(&self) -> Vec<&KanLayer> {
        vec![&self.kan]
    }

    fn kan_layers_mut(&mut self) -> Vec<&mut KanLayer> {
        vec![&mut self.kan]
    }
}

/// Ablation block: `x + ConvBlock(ConvBlock(LN(x)))` on the token grid,
/// `D → hidden → D`.
pub struct ConvBottleneck {
    pub ln_gamma: Param,
    pub ln_beta: Param,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
}

impl ConvBottleneck {
    pub fn new(prefix: &str, dim: usize, hidden: usize, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        Ok(Self {
            ln_gamma: Param::new(format!("{prefix}.ln.gamma"), &[dim], vec![1.0; dim])?,
            ln_beta: Param::new(format!("{prefix}.ln.beta"), &[dim], vec![0.0; dim])?,
            conv1: ConvBlock::new(&format!("{prefix}.conv1"), dim, hidden, rng)?,
            conv2: ConvBlock::new(&format!("{prefix}.conv2"), hidden, dim, rng)?,
        })
    }

    /// Hidden width whose parameter count is closest to a [`KanConvBlock`]
    /// of the same `dim` and spline size.
    pub fn matched_hidden(dim: usize, kan: &KanConfig) -> usize {
        let target = kan_conv_params(dim, kan) as f64;
        // 2D (LN) + 9Dh + 2h + 9hD + 2D
        let per_hidden = (18 * dim + 2) as f64;
        (((target - 4.0 * dim as f64) / per_hidden).round() as usize).max(1)
    }
}

/// Parameter count of a [`KanConvBlock`].
pub fn kan_conv_params(dim: usize, kan: &KanConfig) -> usize {
    4 * dim + 9 * dim + dim * dim * (kan.intervals + kan.order + 2)
}

impl Module for ConvBottleneck {
    fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.ln_gamma, &self.ln_beta];
        p.extend(self.conv1.params());
        p.extend(self.conv2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.ln_gamma, &mut self.ln_beta];
        p.extend(self.conv1.params_mut());
        p.extend(self.conv2.params_mut());
        p
    }

    fn buffers(&self) -> Vec<Buffer<'_>> {
        let mut b = self.conv1.buffers();
        b.extend(self.conv2.buffers());
        b
    }
}

impl TokenBlock for ConvBottleneck {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn forward(&self, tokens: &Tensor, grid: (usize, usize), training: bool) -> Result<Tensor> {
        check_tokens("conv_bottleneck", tokens, grid, self.ln_gamma.numel())?;
        let a = layer_norm(tokens, self.ln_gamma.tensor(), self.ln_beta.tensor(), LN_EPS)?;
        let h = self.conv2.forward(&self.conv1.forward(&tokens_to_map(&a, grid)?, training)?, training)?;
        tokens.add(&map_to_tokens(&h)?)
    }
}

pub type TokenBlockFactory = fn(prefix: &str, dim: usize, kan: &KanConfig, rng: &mut dyn RngCore) -> Result<Box<dyn TokenBlock>>;

/// The built-in token blocks: `kan_conv` and its parameter-matched ablation `conv`.
pub fn token_block_registry() -> Registry<TokenBlockFactory> {
    let mut r: Registry<TokenBlockFactory> = Registry::new("token block");
    r.register("kan_conv", |p, d, k, rng| Ok(Box::new(KanConvBlock::new(p, d, k, rng)?)));
    r.register("conv", |p, d, k, rng| {
        Ok(Box::new(ConvBottleneck::new(p, d, ConvBottleneck::matched_hidden(d, k), rng)?))
    });
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ConvBlock::new("c", 2, 3, &mut rng).unwrap();
        let y = b.forward(&Tensor::zeros(&[2, 2, 4, 4]), true).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_patch_is_tokenization_error() {
        let x = Tensor::zeros(&[1, 1, 6, 4]);
        assert!(matches!(patchify(&x, 4), Err(Error::Tokenization { patch: 4, height: 6, width: 4 })));
    }

    #[test]
    fn patchify_round_trip() {
        let x = Tensor::new(&[2, 3, 4, 6], (0..144).map(|v| v as f64).collect()).unwrap();
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[2, 6, 12]);
        assert_eq!(unpatchify(&t, 2, 3, (2, 3)).unwrap().data(), x.data());
    }

    #[test]
    fn ablation_matches_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kan = KanConfig::default();
        for dim in [16, 64, 128] {
            let a = KanConvBlock::new("k", dim, &kan, &mut rng).unwrap().num_params();
            assert_eq!(a, kan_conv_params(dim, &kan));
            let b = ConvBottleneck::new("c", dim, ConvBottleneck::matched_hidden(dim, &kan), &mut rng)
                .unwrap()
                .num_params();
            assert!((b as f64 / a as f64 - 1.0).abs() <= 0.1, "{dim}: {a} vs {b}");
        }
    }
}
