//! Decoder upsampling strategies, selectable by name.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::{Module, Param, Registry};
use crate::error::{Error, Result};
use crate::tensor::{conv_transpose2d, upsample, Tensor, UpsampleMode};

/// Spatial upsampling by an integer factor with fixed channel count.
pub trait Upsampler: Module + Send + Sync {
    fn name(&self) -> &str;

    fn factor(&self) -> usize;

    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

pub type UpsamplerFactory = fn(prefix: &str, channels: usize, factor: usize, rng: &mut dyn RngCore) -> Result<Box<dyn Upsampler>>;

pub struct Interpolate {
    mode: UpsampleMode,
    factor: usize,
}

impl Interpolate {
    pub fn new(mode: UpsampleMode, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::Config(format!("upsampling factor must be >= 2, got {factor}")));
        }
        Ok(Self { mode, factor })
    }
}

impl Module for Interpolate {
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}

impl Upsampler for Interpolate {
    fn name(&self) -> &str {
        match self.mode {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        }
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        upsample(x, self.mode, self.factor)
    }
}

/// Learned `f×f` stride-`f` transposed convolution. Starts close to
/// nearest-neighbour replication.
pub struct TransposedConv {
    factor: usize,
    kernel: Param,
}

impl TransposedConv {
    pub fn new(prefix: &str, channels: usize, factor: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if factor < 2 {
            return Err(Error::Config(format!("upsampling factor must be >= 2, got {factor}")));
        }
        let taps = factor * factor;
        let noise = Normal::new(0.0, 0.01).expect("finite std");
        let mut k = vec![0.0; channels * channels * taps];
        for (i, v) in k.iter_mut().enumerate() {
            let (ci, co) = (i / (channels * taps), (i / taps) % channels);
            *v = if ci == co { 1.0 } else { 0.0 } + noise.sample(rng);
        }
        Ok(Self {
            factor,
            kernel: Param::new(format!("{prefix}.kernel"), &[channels, channels, factor, factor], k)?,
        })
    }
}

impl Module for TransposedConv {
    fn params(&self) -> Vec<&Param> {
        vec![&self.kernel]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.kernel]
    }
}

impl Upsampler for TransposedConv {
    fn name(&self) -> &str {
        "transposed_conv"
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose2d(x, self.kernel.tensor(), self.factor)
    }
}

/// The built-in strategies: `nearest`, `bilinear`, `transposed_conv`.
pub fn registry() -> Registry<UpsamplerFactory> {
    let mut r: Registry<UpsamplerFactory> = Registry::new("upsampling strategy");
    r.register("nearest", |_, _, f, _| Ok(Box::new(Interpolate::new(UpsampleMode::Nearest, f)?)));
    r.register("bilinear", |_, _, f, _| Ok(Box::new(Interpolate::new(UpsampleMode::Bilinear, f)?)));
    r.register("transposed_conv", |p, c, f, rng| Ok(Box::new(TransposedConv::new(p, c, f, rng)?)));
    r
}
