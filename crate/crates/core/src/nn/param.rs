use std::sync::Mutex;

use crate::error::Result;
use crate::tensor::{RunningStats, Tensor};

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            value: Tensor::param(shape, data)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value.grad()
    }

    /// Replaces the value with a fresh leaf; the gradient is cleared.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        self.value = Tensor::param(self.value.shape(), data)?;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }
}

/// Non-trainable state that still belongs in a checkpoint.
pub struct Buffer<'a> {
    pub name: String,
    pub stats: &'a Mutex<RunningStats>,
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn buffers(&self) -> Vec<Buffer<'_>> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn zero_grad(&self) {
        self.params().iter().for_each(|p| p.zero_grad());
    }
}
