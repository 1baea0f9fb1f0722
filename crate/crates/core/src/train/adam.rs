//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every parameter from its accumulated gradient
    /// (missing gradients count as zero). Parameters must arrive in the same
    /// order on every call.
    pub fn step(&mut self, params: Vec<&mut Param>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len())));
        }
        self.t += 1;
        let t = self.t as f64;
        let (c1, c2) = (1.0 - self.beta1.powf(t), 1.0 - self.beta2.powf(t));
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.numel() {
                return Err(Error::Contract(format!("optimizer state for {} has the wrong size", p.name())));
            }
            let grad = p.grad();
            let mut w = p.data().to_vec();
            for i in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                w[i] -= self.lr * (update + self.weight_decay * w[i]);
            }
            p.set_data(w)?;
        }
        Ok(())
    }
}
