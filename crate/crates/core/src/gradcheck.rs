//! Central finite-difference gradient checking.
//!
//! Numeric gradients only ever evaluate the forward pass, so they are an
//! independent oracle for the backward rules. Agreement is measured per
//! parameter group as `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.

use crate::error::Result;
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Entries checked per group; evenly strided when the group is larger.
    pub max_entries: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: usize::MAX,
        }
    }
}

fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let stride = n as f64 / max as f64;
    (0..max).map(|i| (i as f64 * stride) as usize).collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Checks `f` with respect to every tensor in `inputs`.
pub fn check_tensors(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    opts: CheckOptions,
) -> Result<Vec<GroupError>> {
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::detach_param).collect();
    f(&leaves)?.backward()?;
    let mut out = Vec::with_capacity(leaves.len());
    for (g, leaf) in leaves.iter().enumerate() {
        let analytic_full = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let idx = sample_indices(leaf.numel(), opts.max_entries);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = leaf.to_vec();
                data[i] += delta;
                let mut args: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                args[g] = Tensor::new(leaf.shape(), data)?;
                crate::tensor::no_grad(|| f(&args))?.item()
            };
            numeric.push((eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step));
            analytic.push(analytic_full[i]);
        }
        out.push(GroupError {
            name: format!("input{g}"),
            rel_err: relative_error(&analytic, &numeric),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
            checked: idx.len(),
        });
    }
    Ok(out)
}

/// Checks a scalar function of a module with respect to each of its parameters.
pub fn check_module<M: Module + ?Sized>(
    module: &mut M,
    f: impl Fn(&M) -> Result<Tensor>,
    opts: CheckOptions,
) -> Result<Vec<GroupError>> {
    module.zero_grad();
    f(module)?.backward()?;
    let analytic_all: Vec<Vec<f64>> = module
        .params()
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let names: Vec<String> = module.params().iter().map(|p| p.name().to_string()).collect();
    let mut out = Vec::with_capacity(names.len());
    for (g, name) in names.into_iter().enumerate() {
        let original = module.params()[g].data().to_vec();
        let idx = sample_indices(original.len(), opts.max_entries);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut data = original.clone();
                data[i] += delta;
                module.params_mut()[g].set_data(data)?;
                crate::tensor::no_grad(|| f(module))?.item()
            };
            let plus = eval(opts.step)?;
            let minus = eval(-opts.step)?;
            numeric.push((plus - minus) / (2.0 * opts.step));
            analytic.push(analytic_all[g][i]);
        }
        module.params_mut()[g].set_data(original)?;
        out.push(GroupError {
            name,
            rel_err: relative_error(&analytic, &numeric),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
            checked: idx.len(),
        });
    }
    Ok(out)
}

/// Largest relative error over all groups.
pub fn worst(groups: &[GroupError]) -> f64 {
    groups.iter().map(|g| g.rel_err).fold(0.0, f64::max)
}
