//! Uniform B-spline bases evaluated with the Cox–de Boor recursion.
//!
//! A grid of `G` intervals over `[t_min, t_max]` is extended by `k` equally
//! spaced knots on each side, giving `G + 2k + 1` knots and `G + k` basis
//! functions of degree `k`. On `[t_min, t_max]` the basis is a partition of
//! unity. Inputs outside the domain are clamped to its edges, so the basis
//! derivative is zero there.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SplineGrid {
    order: usize,
    intervals: usize,
    t_min: f64,
    t_max: f64,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(order: usize, intervals: usize, domain: (f64, f64)) -> Result<Self> {
        if order < 1 || intervals < 1 {
            return Err(Error::Config(format!(
                "spline needs order >= 1 and at least one interval (got k={order}, G={intervals})"
            )));
        }
        let (t_min, t_max) = domain;
        if !(t_min.is_finite() && t_max.is_finite() && t_min < t_max) {
            return Err(Error::Config(format!("invalid spline domain [{t_min}, {t_max}]")));
        }
        let h = (t_max - t_min) / intervals as f64;
        let knots = (0..=intervals + 2 * order)
            .map(|i| t_min + (i as f64 - order as f64) * h)
            .collect();
        Ok(Self {
            order,
            intervals,
            t_min,
            t_max,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `G + k`.
    pub fn num_basis(&self) -> usize {
        self.intervals + self.order
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.t_min, self.t_max)
    }

    /// Knot span `s` with `knots[s] <= x < knots[s+1]`, for clamped `x`.
    /// The right domain edge belongs to the last interior span.
    fn span(&self, x: f64) -> usize {
        let k = self.order;
        let last = self.intervals + k - 1;
        let h = (self.t_max - self.t_min) / self.intervals as f64;
        let mut s = k + (((x - self.t_min) / h).floor().max(0.0) as usize).min(self.intervals - 1);
        // guard against rounding in the division
        while s > k && x < self.knots[s] {
            s -= 1;
        }
        while s < last && x >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    /// Non-zero degree-`deg` basis values at `x` for span `s`:
    /// entry `r` is `B_{s-deg+r}`.
    fn local(&self, x: f64, s: usize, deg: usize, out: &mut [f64]) {
        let t = &self.knots;
        out[0] = 1.0;
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        for j in 1..=deg {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Evaluates the `k + 1` non-zero basis functions and their derivatives
    /// at `x` (clamped). Returns the index of the first one.
    pub fn eval_local(&self, x: f64, values: &mut [f64], derivs: &mut [f64]) -> usize {
        let k = self.order;
        let inside = x >= self.t_min && x <= self.t_max;
        let xc = self.clamp(x);
        let s = self.span(xc);
        self.local(xc, s, k, values);
        // B'_{i,k} = k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1}
        let mut lower = [0.0f64; 16];
        self.local(xc, s, k - 1, &mut lower);
        let t = &self.knots;
        let first = s - k;
        for r in 0..=k {
            if !inside {
                derivs[r] = 0.0;
                continue;
            }
            let i = first + r;
            let left = if r >= 1 { lower[r - 1] * k as f64 / (t[i + k] - t[i]) } else { 0.0 };
            let right = if r < k { lower[r] * k as f64 / (t[i + k + 1] - t[i + 1]) } else { 0.0 };
            derivs[r] = left - right;
        }
        first
    }

    /// All `G + k` basis values at `x` (clamped).
    pub fn eval_dense(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis()];
        let mut v = [0.0f64; 16];
        let mut d = [0.0f64; 16];
        let first = self.eval_local(x, &mut v, &mut d);
        out[first..=first + self.order].copy_from_slice(&v[..=self.order]);
        out
    }
}

/// Basis values for every element of `x`, appended as a trailing axis of
/// length `G + k`. Differentiable with respect to `x`.
pub fn bspline_basis(x: &Tensor, grid: &SplineGrid) -> Result<Tensor> {
    if grid.order >= 15 {
        return Err(Error::Config(format!("spline order {} too large", grid.order)));
    }
    let nb = grid.num_basis();
    let k = grid.order;
    let mut out = vec![0.0; x.numel() * nb];
    let mut dout = vec![0.0; x.numel() * nb];
    let mut v = [0.0f64; 16];
    let mut d = [0.0f64; 16];
    for (e, &xv) in x.data().iter().enumerate() {
        let first = grid.eval_local(xv, &mut v, &mut d);
        out[e * nb + first..=e * nb + first + k].copy_from_slice(&v[..=k]);
        dout[e * nb + first..=e * nb + first + k].copy_from_slice(&d[..=k]);
    }
    let mut shape = x.shape().to_vec();
    shape.push(nb);
    Ok(Tensor::from_op(
        "bspline_basis",
        shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let gx = g
                .chunks_exact(nb)
                .zip(dout.chunks_exact(nb))
                .map(|(gr, dr)| gr.iter().zip(dr).map(|(a, b)| a * b).sum())
                .collect();
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knot_vector_layout() {
        let g = SplineGrid::new(3, 5, (-1.0, 1.0)).unwrap();
        assert_eq!(g.knots().len(), 5 + 2 * 3 + 1);
        assert_eq!(g.num_basis(), 8);
        assert!((g.knots()[3] + 1.0).abs() < 1e-15);
        assert!((g.knots()[8] - 1.0).abs() < 1e-15);
        assert!(g.knots().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bad_config_rejected() {
        assert!(matches!(SplineGrid::new(0, 5, (-1.0, 1.0)), Err(Error::Config(_))));
        assert!(matches!(SplineGrid::new(3, 0, (-1.0, 1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn linear_hat_peaks_at_knot() {
        let g = SplineGrid::new(1, 4, (-1.0, 1.0)).unwrap();
        // interior knot at 0.0
        let b = g.eval_dense(0.0);
        let ones: Vec<usize> = b.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones.len(), 1);
        assert!(b.iter().enumerate().all(|(i, &v)| i == ones[0] || v == 0.0));
    }

    #[test]
    fn right_edge_is_partition_of_unity() {
        let g = SplineGrid::new(3, 5, (-1.0, 1.0)).unwrap();
        let s: f64 = g.eval_dense(1.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let s: f64 = g.eval_dense(7.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamped_inputs_have_zero_derivative() {
        let g = SplineGrid::new(2, 3, (-1.0, 1.0)).unwrap();
        let (mut v, mut d) = ([0.0; 16], [0.0; 16]);
        g.eval_local(1.5, &mut v, &mut d);
        assert!(d[..=2].iter().all(|&x| x == 0.0));
    }
}
