//! Elementwise, reduction, matrix and layout ops.

use super::gemm::{gemm_nn, gemm_nt};
use super::{numel_of, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {:?}", t.shape())));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tensor {
    /// Elementwise binary op where `rhs`'s shape is a trailing suffix of
    /// `self`'s (a rank-0 `rhs` broadcasts everywhere).
    fn binary(&self, rhs: &Tensor, kind: Binary) -> Result<Tensor> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ls, rs) = (self.shape(), rhs.shape());
        if rs.len() > ls.len() || ls[ls.len() - rs.len()..] != *rs {
            return Err(Error::dim(
                op,
                format!("rhs shape {rs:?} is not a trailing suffix of lhs shape {ls:?}"),
            ));
        }
        let period = rhs.numel();
        let (a, b) = (self.data(), rhs.data());
        let out: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = b[i % period];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            op,
            ls.to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, needs| {
                let (a, b) = (lhs_t.data(), rhs_t.data());
                let ga = needs[0].then(|| match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(i, gi)| gi * b[i % period]).collect(),
                    Binary::Div => g.iter().enumerate().map(|(i, gi)| gi / b[i % period]).collect(),
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; period];
                    for (i, gi) in g.iter().enumerate() {
                        let j = i % period;
                        gb[j] += match kind {
                            Binary::Add => *gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * a[i],
                            Binary::Div => -gi * a[i] / (b[j] * b[j]),
                        };
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Div)
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    pub(crate) fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out_copy = if self.is_tracked() { out.clone() } else { Vec::new() };
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let grad = g
                    .iter()
                    .zip(input.data())
                    .zip(&out_copy)
                    .map(|((gi, &x), &y)| gi * df(x, y))
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.unary("mul_scalar", move |x| x * s, move |_, _| s)
    }

    /// `x^p` for non-negative inputs.
    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(
            "powf",
            move |x| x.powf(p),
            move |x, _| if x == 0.0 && p < 1.0 { 0.0 } else { p * x.powf(p - 1.0) },
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.unary("silu", silu, |x, _| silu_grad(x))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Numerically stable softmax along `axis` (max-shifted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - m).exp();
                    y[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    y[idx(k)] /= s;
                }
            }
        }
        let y_saved = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let y = &y_saved;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dotp: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dotp);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Divides by the sum along `axis`: `y = x / Σ_axis x`.
    pub fn normalize_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("normalize_axis", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut sums = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let s: f64 = (0..len).map(|k| x[idx(k)]).sum();
                sums[o * inner + i] = s;
                for k in 0..len {
                    y[idx(k)] = x[idx(k)] / s;
                }
            }
        }
        let y_saved = y.clone();
        Ok(Tensor::from_op(
            "normalize_axis",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let y = &y_saved;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dotp: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        let s = sums[o * inner + i];
                        for k in 0..len {
                            gx[idx(k)] = (g[idx(k)] - dotp) / s;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {ls:?} by {rs:?}")));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, n, k, self.data(), k, 1, rhs.data(), &mut out, false);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(m, k, n, g, b.data(), &mut ga);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_nn(k, n, m, a.data(), 1, k, g, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_shared(
            "reshape",
            shape.to_vec(),
            self.shared_data(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        // source offset for each output element
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            src.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.data();
        let out: Vec<f64> = src.iter().map(|&s| x[s]).collect();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (o, &s) in src.iter().enumerate() {
                    gx[s] = g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self, axis)?;
        let (outer, full, inner) = split_axis(self.shape(), axis);
        if len == 0 || start + len > full {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates tensors along `axis`; all other axes must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::dim("concat", "no tensors given"))?;
        check_axis("concat", first, axis)?;
        for t in tensors {
            let same = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::dim(
                    "concat",
                    format!("shape {:?} incompatible with {:?} along axis {axis}", t.shape(), first.shape()),
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                out.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            out,
            tensors.to_vec(),
            Box::new(move |g, needs| {
                let mut grads: Vec<Option<Vec<f64>>> = needs
                    .iter()
                    .zip(&lens)
                    .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gi) = gi {
                            gi.extend_from_slice(&g[off..off + l * inner]);
                        }
                        off += l * inner;
                    }
                }
                grads
            }),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
