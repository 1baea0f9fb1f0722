//! Kolmogorov–Arnold layer with learnable per-edge activations.
//!
//! Every edge `(o, i)` carries
//!
//! ```text
//! φ_{o,i}(x) = w_b[o,i] · SiLU(x) + w_s[o,i] · Σ_j c[o,i,j] · B_j(x)
//! ```
//!
//! and the layer output is `y_o = Σ_i φ_{o,i}(x_i)`. All edges share one
//! [`SplineGrid`].

use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::spline::SplineGrid;
use crate::tensor::gemm::{gemm_nn, gemm_nt};
use crate::tensor::{silu, silu_grad, Tensor};

/// Number of uniform probe points per edge in activation dumps.
pub const DUMP_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub struct KanConfig {
    pub order: usize,
    pub intervals: usize,
    pub domain: (f64, f64),
}

impl Default for KanConfig {
    fn default() -> Self {
        Self {
            order: 3,
            intervals: 5,
            domain: (-1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct KanLayer {
    in_dim: usize,
    out_dim: usize,
    grid: SplineGrid,
    /// `[out, in, G + k]`
    pub spline_coeffs: Param,
    /// `[out, in]`
    pub base_weight: Param,
    /// `[out, in]`
    pub spline_weight: Param,
    /// `false` for pruned edges, row-major `[out, in]`.
    active: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneReport {
    pub threshold: f64,
    pub kept: Vec<(usize, usize)>,
    pub removed: Vec<(usize, usize)>,
    pub newly_removed: usize,
    pub fraction_removed: f64,
}

impl KanLayer {
    /// Base weights ~ U(−a, a) with `a = √(1/in_dim)`, spline weights 1,
    /// coefficients ~ N(0, 0.1² / (G + k)).
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, cfg: &KanConfig, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!("KAN dims must be positive ({in_dim}->{out_dim})")));
        }
        let grid = SplineGrid::new(cfg.order, cfg.intervals, cfg.domain)?;
        let nb = grid.num_basis();
        let edges = in_dim * out_dim;
        let bound = (1.0 / in_dim as f64).sqrt();
        let base: Vec<f64> = (0..edges).map(|_| rng.random_range(-bound..bound)).collect();
        let normal = Normal::new(0.0, 0.1 / (nb as f64).sqrt()).expect("finite std");
        let coeffs: Vec<f64> = (0..edges * nb).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            in_dim,
            out_dim,
            spline_coeffs: Param::new(format!("{prefix}.spline_coeffs"), &[out_dim, in_dim, nb], coeffs)?,
            base_weight: Param::new(format!("{prefix}.base_weight"), &[out_dim, in_dim], base)?,
            spline_weight: Param::new(format!("{prefix}.spline_weight"), &[out_dim, in_dim], vec![1.0; edges])?,
            grid,
            active: vec![true; edges],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn is_active(&self, out: usize, inp: usize) -> bool {
        self.active[out * self.in_dim + inp]
    }

    /// `x [batch, in] -> [batch, out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        kan_forward(
            x,
            &self.grid,
            self.spline_coeffs.tensor(),
            self.base_weight.tensor(),
            self.spline_weight.tensor(),
            &self.active,
        )
    }

    /// φ_{o,i}(x) evaluated directly from the parameters.
    pub fn edge_activation(&self, out: usize, inp: usize, x: f64) -> f64 {
        let e = out * self.in_dim + inp;
        if !self.active[e] {
            return 0.0;
        }
        let nb = self.grid.num_basis();
        let basis = self.grid.eval_dense(x);
        let c = &self.spline_coeffs.data()[e * nb..(e + 1) * nb];
        let spline: f64 = c.iter().zip(&basis).map(|(a, b)| a * b).sum();
        self.base_weight.data()[e] * silu(x) + self.spline_weight.data()[e] * spline
    }

    /// A 1→1 layer holding only edge `(out, inp)`.
    pub fn edge_layer(&self, out: usize, inp: usize) -> Result<KanLayer> {
        let e = out * self.in_dim + inp;
        let nb = self.grid.num_basis();
        Ok(KanLayer {
            in_dim: 1,
            out_dim: 1,
            grid: self.grid.clone(),
            spline_coeffs: Param::new("edge.spline_coeffs", &[1, 1, nb], self.spline_coeffs.data()[e * nb..(e + 1) * nb].to_vec())?,
            base_weight: Param::new("edge.base_weight", &[1, 1], vec![self.base_weight.data()[e]])?,
            spline_weight: Param::new("edge.spline_weight", &[1, 1], vec![self.spline_weight.data()[e]])?,
            active: vec![self.active[e]],
        })
    }

    /// Edge importance: `max(|w_b|, |w_s| · max_j |c_j|)`.
    pub fn edge_score(&self, out: usize, inp: usize) -> f64 {
        let e = out * self.in_dim + inp;
        let nb = self.grid.num_basis();
        let cmax = self.spline_coeffs.data()[e * nb..(e + 1) * nb]
            .iter()
            .fold(0.0f64, |m, c| m.max(c.abs()));
        self.base_weight.data()[e].abs().max(self.spline_weight.data()[e].abs() * cmax)
    }

    /// Zeroes and freezes every edge scoring below `threshold`.
    pub fn prune_edges(&mut self, threshold: f64) -> Result<PruneReport> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::Config(format!("prune threshold must be >= 0, got {threshold}")));
        }
        let mut kept = Vec::new();
        let mut removed = Vec::new();
        let mut newly_removed = 0;
        for o in 0..self.out_dim {
            for i in 0..self.in_dim {
                let e = o * self.in_dim + i;
                if !self.active[e] || self.edge_score(o, i) < threshold {
                    if self.active[e] {
                        newly_removed += 1;
                    }
                    self.active[e] = false;
                    removed.push((o, i));
                } else {
                    kept.push((o, i));
                }
            }
        }
        self.enforce_mask()?;
        let total = (self.in_dim * self.out_dim) as f64;
        Ok(PruneReport {
            threshold,
            fraction_removed: removed.len() as f64 / total,
            kept,
            removed,
            newly_removed,
        })
    }

    /// Re-zeroes parameters of pruned edges (after an optimiser step).
    pub fn enforce_mask(&mut self) -> Result<()> {
        if self.active.iter().all(|&a| a) {
            return Ok(());
        }
        let nb = self.grid.num_basis();
        let mut c = self.spline_coeffs.data().to_vec();
        let mut b = self.base_weight.data().to_vec();
        let mut s = self.spline_weight.data().to_vec();
        for (e, _) in self.active.iter().enumerate().filter(|(_, &a)| !a) {
            c[e * nb..(e + 1) * nb].fill(0.0);
            b[e] = 0.0;
            s[e] = 0.0;
        }
        self.spline_coeffs.set_data(c)?;
        self.base_weight.set_data(b)?;
        self.spline_weight.set_data(s)
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn set_active_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.active.len() {
            return Err(Error::dim("set_active_mask", format!("expected {} entries", self.active.len())));
        }
        self.active = mask;
        self.enforce_mask()
    }

    /// CSV with header `edge_out,edge_in,x,phi` and `DUMP_POINTS` uniform
    /// samples over the grid domain for every edge.
    pub fn write_activation_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "edge_out,edge_in,x,phi")?;
        let (lo, hi) = self.grid.domain();
        let xs: Vec<f64> = (0..DUMP_POINTS)
            .map(|p| lo + (hi - lo) * p as f64 / (DUMP_POINTS - 1) as f64)
            .collect();
        for o in 0..self.out_dim {
            for i in 0..self.in_dim {
                for &x in &xs {
                    writeln!(w, "{o},{i},{x},{}", self.edge_activation(o, i, x))?;
                }
            }
        }
        Ok(())
    }
}

impl Module for KanLayer {
    fn params(&self) -> Vec<&Param> {
        vec![&self.spline_coeffs, &self.base_weight, &self.spline_weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.spline_coeffs, &mut self.base_weight, &mut self.spline_weight]
    }
}

/// Stand-alone layer construction from a seed.
pub fn init_kan(in_dim: usize, out_dim: usize, order: usize, intervals: usize, domain: (f64, f64), seed: u64) -> Result<KanLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    KanLayer::new(
        "kan",
        in_dim,
        out_dim,
        &KanConfig {
            order,
            intervals,
            domain,
        },
        &mut rng,
    )
}

/// Fused differentiable KAN evaluation. `active` masks out pruned edges,
/// which contribute nothing and receive zero gradient.
pub fn kan_forward(
    x: &Tensor,
    grid: &SplineGrid,
    coeffs: &Tensor,
    base_weight: &Tensor,
    spline_weight: &Tensor,
    active: &[bool],
) -> Result<Tensor> {
    let &[out_dim, in_dim] = base_weight.shape() else {
        return Err(Error::dim("kan_forward", format!("base weight must be [out, in], got {:?}", base_weight.shape())));
    };
    let nb = grid.num_basis();
    if spline_weight.shape() != [out_dim, in_dim] || coeffs.shape() != [out_dim, in_dim, nb] {
        return Err(Error::dim(
            "kan_forward",
            format!("parameter shapes {:?}/{:?} disagree with [{out_dim}, {in_dim}]", spline_weight.shape(), coeffs.shape()),
        ));
    }
    let &[batch, xin] = x.shape() else {
        return Err(Error::dim("kan_forward", format!("input must be [batch, in], got {:?}", x.shape())));
    };
    if xin != in_dim {
        return Err(Error::dim("kan_forward", format!("axis 1: input has {xin} features, layer expects {in_dim}")));
    }
    let basis = DenseBasis::new(grid, x.data(), batch, in_dim);
    let (wb, weff) = effective_weights(coeffs.data(), base_weight.data(), spline_weight.data(), active, nb);
    // y = base · wbᵀ + B · Wᵀ
    let mut y = vec![0.0; batch * out_dim];
    gemm_nt(batch, out_dim, in_dim, &basis.base, &wb, &mut y);
    gemm_nt(batch, out_dim, in_dim * nb, &basis.vals, &weff, &mut y);
    let (ct, wst) = (coeffs.clone(), spline_weight.clone());
    let active = active.to_vec();
    Ok(Tensor::from_op(
        "kan_forward",
        vec![batch, out_dim],
        y,
        vec![x.clone(), coeffs.clone(), base_weight.clone(), spline_weight.clone()],
        Box::new(move |g, needs| {
            let (c, ws) = (ct.data(), wst.data());
            let edges = out_dim * in_dim;
            let gx = needs[0].then(|| {
                // dL/dB and dL/dbase, then the chain rule through both paths
                let mut gb = vec![0.0; batch * in_dim * nb];
                gemm_nn(batch, in_dim * nb, out_dim, g, out_dim, 1, &weff, &mut gb, false);
                let mut gbase = vec![0.0; batch * in_dim];
                gemm_nn(batch, in_dim, out_dim, g, out_dim, 1, &wb, &mut gbase, false);
                (0..batch * in_dim)
                    .map(|bi| {
                        let s: f64 = gb[bi * nb..(bi + 1) * nb].iter().zip(&basis.ders[bi * nb..(bi + 1) * nb]).map(|(a, b)| a * b).sum();
                        s + gbase[bi] * basis.dbase[bi]
                    })
                    .collect()
            });
            let gw = (needs[1] || needs[3]).then(|| {
                let mut gw = vec![0.0; edges * nb];
                gemm_nn(out_dim, in_dim * nb, batch, g, 1, out_dim, &basis.vals, &mut gw, false);
                gw
            });
            let masked = |mut v: Vec<f64>, per_edge: usize| {
                for (e, &a) in active.iter().enumerate() {
                    if !a {
                        v[e * per_edge..(e + 1) * per_edge].fill(0.0);
                    }
                }
                v
            };
            let gc = needs[1].then(|| {
                let gw = gw.as_ref().expect("computed");
                let v = (0..edges * nb).map(|j| ws[j / nb] * gw[j]).collect();
                masked(v, nb)
            });
            let gws = needs[3].then(|| {
                let gw = gw.as_ref().expect("computed");
                let v = (0..edges)
                    .map(|e| c[e * nb..(e + 1) * nb].iter().zip(&gw[e * nb..(e + 1) * nb]).map(|(a, b)| a * b).sum())
                    .collect();
                masked(v, 1)
            });
            let gwb = needs[2].then(|| {
                let mut v = vec![0.0; edges];
                gemm_nn(out_dim, in_dim, batch, g, 1, out_dim, &basis.base, &mut v, false);
                masked(v, 1)
            });
            vec![gx, gc, gwb, gws]
        }),
    ))
}

/// Base weights and `spline_weight · coeffs`, both zeroed on pruned edges.
fn effective_weights(c: &[f64], wb: &[f64], ws: &[f64], active: &[bool], nb: usize) -> (Vec<f64>, Vec<f64>) {
    let wb = wb.iter().zip(active).map(|(&w, &a)| if a { w } else { 0.0 }).collect();
    let weff = c
        .iter()
        .enumerate()
        .map(|(j, &cv)| if active[j / nb] { ws[j / nb] * cv } else { 0.0 })
        .collect();
    (wb, weff)
}

/// Dense `[batch, in·nb]` basis values and derivatives plus the base
/// activation and its derivative for every input.
struct DenseBasis {
    vals: Vec<f64>,
    ders: Vec<f64>,
    base: Vec<f64>,
    dbase: Vec<f64>,
}

impl DenseBasis {
    fn new(grid: &SplineGrid, xs: &[f64], batch: usize, in_dim: usize) -> Self {
        let nb = grid.num_basis();
        let w = grid.order() + 1;
        let mut vals = vec![0.0; batch * in_dim * nb];
        let mut ders = vec![0.0; batch * in_dim * nb];
        let mut v = [0.0f64; 16];
        let mut d = [0.0f64; 16];
        for (bi, &xv) in xs.iter().enumerate() {
            let first = grid.eval_local(xv, &mut v, &mut d);
            vals[bi * nb + first..bi * nb + first + w].copy_from_slice(&v[..w]);
            ders[bi * nb + first..bi * nb + first + w].copy_from_slice(&d[..w]);
        }
        Self {
            vals,
            ders,
            base: xs.iter().map(|&x| silu(x)).collect(),
            dbase: xs.iter().map(|&x| silu_grad(x)).collect(),
        }
    }
}
