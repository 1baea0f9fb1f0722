use super::Tensor;
use crate::error::{Error, Result};

/// Exponential running estimates used by batch norm in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

/// Batch normalisation over `(N, H, W)` for each channel of `[N, C, H, W]`.
///
/// Training mode normalises with the biased batch variance and folds the
/// unbiased variance into `stats`; eval mode uses `stats` unchanged.
pub fn batch_norm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    training: bool,
    eps: f64,
) -> Result<Tensor> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::dim("batch_norm2d", format!("expected [N,C,H,W], got {:?}", input.shape())));
    };
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c {
        return Err(Error::dim(
            "batch_norm2d",
            format!("axis 1 has {c} channels; gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let hw = h * w;
    let m = n * hw;
    if training && m == 1 {
        return Err(Error::DegenerateVariance(m));
    }
    let x = input.data();
    let (gm, bt) = (gamma.data(), beta.data());
    let mut mean = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let (mu, var) = if training {
            let mut s = 0.0;
            for s_i in 0..n {
                s += x[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut v = 0.0;
            for s_i in 0..n {
                v += x[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                    .iter()
                    .map(|&xi| (xi - mu) * (xi - mu))
                    .sum::<f64>();
            }
            let var = v / m as f64;
            let mom = stats.momentum;
            stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mu;
            stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * var * m as f64 / (m - 1) as f64;
            (mu, var)
        } else {
            (stats.mean[ch], stats.var[ch])
        };
        mean[ch] = mu;
        inv_std[ch] = 1.0 / (var + eps).sqrt();
    }
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for s_i in 0..n {
        for ch in 0..c {
            let base = (s_i * c + ch) * hw;
            for p in base..base + hw {
                xhat[p] = (x[p] - mean[ch]) * inv_std[ch];
                out[p] = gm[ch] * xhat[p] + bt[ch];
            }
        }
    }
    let gamma_t = gamma.clone();
    Ok(Tensor::from_op(
        "batch_norm2d",
        input.shape().to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, needs| {
            let gm = gamma_t.data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for s_i in 0..n {
                for ch in 0..c {
                    let base = (s_i * c + ch) * hw;
                    for p in base..base + hw {
                        sum_g[ch] += g[p];
                        sum_gx[ch] += g[p] * xhat[p];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; g.len()];
                let mf = m as f64;
                for s_i in 0..n {
                    for ch in 0..c {
                        let base = (s_i * c + ch) * hw;
                        let scale = gm[ch] * inv_std[ch];
                        for p in base..base + hw {
                            gx[p] = if training {
                                scale * (g[p] - sum_g[ch] / mf - xhat[p] * sum_gx[ch] / mf)
                            } else {
                                scale * g[p]
                            };
                        }
                    }
                }
                gx
            });
            vec![gx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
        }),
    ))
}

/// Normalises each vector along the last axis, then applies `gamma`/`beta`.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *input
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(
            "layer_norm",
            format!("last axis is {d}; gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let rows = input.numel() / d;
    let x = input.data();
    let (gm, bt) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let xh = (row[j] - mu) * is;
            xhat[r * d + j] = xh;
            out[r * d + j] = gm[j] * xh + bt[j];
        }
    }
    let gamma_t = gamma.clone();
    Ok(Tensor::from_op(
        "layer_norm",
        input.shape().to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, needs| {
            let gm = gamma_t.data();
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    ggamma[j] += gr[j] * xr[j];
                    gbeta[j] += gr[j];
                    let gh = gr[j] * gm[j];
                    s1 += gh;
                    s2 += gh * xr[j];
                }
                for j in 0..d {
                    let gh = gr[j] * gm[j];
                    gx[r * d + j] = inv_std[r] * (gh - s1 / d as f64 - xr[j] * s2 / d as f64);
                }
            }
            vec![needs[0].then_some(gx), needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
        }),
    ))
}
