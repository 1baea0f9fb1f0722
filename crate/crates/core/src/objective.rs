//! Training objective: soft Dice on labeled images and an uncertainty-aware
//! consistency term between decoders on unlabeled images.
//!
//! Probability maps are `[N, K, H, W]` with classes on axis 1. "Pixels" of a
//! batch are all `(n, h, w)` positions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing constant of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Lower clamp on the pseudo-annotation inside the KL term.
pub const PSEUDO_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub temperature: f64,
    /// Weight of the uncertainty term against the rectified term.
    pub alpha: f64,
    pub lambda_max: f64,
    /// Ramp length as a fraction of all training steps.
    pub ramp_fraction: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            alpha: 0.5,
            lambda_max: 1.0,
            ramp_fraction: 0.25,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        check_alpha(self.alpha)?;
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::Config(format!("lambda_max must be >= 0, got {}", self.lambda_max)));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(Error::Config(format!("ramp_fraction must lie in [0, 1], got {}", self.ramp_fraction)));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn nkhw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, k, h, w] => Ok((n, k, h * w)),
        _ => Err(Error::dim(op, format!("expected [N,K,H,W], got {:?}", t.shape()))),
    }
}

/// Temperature sharpening over the class axis: `p_k^{1/T} / Σ_j p_j^{1/T}`.
pub fn sharpen(p: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if p.rank() < 2 {
        return Err(Error::dim("sharpen", format!("need a class axis at 1, got {:?}", p.shape())));
    }
    p.powf(1.0 / temperature).normalize_axis(1)
}

/// Mean of the decoder distributions, detached from the tape.
pub fn pseudo_annotation(sharpened: &[Tensor]) -> Result<Tensor> {
    let first = sharpened
        .first()
        .ok_or_else(|| Error::Contract("pseudo-annotation needs at least one decoder".into()))?;
    let mut acc = first.data().to_vec();
    for p in &sharpened[1..] {
        if p.shape() != first.shape() {
            return Err(Error::dim("pseudo_annotation", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v);
    }
    let b = sharpened.len() as f64;
    acc.iter_mut().for_each(|a| *a /= b);
    Tensor::new(first.shape(), acc)
}

/// Per-pixel `KL(p ‖ max(target, ε))` over the class axis, `[N,H,W]`.
/// Terms with `p = 0` contribute 0; the target is a constant.
pub fn pixel_kl(p: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (n, k, hw) = nkhw("pixel_kl", p)?;
    if target.shape() != p.shape() {
        return Err(Error::dim("pixel_kl", format!("{:?} vs {:?}", p.shape(), target.shape())));
    }
    let (pd, qd) = (p.data(), target.data());
    let mut out = vec![0.0; n * hw];
    for s in 0..n {
        for c in 0..k {
            let base = (s * k + c) * hw;
            for a in 0..hw {
                let pv = pd[base + a];
                if pv > 0.0 {
                    out[s * hw + a] += pv * (pv / qd[base + a].max(PSEUDO_EPS)).ln();
                }
            }
        }
    }
    let (pt, qt) = (p.clone(), target.clone());
    let shape = vec![n, p.shape()[2], p.shape()[3]];
    Ok(Tensor::from_op(
        "pixel_kl",
        shape,
        out,
        vec![p.clone()],
        Box::new(move |g, _| {
            let (pd, qd) = (pt.data(), qt.data());
            let mut gp = vec![0.0; pd.len()];
            for s in 0..n {
                for c in 0..k {
                    let base = (s * k + c) * hw;
                    for a in 0..hw {
                        let pv = pd[base + a];
                        if pv > 0.0 {
                            gp[base + a] = g[s * hw + a] * ((pv / qd[base + a].max(PSEUDO_EPS)).ln() + 1.0);
                        }
                    }
                }
            }
            vec![Some(gp)]
        }),
    ))
}

/// Euclidean distance over the class axis, `[N,H,W]`. The subgradient at
/// zero distance is zero.
pub fn pixel_l2(p: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (n, k, hw) = nkhw("pixel_l2", p)?;
    if target.shape() != p.shape() {
        return Err(Error::dim("pixel_l2", format!("{:?} vs {:?}", p.shape(), target.shape())));
    }
    let (pd, qd) = (p.data(), target.data());
    let mut out = vec![0.0; n * hw];
    for s in 0..n {
        for c in 0..k {
            let base = (s * k + c) * hw;
            for a in 0..hw {
                let d = pd[base + a] - qd[base + a];
                out[s * hw + a] += d * d;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    let norms = out.clone();
    let (pt, qt) = (p.clone(), target.clone());
    let shape = vec![n, p.shape()[2], p.shape()[3]];
    Ok(Tensor::from_op(
        "pixel_l2",
        shape,
        out,
        vec![p.clone()],
        Box::new(move |g, _| {
            let (pd, qd) = (pt.data(), qt.data());
            let mut gp = vec![0.0; pd.len()];
            for s in 0..n {
                for c in 0..k {
                    let base = (s * k + c) * hw;
                    for a in 0..hw {
                        let norm = norms[s * hw + a];
                        if norm > 0.0 {
                            gp[base + a] = g[s * hw + a] * (pd[base + a] - qd[base + a]) / norm;
                        }
                    }
                }
            }
            vec![Some(gp)]
        }),
    ))
}

/// Everything derived from the decoder probabilities of one unlabeled batch.
pub struct ConsistencyState {
    pub temperature: f64,
    pub alpha: f64,
    /// Per decoder, `[N,K,H,W]`.
    pub sharpened: Vec<Tensor>,
    /// `[N,K,H,W]`, constant.
    pub pseudo: Tensor,
    /// Per decoder, `[N,H,W]`.
    pub uncertainty: Vec<Tensor>,
    /// `exp(−U)` per decoder, `[N,H,W]`.
    pub weights: Vec<Tensor>,
}

impl ConsistencyState {
    /// Starts from per-decoder probabilities (softmax outputs).
    pub fn from_probs(probs: &[Tensor], temperature: f64, alpha: f64) -> Result<Self> {
        let sharpened = probs.iter().map(|p| sharpen(p, temperature)).collect::<Result<Vec<_>>>()?;
        Self::from_sharpened(sharpened, temperature, alpha)
    }

    pub fn from_sharpened(sharpened: Vec<Tensor>, temperature: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if sharpened.len() < 2 {
            return Err(Error::Contract(format!("consistency needs at least 2 decoders, got {}", sharpened.len())));
        }
        let pseudo = pseudo_annotation(&sharpened)?;
        let uncertainty = sharpened.iter().map(|p| pixel_kl(p, &pseudo)).collect::<Result<Vec<_>>>()?;
        let weights = uncertainty.iter().map(|u| u.neg().exp()).collect();
        Ok(Self {
            temperature,
            alpha,
            sharpened,
            pseudo,
            uncertainty,
            weights,
        })
    }

    /// `U_b`: summed per-pixel uncertainty of each decoder.
    pub fn summed_uncertainty(&self) -> Vec<f64> {
        self.uncertainty.iter().map(|u| u.data().iter().sum()).collect()
    }

    /// `(L_uncertainty, L_rectify, L_consistency)`.
    pub fn losses(&self) -> Result<(Tensor, Tensor, Tensor)> {
        let b = self.sharpened.len() as f64;
        let pixels = self.uncertainty[0].numel() as f64;
        let mut unc = Vec::with_capacity(self.sharpened.len());
        let mut rect = Vec::with_capacity(self.sharpened.len());
        for ((p, u), w) in self.sharpened.iter().zip(&self.uncertainty).zip(&self.weights) {
            unc.push(u.sum().mul_scalar(1.0 / pixels));
            let d = pixel_l2(p, &self.pseudo)?;
            rect.push(d.mul(w)?.sum().div(&w.sum())?);
        }
        let mean = |v: Vec<Tensor>| -> Result<Tensor> {
            let mut it = v.into_iter();
            let mut acc = it.next().expect("at least two decoders");
            for t in it {
                acc = acc.add(&t)?;
            }
            Ok(acc.mul_scalar(1.0 / b))
        };
        let l_unc = mean(unc)?;
        let l_rect = mean(rect)?;
        let l_cons = l_unc.mul_scalar(self.alpha).add(&l_rect.mul_scalar(1.0 - self.alpha))?;
        Ok((l_unc, l_rect, l_cons))
    }
}

/// Soft multi-class Dice loss of `logits [N,K,H,W]` against class indices
/// `target [N,H,W]`.
pub fn dice_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (n, k, hw) = nkhw("dice_loss", logits)?;
    if target.shape() != [n, logits.shape()[2], logits.shape()[3]] {
        return Err(Error::dim("dice_loss", format!("target {:?} does not match logits {:?}", target.shape(), logits.shape())));
    }
    let mut onehot = vec![0.0; n * k * hw];
    for s in 0..n {
        for a in 0..hw {
            let c = target.data()[s * hw + a];
            if c.fract() != 0.0 || c < 0.0 || c >= k as f64 {
                return Err(Error::Contract(format!("target class {c} outside 0..{k}")));
            }
            onehot[(s * k + c as usize) * hw + a] = 1.0;
        }
    }
    let y = Tensor::new(logits.shape(), onehot)?;
    let per_class = |t: &Tensor| -> Result<Tensor> { t.permute(&[1, 0, 2, 3])?.reshape(&[k, n * hw])?.sum_axis(1) };
    let p = logits.softmax(1)?;
    let inter = per_class(&p.mul(&y)?)?;
    let denom = per_class(&p)?.add(&per_class(&y)?)?.add_scalar(DICE_SMOOTH);
    let dice = inter.mul_scalar(2.0).add_scalar(DICE_SMOOTH).div(&denom)?;
    Ok(dice.mean().neg().add_scalar(1.0))
}

/// `λ(t) = λ_max · exp(−5 (1 − min(t, t_r)/t_r)²)`; `λ_max` when `t_r = 0`.
pub fn ramp_weight(step: usize, lambda_max: f64, ramp_steps: usize) -> f64 {
    if ramp_steps == 0 {
        return lambda_max;
    }
    let x = 1.0 - step.min(ramp_steps) as f64 / ramp_steps as f64;
    lambda_max * (-5.0 * x * x).exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub dice: f64,
    pub uncertainty: f64,
    pub rectify: f64,
    pub consistency: f64,
    pub lambda: f64,
    pub total: f64,
}

pub struct Objective {
    pub total: Tensor,
    pub report: LossReport,
}

/// Combines the supervised and consistency terms from per-decoder logits.
///
/// `labeled` holds each decoder's logits for the labeled images and
/// `unlabeled` those for the unlabeled images (empty when there are none).
pub fn total_loss(
    labeled: &[Tensor],
    targets: &Tensor,
    unlabeled: &[Tensor],
    lambda: f64,
    cfg: &ObjectiveConfig,
) -> Result<Objective> {
    if labeled.is_empty() || labeled[0].shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("every step needs at least one labeled sample".into()));
    }
    let mut dice = dice_loss(&labeled[0], targets)?;
    for l in &labeled[1..] {
        dice = dice.add(&dice_loss(l, targets)?)?;
    }
    let dice = dice.mul_scalar(1.0 / labeled.len() as f64);
    let mut report = LossReport {
        dice: dice.item()?,
        lambda,
        ..LossReport::default()
    };
    let total = if unlabeled.is_empty() {
        dice
    } else {
        let probs = unlabeled.iter().map(|l| l.softmax(1)).collect::<Result<Vec<_>>>()?;
        let state = ConsistencyState::from_probs(&probs, cfg.temperature, cfg.alpha)?;
        let (u, r, c) = state.losses()?;
        report.uncertainty = u.item()?;
        report.rectify = r.item()?;
        report.consistency = c.item()?;
        dice.add(&c.mul_scalar(lambda))?
    };
    report.total = total.item()?;
    Ok(Objective { total, report })
}
