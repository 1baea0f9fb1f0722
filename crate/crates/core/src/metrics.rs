//! Overlap and boundary-distance metrics for 2D segmentation masks.
//!
//! Boundary pixels are foreground pixels with a 4-neighbour that is
//! background or outside the image. Distances are Euclidean between pixel
//! centres, in pixel units.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim("mask", format!("{height}x{width} mask needs {} pixels, got {}", height * width, bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    /// Pixels equal to `class` in a label map.
    pub fn from_labels(height: usize, width: usize, labels: &[usize], class: usize) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn boundary(&self) -> Mask {
        let (h, w) = (self.height, self.width);
        let bits = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                self.bits[i]
                    && (y == 0
                        || x == 0
                        || y + 1 == h
                        || x + 1 == w
                        || !self.get(y - 1, x)
                        || !self.get(y + 1, x)
                        || !self.get(y, x - 1)
                        || !self.get(y, x + 1))
            })
            .collect();
        Mask { height: h, width: w, bits }
    }
}

fn same_shape(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::dim(op, format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    Ok(())
}

/// `(dice, jaccard)` in percent; two empty masks score 100 on both.
pub fn dice_jaccard(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    same_shape("dice_jaccard", pred, gt)?;
    let inter = pred.bits.iter().zip(&gt.bits).filter(|(a, b)| **a && **b).count() as f64;
    let (p, g) = (pred.count() as f64, gt.count() as f64);
    if p + g == 0.0 {
        return Ok((100.0, 100.0));
    }
    Ok((200.0 * inter / (p + g), 100.0 * inter / (p + g - inter)))
}

const FAR: f64 = 1e30;

/// Exact 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let s = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut sq = s(q, v[k]);
        while sq <= z[k] {
            k -= 1;
            sq = s(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = sq;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Squared Euclidean distance of every pixel to the nearest set pixel.
pub fn squared_distance_map(features: &Mask) -> Vec<f64> {
    let (h, w) = (features.height, features.width);
    let mut grid: Vec<f64> = features.bits.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

/// Both directed boundary-to-boundary distance sets, concatenated.
pub fn boundary_distances(pred: &Mask, gt: &Mask) -> Result<Vec<f64>> {
    same_shape("surface_distances", pred, gt)?;
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("prediction mask is empty"));
    }
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("ground-truth mask is empty"));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let (to_p, to_g) = (squared_distance_map(&bp), squared_distance_map(&bg));
    let mut out = Vec::new();
    out.extend(bp.bits.iter().zip(&to_g).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()));
    out.extend(bg.bits.iter().zip(&to_p).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()));
    Ok(out)
}

/// Percentile with linear interpolation at rank `q·(n−1)` of the sorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `(hd95, asd)`.
pub fn surface_distances(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    let d = boundary_distances(pred, gt)?;
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok((percentile(&d, 0.95), mean))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub dice: f64,
    pub jaccard: f64,
    /// Mean over classes where the distance is defined; `None` if none is.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let d: Vec<f64> = v.flatten().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Metrics for every foreground class `1..num_classes` of two label maps,
/// averaged over those classes.
pub fn evaluate_labels(pred: &[usize], gt: &[usize], height: usize, width: usize, num_classes: usize) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::dim("evaluate", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    if num_classes < 2 {
        return Err(Error::Config("need at least one foreground class".into()));
    }
    let mut per_class = Vec::with_capacity(num_classes - 1);
    for class in 1..num_classes {
        let p = Mask::from_labels(height, width, pred, class)?;
        let g = Mask::from_labels(height, width, gt, class)?;
        let (dice, jaccard) = dice_jaccard(&p, &g)?;
        let (hd95, asd) = match surface_distances(&p, &g) {
            Ok((h, a)) => (Some(h), Some(a)),
            Err(Error::UndefinedMetric(_)) => (None, None),
            Err(e) => return Err(e),
        };
        per_class.push(ClassMetrics {
            class,
            dice,
            jaccard,
            hd95,
            asd,
        });
    }
    let n = per_class.len() as f64;
    Ok(MetricReport {
        dice: per_class.iter().map(|c| c.dice).sum::<f64>() / n,
        jaccard: per_class.iter().map(|c| c.jaccard).sum::<f64>() / n,
        hd95: mean_defined(per_class.iter().map(|c| c.hd95)),
        asd: mean_defined(per_class.iter().map(|c| c.asd)),
        per_class,
    })
}
