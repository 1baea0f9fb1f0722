//! Synthetic segmentation scenes: smooth blobs over textured backgrounds.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SegSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial sizes must be multiples of this (pooling depth times patch size
/// of the default model).
pub const SIZE_MULTIPLE: usize = 16;
/// Accepted foreground fraction per sample.
pub const FOREGROUND_RANGE: (f64, f64) = (0.05, 0.45);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::Config(format!("unknown difficulty '{s}' (easy, hard)"))),
        }
    }
}

struct Style {
    background: f64,
    /// Foreground contrast range above the local background.
    contrast: (f64, f64),
    shading: f64,
    texture: f64,
    noise: f64,
    blur: Option<f64>,
}

impl Difficulty {
    fn style(self) -> Style {
        match self {
            Difficulty::Easy => Style {
                background: 0.3,
                contrast: (0.35, 0.45),
                shading: 0.04,
                texture: 0.05,
                noise: 0.02,
                blur: None,
            },
            Difficulty::Hard => Style {
                background: 0.4,
                contrast: (0.08, 0.2),
                shading: 0.1,
                texture: 0.1,
                noise: 0.05,
                blur: Some(1.2),
            },
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    /// `(order, amplitude, phase)` of the radial perturbation.
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn random(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let scale = h.min(w) as f64 / 64.0;
        let a = rng.random_range(8.0..16.0) * scale;
        let b = a * rng.random_range(0.6..1.0);
        let margin = a * 1.2 + 1.0;
        let cy = rng.random_range(margin.min(h as f64 / 2.0)..(h as f64 - margin).max(h as f64 / 2.0 + 1e-9));
        let cx = rng.random_range(margin.min(w as f64 / 2.0)..(w as f64 - margin).max(w as f64 / 2.0 + 1e-9));
        let harmonics = (2..=4)
            .map(|m| (m as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..TAU)))
            .collect();
        Self {
            cy,
            cx,
            a,
            b,
            theta: rng.random_range(0.0..TAU),
            harmonics,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let radius = 1.0 + self.harmonics.iter().map(|(m, amp, ph)| amp * (m * phi + ph).cos()).sum::<f64>();
        rho < radius
    }
}

fn box_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += src[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for (t, &k) in taps.iter().enumerate() {
                    let o = t as isize - r;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + o) } else { (y as isize + o, x as isize) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += k * src[yy as usize * w + xx as usize];
                        n += k;
                    }
                }
                out[y * w + x] = s / n;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn scene(h: usize, w: usize, style: &Style, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let mut mask = vec![false; h * w];
    let mut owner = vec![usize::MAX; h * w];
    let mut blobs = Vec::new();
    loop {
        mask.fill(false);
        owner.fill(usize::MAX);
        blobs.clear();
        let count = rng.random_range(1..=3);
        for _ in 0..count {
            for _ in 0..50 {
                let blob = Blob::random(h, w, rng);
                let pixels: Vec<usize> = (0..h * w)
                    .filter(|&i| blob.contains((i / w) as f64 + 0.5, (i % w) as f64 + 0.5))
                    .collect();
                // keep a two-pixel gap to every earlier blob
                let clash = pixels.iter().any(|&i| {
                    let (y, x) = (i / w, i % w);
                    (y.saturating_sub(2)..(y + 3).min(h)).any(|yy| (x.saturating_sub(2)..(x + 3).min(w)).any(|xx| mask[yy * w + xx]))
                });
                if pixels.is_empty() || clash {
                    continue;
                }
                for &i in &pixels {
                    mask[i] = true;
                    owner[i] = blobs.len();
                }
                blobs.push(blob);
                break;
            }
        }
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (h * w) as f64;
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&frac) {
            break;
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let texture = box_blur(&(0..h * w).map(|_| normal.sample(rng)).collect::<Vec<_>>(), h, w);
    let contrast: Vec<f64> = blobs.iter().map(|_| rng.random_range(style.contrast.0..style.contrast.1)).collect();
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            let shade: f64 = waves.iter().map(|(fy, fx, ph, amp)| amp * (TAU * (fy * y + fx * x) + ph).sin()).sum::<f64>() / 3.0;
            let fg = if owner[i] == usize::MAX { 0.0 } else { contrast[owner[i]] };
            style.background + style.shading * shade + style.texture * texture[i] + fg
        })
        .collect();
    if let Some(sigma) = style.blur {
        img = gaussian_blur(&img, h, w, sigma);
    }
    for v in img.iter_mut() {
        *v = (*v + style.noise * normal.sample(rng)).clamp(0.0, 1.0);
    }
    (img, mask)
}

/// `n` samples with ids `s0000, s0001, …`; sample `i` depends only on
/// `(seed, i)`.
pub fn generate_dataset(n: usize, height: usize, width: usize, difficulty: Difficulty, seed: u64) -> Result<Vec<SegSample>> {
    if height == 0 || width == 0 || !height.is_multiple_of(SIZE_MULTIPLE) || !width.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::Config(format!("image size {height}x{width} must be a positive multiple of {SIZE_MULTIPLE}")));
    }
    let style = difficulty.style();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (img, mask) = scene(height, width, &style, &mut rng);
            Ok(SegSample {
                id: format!("s{i:04}"),
                image: Tensor::new(&[1, height, width], img)?,
                mask: Some(Tensor::new(&[height, width], mask.iter().map(|&m| m as u8 as f64).collect())?),
                labeled: true,
            })
        })
        .collect()
}

/// Otsu's threshold on a 256-bin histogram of values in `[0, 1]`.
/// Returns the bin index `t`; values in bins above `t` are foreground.
pub fn otsu_bin(values: &[f64]) -> usize {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[intensity_bin(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0, -1.0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = t;
        }
    }
    best
}

pub fn intensity_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_size_checked() {
        let a = generate_dataset(3, 32, 32, Difficulty::Hard, 9).unwrap();
        let b = generate_dataset(3, 32, 32, Difficulty::Hard, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
        }
        assert!(matches!(generate_dataset(1, 30, 32, Difficulty::Easy, 0), Err(Error::Config(_))));
    }

    #[test]
    fn otsu_splits_two_levels() {
        let v: Vec<f64> = (0..100).map(|i| if i < 60 { 0.2 } else { 0.8 }).collect();
        let t = otsu_bin(&v);
        assert!(intensity_bin(0.2) <= t && t < intensity_bin(0.8));
    }
}
