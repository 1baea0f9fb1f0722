//! Spatial ops on `[N, C, H, W]` tensors.

use std::fmt;
use std::str::FromStr;

use super::gemm::{gemm_nn, gemm_nt};
use super::Tensor;
use crate::error::{Error, Result};

/// Geometry shared by `im2col` / `col2im`.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Row `(c, i, j)` of the column matrix in ascending `c, i, j` order.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h, self.out_w);
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + i) as isize - self.padding as isize;
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.width as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back into an image buffer.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = (self.out_h, self.out_w);
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + i) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::dim(op, format!("expected a rank-4 tensor, got {:?}", t.shape()))),
    }
}

/// Cross-correlation of `input [N,C,H,W]` with `kernel [F,C,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4("conv2d", input)?;
    let [f, kc, kh, kw] = dims4("conv2d", kernel)?;
    if kc != c {
        return Err(Error::dim(
            "conv2d",
            format!("axis 1: input has {c} channels but kernel expects {kc}"),
        ));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be positive"));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::dim(
            "conv2d",
            format!("axes 2,3: kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    let win = Window {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    };
    let direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;
    let (rows, cols_n) = (win.rows(), win.cols());
    let in_sz = c * h * w;
    let out_sz = f * cols_n;
    let mut out = vec![0.0; n * out_sz];
    let mut cols = if direct { Vec::new() } else { vec![0.0; rows * cols_n] };
    let x = input.data();
    let k = kernel.data();
    for s in 0..n {
        let img = &x[s * in_sz..(s + 1) * in_sz];
        let b: &[f64] = if direct {
            img
        } else {
            win.im2col(img, &mut cols);
            &cols
        };
        gemm_nn(f, cols_n, rows, k, rows, 1, b, &mut out[s * out_sz..(s + 1) * out_sz], false);
    }
    let (inp, ker) = (input.clone(), kernel.clone());
    Ok(Tensor::from_op(
        "conv2d",
        vec![n, f, win.out_h, win.out_w],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |g, needs| {
            let x = inp.data();
            let k = ker.data();
            let mut gx = needs[0].then(|| vec![0.0; n * in_sz]);
            let mut gk = needs[1].then(|| vec![0.0; f * rows]);
            let mut cols = vec![0.0; rows * cols_n];
            // "same" convolutions take the input gradient as a correlation of
            // the output gradient with the flipped, transposed kernel
            let same = !direct && c >= 4 && stride == 1 && kh == kw && 2 * padding + 1 == kh;
            let flipped = same.then(|| {
                let mut kf = vec![0.0; c * f * kh * kw];
                for o in 0..f {
                    for ci in 0..c {
                        for t in 0..kh * kw {
                            kf[(ci * f + o) * kh * kw + (kh * kw - 1 - t)] = k[(o * c + ci) * kh * kw + t];
                        }
                    }
                }
                kf
            });
            let back = Window { channels: f, ..win };
            let mut gcols = if same { vec![0.0; f * kh * kw * cols_n] } else { Vec::new() };
            for s in 0..n {
                let gs = &g[s * out_sz..(s + 1) * out_sz];
                if let Some(gk) = gk.as_mut() {
                    let img = &x[s * in_sz..(s + 1) * in_sz];
                    if direct {
                        gemm_nt(f, rows, cols_n, gs, img, gk);
                    } else {
                        win.im2col(img, &mut cols);
                        gemm_nt(f, rows, cols_n, gs, &cols, gk);
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[s * in_sz..(s + 1) * in_sz];
                    if let Some(kf) = flipped.as_ref() {
                        back.im2col(gs, &mut gcols);
                        gemm_nn(c, cols_n, f * kh * kw, kf, f * kh * kw, 1, &gcols, dst, false);
                    } else if direct {
                        gemm_nn(rows, cols_n, f, k, 1, rows, gs, dst, true);
                    } else {
                        gemm_nn(rows, cols_n, f, k, 1, rows, gs, &mut cols, false);
                        win.col2im(&cols, dst);
                    }
                }
            }
            vec![gx, gk]
        }),
    ))
}

/// Transposed convolution: `input [N,C,H,W]`, `kernel [C,F,kh,kw]`, no padding.
/// Output is `[N, F, (H-1)·stride + kh, (W-1)·stride + kw]`.
pub fn conv_transpose2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4("conv_transpose2d", input)?;
    let [kc, f, kh, kw] = dims4("conv_transpose2d", kernel)?;
    if kc != c {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("axis 1: input has {c} channels but kernel expects {kc}"),
        ));
    }
    if stride == 0 {
        return Err(Error::dim("conv_transpose2d", "stride must be positive"));
    }
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    // The output image plays the role of the "input" of the equivalent conv.
    let win = Window {
        channels: f,
        height: oh,
        width: ow,
        kh,
        kw,
        stride,
        padding: 0,
        out_h: h,
        out_w: w,
    };
    let (rows, hw) = (win.rows(), h * w);
    let in_sz = c * hw;
    let out_sz = f * oh * ow;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * out_sz];
    let mut cols = vec![0.0; rows * hw];
    for s in 0..n {
        // cols[r, p] = Σ_c K[c, r] · x[c, p]
        gemm_nn(rows, hw, c, k, 1, rows, &x[s * in_sz..(s + 1) * in_sz], &mut cols, false);
        win.col2im(&cols, &mut out[s * out_sz..(s + 1) * out_sz]);
    }
    let (inp, ker) = (input.clone(), kernel.clone());
    Ok(Tensor::from_op(
        "conv_transpose2d",
        vec![n, f, oh, ow],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |g, needs| {
            let x = inp.data();
            let k = ker.data();
            let mut gx = needs[0].then(|| vec![0.0; n * in_sz]);
            let mut gk = needs[1].then(|| vec![0.0; c * rows]);
            let mut cols = vec![0.0; rows * hw];
            for s in 0..n {
                win.im2col(&g[s * out_sz..(s + 1) * out_sz], &mut cols);
                if let Some(gx) = gx.as_mut() {
                    gemm_nn(c, hw, rows, k, rows, 1, &cols, &mut gx[s * in_sz..(s + 1) * in_sz], false);
                }
                if let Some(gk) = gk.as_mut() {
                    gemm_nt(c, rows, hw, &x[s * in_sz..(s + 1) * in_sz], &cols, gk);
                }
            }
            vec![gx, gk]
        }),
    ))
}

/// Per-channel 3×3-style convolution: `input [N,C,H,W]`, `kernel [C,1,kh,kw]`,
/// stride 1, "same" padding of `kh/2`.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4("depthwise_conv2d", input)?;
    let [kc, one, kh, kw] = dims4("depthwise_conv2d", kernel)?;
    if kc != c || one != 1 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(
            "depthwise_conv2d",
            format!("kernel {:?} does not fit {c} channels with odd spatial size", kernel.shape()),
        ));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; x.len()];
    let taps = move |cb: usize, y: usize, xx: usize, i: usize, j: usize| -> Option<usize> {
        let iy = (y + i) as isize - ph as isize;
        let ix = (xx + j) as isize - pw as isize;
        (iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize)
            .then(|| cb + iy as usize * w + ix as usize)
    };
    for s in 0..n {
        for ch in 0..c {
            let cb = (s * c + ch) * h * w;
            let kb = ch * kh * kw;
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        for j in 0..kw {
                            if let Some(p) = taps(cb, y, xx, i, j) {
                                acc += x[p] * k[kb + i * kw + j];
                            }
                        }
                    }
                    out[cb + y * w + xx] = acc;
                }
            }
        }
    }
    let (inp, ker) = (input.clone(), kernel.clone());
    Ok(Tensor::from_op(
        "depthwise_conv2d",
        vec![n, c, h, w],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |g, needs| {
            let x = inp.data();
            let k = ker.data();
            let mut gx = needs[0].then(|| vec![0.0; x.len()]);
            let mut gk = needs[1].then(|| vec![0.0; k.len()]);
            for s in 0..n {
                for ch in 0..c {
                    let cb = (s * c + ch) * h * w;
                    let kb = ch * kh * kw;
                    for y in 0..h {
                        for xx in 0..w {
                            let go = g[cb + y * w + xx];
                            for i in 0..kh {
                                for j in 0..kw {
                                    if let Some(p) = taps(cb, y, xx, i, j) {
                                        if let Some(gx) = gx.as_mut() {
                                            gx[p] += go * k[kb + i * kw + j];
                                        }
                                        if let Some(gk) = gk.as_mut() {
                                            gk[kb + i * kw + j] += go * x[p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gk]
        }),
    ))
}

/// Adds `bias [C]` along axis 1 of `[N, C, ...]`.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() < 2 || bias.shape() != [input.shape()[1]] {
        return Err(Error::dim(
            "add_channel_bias",
            format!("bias {:?} does not match axis 1 of {:?}", bias.shape(), input.shape()),
        ));
    }
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let inner = input.numel() / (n * c);
    let b = bias.data();
    let out: Vec<f64> = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + b[(i / inner) % c])
        .collect();
    Ok(Tensor::from_op(
        "add_channel_bias",
        input.shape().to_vec(),
        out,
        vec![input.clone(), bias.clone()],
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| g.to_vec());
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    gb[(i / inner) % c] += gi;
                }
                gb
            });
            vec![gx, gb]
        }),
    ))
}

/// Non-overlapping `size × size` max pooling; ties go to the first element
/// in raster order.
pub fn max_pool2d(input: &Tensor, size: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4("max_pool2d", input)?;
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::dim("max_pool2d", format!("window {size} does not tile {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for i in 0..size {
                    for j in 0..size {
                        let p = base + (oy * size + i) * w + ox * size + j;
                        if x[p] > x[best] {
                            best = p;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    let len = x.len();
    Ok(Tensor::from_op(
        "max_pool2d",
        vec![n, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; len];
            for (gi, &p) in g.iter().zip(&arg) {
                gx[p] += gi;
            }
            vec![Some(gx)]
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centres (`align_corners = false`), edge-clamped.
    Bilinear,
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        })
    }
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(Error::Config(format!("unknown upsample mode '{other}'"))),
        }
    }
}

/// Source taps `(index, weight)` for one output coordinate.
fn bilinear_taps(dst: usize, factor: usize, len: usize) -> [(usize, f64); 2] {
    let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let t = src - i0 as f64;
    [(i0, 1.0 - t), (i1, t)]
}

/// Spatial upsampling by an integer `factor ≥ 2`.
pub fn upsample(input: &Tensor, mode: UpsampleMode, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4("upsample", input)?;
    if factor < 2 {
        return Err(Error::dim("upsample", format!("factor must be at least 2, got {factor}")));
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let planes = n * c;
    // per output pixel: up to four (source offset, weight) taps
    let ytaps: Vec<[(usize, f64); 2]> = (0..oh)
        .map(|y| match mode {
            UpsampleMode::Nearest => [(y / factor, 1.0), (y / factor, 0.0)],
            UpsampleMode::Bilinear => bilinear_taps(y, factor, h),
        })
        .collect();
    let xtaps: Vec<[(usize, f64); 2]> = (0..ow)
        .map(|xx| match mode {
            UpsampleMode::Nearest => [(xx / factor, 1.0), (xx / factor, 0.0)],
            UpsampleMode::Bilinear => bilinear_taps(xx, factor, w),
        })
        .collect();
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, yt) in ytaps.iter().enumerate() {
            for (xx, xt) in xtaps.iter().enumerate() {
                dst[y * ow + xx] = match mode {
                    UpsampleMode::Nearest => src[yt[0].0 * w + xt[0].0],
                    UpsampleMode::Bilinear => {
                        let mut v = 0.0;
                        for &(iy, wy) in yt {
                            for &(ix, wx) in xt {
                                v += wy * wx * src[iy * w + ix];
                            }
                        }
                        v
                    }
                };
            }
        }
    }
    Ok(Tensor::from_op(
        "upsample",
        vec![n, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (y, yt) in ytaps.iter().enumerate() {
                    for (xx, xt) in xtaps.iter().enumerate() {
                        let go = gsrc[y * ow + xx];
                        for &(iy, wy) in yt {
                            for &(ix, wx) in xt {
                                dst[iy * w + ix] += wy * wx * go;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_conv_sums_to_nine() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn impulse_response_is_kernel() {
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let x = Tensor::new(&[1, 1, 5, 5], img).unwrap();
        let kd: Vec<f64> = (1..=9).map(f64::from).collect();
        let k = Tensor::new(&[1, 1, 3, 3], kd.clone()).unwrap();
        let y = conv2d(&x, &k, 1, 1).unwrap();
        // cross-correlation: output at (2+a, 2+b) = k[1-a, 1-b]
        for a in -1i32..=1 {
            for b in -1i32..=1 {
                let o = ((2 + a) * 5 + (2 + b)) as usize;
                let kk = ((1 - a) * 3 + (1 - b)) as usize;
                assert_eq!(y.data()[o], kd[kk]);
            }
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::ones(&[1, 2, 4, 4]);
        let k = Tensor::ones(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn nearest_upsample_example() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample(&x, UpsampleMode::Nearest, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn bilinear_keeps_constants() {
        let x = Tensor::full(&[1, 2, 3, 5], 0.7);
        let y = upsample(&x, UpsampleMode::Bilinear, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 10]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn bilinear_half_pixel_convention() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample(&x, UpsampleMode::Bilinear, 2).unwrap();
        // centres at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_factor_one_rejected() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        assert!(upsample(&x, UpsampleMode::Nearest, 1).is_err());
    }

    #[test]
    fn transposed_conv_stride_two_tiles_kernel() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let k = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv_transpose2d(&x, &k, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1., 2., 2., 4., 3., 4., 6., 8.]);
    }

    #[test]
    fn max_pool_picks_max() {
        let x = Tensor::new(&[1, 1, 2, 4], vec![1., 5., 2., 2., 3., 4., 0., 1.]).unwrap();
        let y = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 2.0]);
    }
}
