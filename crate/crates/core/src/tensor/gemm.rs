//! Row-major matrix kernels.
//!
//! Every output accumulates over the shared axis in ascending order starting
//! from zero, so results reproduce a naive triple loop bit for bit. Blocking
//! only changes which outputs are computed together: a packed `k × NR` panel
//! of B is swept by `MR × NR` register tiles.

const MR: usize = 4;
#[cfg(target_feature = "avx512f")]
const NR: usize = 16;
#[cfg(all(target_feature = "avx2", not(target_feature = "avx512f")))]
const NR: usize = 8;
#[cfg(not(target_feature = "avx2"))]
const NR: usize = 4;

/// One `MR × NR` tile over the full shared axis. Fixed-size arrays let the
/// inner loops vectorise.
#[inline(always)]
fn tile(ablk: &[f64], panel: &[f64]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for (ap, bp) in ablk.chunks_exact(MR).zip(panel.chunks_exact(NR)) {
        let ap: &[f64; MR] = ap.try_into().expect("MR chunk");
        let bp: &[f64; NR] = bp.try_into().expect("NR chunk");
        for r in 0..MR {
            for jj in 0..NR {
                acc[r][jj] += ap[r] * bp[jj];
            }
        }
    }
    acc
}

/// `c[m,n] (+)= A[m,k] · B[k,n]` with `A[i,p] = a[i*ars + p*acs]` and
/// `B[p,j] = b[p*brs + j*bcs]`; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    (ars, acs): (usize, usize),
    b: &[f64],
    (brs, bcs): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // A packed as [m/MR][k][MR], zero-padded
    let blocks = m.div_ceil(MR);
    let mut apack = vec![0.0f64; blocks * k * MR];
    for (blk, dst) in apack.chunks_exact_mut(k * MR).enumerate() {
        for r in 0..MR.min(m - blk * MR) {
            let row = (blk * MR + r) * ars;
            for p in 0..k {
                dst[p * MR + r] = a[row + p * acs];
            }
        }
    }
    let mut panel = vec![0.0f64; k * NR];
    let mut j0 = 0;
    while j0 < n {
        let nc = NR.min(n - j0);
        if bcs == 1 && nc == NR {
            for p in 0..k {
                panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * brs + j0..p * brs + j0 + NR]);
            }
        } else if brs == 1 {
            // transposed operand: walk each source row contiguously
            panel.fill(0.0);
            for jj in 0..nc {
                let src = &b[(j0 + jj) * bcs..(j0 + jj) * bcs + k];
                for (p, v) in src.iter().enumerate() {
                    panel[p * NR + jj] = *v;
                }
            }
        } else {
            for p in 0..k {
                let dst = &mut panel[p * NR..(p + 1) * NR];
                for (jj, d) in dst.iter_mut().enumerate() {
                    *d = if jj < nc { b[p * brs + (j0 + jj) * bcs] } else { 0.0 };
                }
            }
        }
        for (blk, ablk) in apack.chunks_exact(k * MR).enumerate() {
            let i0 = blk * MR;
            let mr = MR.min(m - i0);
            let acc = tile(ablk, &panel);
            for (r, row) in acc.iter().enumerate().take(mr) {
                let out = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + nc];
                if accumulate {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                } else {
                    out.copy_from_slice(&row[..nc]);
                }
            }
        }
        j0 += nc;
    }
}

/// `c[m,n] = A[m,k] · b[k,n]` where `A[i,p] = a[i*rs + p*cs]`.
/// With `accumulate` the product is added to the existing contents of `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_nn(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    rs: usize,
    cs: usize,
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(b.len() >= k * n);
    gemm(m, n, k, a, (rs, cs), b, (n, 1), c, accumulate);
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ` (both operands row-major).
pub fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, n, k, a, (k, 1), b, (1, k), c, true);
}
