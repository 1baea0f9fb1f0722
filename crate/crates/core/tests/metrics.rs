use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semikan::metrics::{dice_jaccard, evaluate_labels, percentile, surface_distances, Mask};
use semikan::Error;

fn block(h: usize, w: usize, y0: usize, x0: usize, s: usize) -> Mask {
    Mask::new(h, w, (0..h * w).map(|i| (y0..y0 + s).contains(&(i / w)) && (x0..x0 + s).contains(&(i % w))).collect()).unwrap()
}

fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    // a few random rectangles so boundaries are non-trivial
    let mut bits = vec![false; h * w];
    for _ in 0..rng.random_range(1..4) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                bits[y * w + x] = true;
            }
        }
    }
    for b in bits.iter_mut() {
        if rng.random_bool(0.05) {
            *b = !*b;
        }
    }
    if !bits.iter().any(|&b| b) {
        bits[0] = true;
    }
    Mask::new(h, w, bits).unwrap()
}

/// Brute-force reference: explicit boundary scan and all-pairs distances.
fn brute_force(p: &Mask, g: &Mask) -> (f64, f64, f64) {
    let (h, w) = (p.height(), p.width());
    let edge = |m: &Mask| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !m.get(y, x) {
                    continue;
                }
                let neighbours = [(y as isize - 1, x as isize), (y as isize + 1, x as isize), (y as isize, x as isize - 1), (y as isize, x as isize + 1)];
                let exposed = neighbours
                    .iter()
                    .any(|&(yy, xx)| yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !m.get(yy as usize, xx as usize));
                if exposed {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let (bp, bg) = (edge(p), edge(g));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|a| to.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut all = directed(&bp, &bg);
    all.extend(directed(&bg, &bp));
    all.sort_by(f64::total_cmp);
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let hd95 = all[lo] + (all[hi] - all[lo]) * (rank - lo as f64);
    let asd = all.iter().sum::<f64>() / all.len() as f64;
    (hd95, asd, *all.last().unwrap())
}

#[test]
fn identical_and_disjoint_masks() {
    let a = block(8, 8, 1, 1, 3);
    assert_eq!(dice_jaccard(&a, &a).unwrap(), (100.0, 100.0));
    assert_eq!(dice_jaccard(&a, &block(8, 8, 5, 5, 2)).unwrap(), (0.0, 0.0));
    assert_eq!(surface_distances(&a, &a).unwrap(), (0.0, 0.0));
}

#[test]
fn corner_sharing_blocks() {
    let (d, j) = dice_jaccard(&block(8, 8, 0, 0, 2), &block(8, 8, 0, 0, 3)).unwrap();
    assert!((d - 61.538461538).abs() < 1e-6);
    assert!((j - 44.444444444).abs() < 1e-6);
}

#[test]
fn singletons_five_apart() {
    // (3,4) right-triangle legs
    assert_eq!(surface_distances(&block(10, 10, 1, 1, 1), &block(10, 10, 4, 5, 1)).unwrap(), (5.0, 5.0));
    assert_eq!(surface_distances(&block(10, 10, 2, 2, 1), &block(10, 10, 2, 7, 1)).unwrap(), (5.0, 5.0));
}

#[test]
fn empty_masks_and_shape_mismatch() {
    let e = Mask::new(4, 4, vec![false; 16]).unwrap();
    assert_eq!(dice_jaccard(&e, &e).unwrap(), (100.0, 100.0));
    assert!(matches!(surface_distances(&e, &block(4, 4, 0, 0, 2)), Err(Error::UndefinedMetric(_))));
    assert!(matches!(surface_distances(&block(4, 4, 0, 0, 2), &e), Err(Error::UndefinedMetric(_))));
    assert!(matches!(dice_jaccard(&block(4, 4, 0, 0, 2), &block(5, 4, 0, 0, 2)), Err(Error::Dimension { .. })));
}

#[test]
fn distance_transform_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..50 {
        let p = random_mask(16, 16, &mut rng);
        let g = random_mask(16, 16, &mut rng);
        let (hd95, asd) = surface_distances(&p, &g).unwrap();
        let (bh, ba, hmax) = brute_force(&p, &g);
        assert!((hd95 - bh).abs() < 1e-9, "case {case}: hd95 {hd95} vs {bh}");
        assert!((asd - ba).abs() < 1e-9, "case {case}: asd {asd} vs {ba}");
        assert!(hd95 <= hmax + 1e-12);
        let (d, j) = dice_jaccard(&p, &g).unwrap();
        assert!(j <= d + 1e-12);
        assert!((j - d / (200.0 - d) * 100.0).abs() < 1e-9);
    }
}

#[test]
fn percentile_interpolates_linearly() {
    assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
    assert_eq!(percentile(&[0.0, 10.0], 0.95), 9.5);
    assert_eq!(percentile(&[7.0], 0.95), 7.0);
}

#[test]
fn multi_class_average_skips_background() {
    // 4x4 label maps, classes 0..3
    let gt = [0, 1, 1, 0, 0, 1, 1, 0, 2, 2, 0, 0, 2, 2, 0, 0];
    let pred = [0, 1, 1, 0, 0, 1, 0, 0, 2, 2, 0, 0, 2, 2, 2, 0];
    let r = evaluate_labels(&pred, &gt, 4, 4, 3).unwrap();
    assert_eq!(r.per_class.len(), 2);
    let d1 = 200.0 * 3.0 / 7.0;
    let d2 = 200.0 * 4.0 / 9.0;
    assert!((r.per_class[0].dice - d1).abs() < 1e-12);
    assert!((r.per_class[1].dice - d2).abs() < 1e-12);
    assert!((r.dice - (d1 + d2) / 2.0).abs() < 1e-12);
    let r = evaluate_labels(&[0; 16], &gt, 4, 4, 3).unwrap();
    assert_eq!((r.dice, r.hd95, r.asd), (0.0, None, None));
}
