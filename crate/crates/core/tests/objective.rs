use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semikan::gradcheck::{check_tensors, worst, CheckOptions};
use semikan::objective::{
    dice_loss, pixel_kl, pseudo_annotation, ramp_weight, sharpen, total_loss, ConsistencyState, ObjectiveConfig,
};
use semikan::{Error, Tensor};

fn px(v: &[f64]) -> Tensor {
    Tensor::new(&[1, v.len(), 1, 1], v.to_vec()).unwrap()
}

/// `[n, k, h, w]` random distributions over axis 1.
fn rand_probs(n: usize, k: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = h * w;
    let mut d = vec![0.0; n * k * hw];
    for s in 0..n {
        for a in 0..hw {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            for c in 0..k {
                d[(s * k + c) * hw + a] = raw[c] / z;
            }
        }
    }
    Tensor::new(&[n, k, h, w], d).unwrap()
}

#[test]
fn unit_temperature_is_identity() {
    let p = rand_probs(2, 3, 2, 2, 1);
    let s = sharpen(&p, 1.0).unwrap();
    for (a, b) in s.data().iter().zip(p.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn even_split_is_a_fixed_point() {
    for t in [0.1, 0.5, 2.0, 7.0] {
        assert_eq!(sharpen(&px(&[0.5, 0.5]), t).unwrap().data(), [0.5, 0.5]);
    }
}

#[test]
fn sharpen_eighty_twenty_at_half() {
    let s = sharpen(&px(&[0.8, 0.2]), 0.5).unwrap();
    assert!((s.data()[0] - 0.64 / 0.68).abs() < 1e-12);
    assert!((s.data()[1] - 0.04 / 0.68).abs() < 1e-12);
    assert!((s.data()[0] - 0.941176).abs() < 1e-6);
}

#[test]
fn non_positive_temperature_rejected() {
    assert!(matches!(sharpen(&px(&[0.5, 0.5]), 0.0), Err(Error::Config(_))));
    assert!(matches!(sharpen(&px(&[0.5, 0.5]), -1.0), Err(Error::Config(_))));
}

#[test]
fn pseudo_annotation_cases() {
    let p = rand_probs(1, 2, 2, 2, 2);
    assert_eq!(pseudo_annotation(&[p.clone(), p.clone()]).unwrap().data(), p.data());
    assert_eq!(pseudo_annotation(&[px(&[1.0, 0.0]), px(&[0.0, 1.0])]).unwrap().data(), [0.5, 0.5]);
    let ps: Vec<Tensor> = (0..3).map(|s| rand_probs(2, 3, 2, 2, 10 + s)).collect();
    let avg = pseudo_annotation(&ps).unwrap();
    for i in 0..avg.numel() {
        let want = (ps[0].data()[i] + ps[1].data()[i] + ps[2].data()[i]) / 3.0;
        assert!((avg.data()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn identical_decoders_have_zero_uncertainty() {
    let p = rand_probs(2, 2, 3, 3, 3);
    let state = ConsistencyState::from_sharpened(vec![p.clone(), p.clone(), p], 0.5, 0.5).unwrap();
    // the three-way mean can differ from each input by rounding
    assert!(state.summed_uncertainty().iter().all(|u| u.abs() < 1e-14));
    let (u, r, c) = state.losses().unwrap();
    for v in [u, r, c] {
        assert!(v.item().unwrap().abs() < 1e-7);
    }
    let two = ConsistencyState::from_sharpened(vec![px(&[0.3, 0.7]), px(&[0.3, 0.7])], 0.5, 0.5).unwrap();
    assert_eq!(two.summed_uncertainty(), [0.0, 0.0]);
}

#[test]
fn certain_versus_even_split_is_log_two() {
    let u = pixel_kl(&px(&[1.0, 0.0]), &px(&[0.5, 0.5])).unwrap();
    assert!((u.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((u.data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn random_uncertainty_is_non_negative() {
    for seed in 0..1000 {
        let ps: Vec<Tensor> = (0..3).map(|d| rand_probs(1, 3, 1, 1, seed * 3 + d)).collect();
        let state = ConsistencyState::from_sharpened(ps, 0.5, 0.5).unwrap();
        for u in &state.uncertainty {
            assert!(u.data()[0] >= 0.0, "seed {seed}: {}", u.data()[0]);
        }
        for w in &state.weights {
            assert!(w.data()[0] > 0.0 && w.data()[0] <= 1.0);
        }
    }
}

#[test]
fn alpha_endpoints() {
    let ps = vec![rand_probs(2, 2, 3, 3, 4), rand_probs(2, 2, 3, 3, 5)];
    let (u, r, c1) = ConsistencyState::from_sharpened(ps.clone(), 0.5, 1.0).unwrap().losses().unwrap();
    assert_eq!(c1.item().unwrap(), u.item().unwrap());
    let (_, _, c0) = ConsistencyState::from_sharpened(ps.clone(), 0.5, 0.0).unwrap().losses().unwrap();
    assert_eq!(c0.item().unwrap(), r.item().unwrap());
    let (u, r, c) = ConsistencyState::from_sharpened(ps, 0.5, 0.3).unwrap().losses().unwrap();
    assert_eq!(c.item().unwrap(), u.item().unwrap() * 0.3 + r.item().unwrap() * 0.7);
    assert!(matches!(
        ConsistencyState::from_sharpened(vec![px(&[0.5, 0.5]), px(&[0.5, 0.5])], 0.5, 1.5),
        Err(Error::Config(_))
    ));
}

#[test]
fn two_decoder_single_pixel_hand_values() {
    let state = ConsistencyState::from_sharpened(vec![px(&[0.8, 0.2]), px(&[0.6, 0.4])], 0.5, 0.5).unwrap();
    assert_eq!(state.pseudo.data(), [0.7, 0.30000000000000004]);
    let u = state.summed_uncertainty();
    assert!((u[0] - 0.025732092477985358).abs() < 1e-9);
    assert!((u[1] - 0.022582421084357485).abs() < 1e-9);
    let (lu, lr, lc) = state.losses().unwrap();
    assert!((lu.item().unwrap() - 0.02415725678117142).abs() < 1e-9);
    assert!((lr.item().unwrap() - 0.1414213562373095).abs() < 1e-9);
    assert!((lc.item().unwrap() - 0.08278930650924046).abs() < 1e-9);
}

#[test]
fn rectify_weights_favour_reliable_pixels() {
    // decoder 0 agrees at pixel 0 and disagrees at pixel 1
    let a = Tensor::new(&[1, 2, 1, 2], vec![0.5, 0.99, 0.5, 0.01]).unwrap();
    let b = Tensor::new(&[1, 2, 1, 2], vec![0.5, 0.01, 0.5, 0.99]).unwrap();
    let state = ConsistencyState::from_sharpened(vec![a, b], 0.5, 0.0).unwrap();
    let w = state.weights[0].data();
    assert_eq!(w[0], 1.0);
    assert!(w[1] < w[0]);
    let u = state.uncertainty[0].data();
    assert!(u[1] > u[0]);
}

#[test]
fn dice_cases() {
    let target = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let mut forced = vec![0.0; 8];
    for a in 0..4 {
        let c = target.data()[a] as usize;
        forced[c * 4 + a] = 30.0;
    }
    let l = dice_loss(&Tensor::new(&[1, 2, 2, 2], forced).unwrap(), &target).unwrap();
    assert!(l.item().unwrap() < 1e-4);
    let l = dice_loss(&Tensor::zeros(&[1, 2, 2, 2]), &target).unwrap();
    assert!((l.item().unwrap() - 0.5).abs() < 1e-3);
    assert!(matches!(dice_loss(&Tensor::zeros(&[1, 2, 2, 2]), &Tensor::full(&[1, 2, 2], 2.0)), Err(Error::Contract(_))));
}

#[test]
fn dice_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = Tensor::new(&[2, 3, 3, 3], (0..54).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let target = Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.random_range(0..3) as f64).collect()).unwrap();
    let err = worst(&check_tensors(&[logits], |t| dice_loss(&t[0], &target), CheckOptions::default()).unwrap());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn ramp_endpoints() {
    assert!((ramp_weight(0, 1.0, 100) - 0.006737946999085467).abs() < 1e-15);
    assert!((ramp_weight(0, 2.0, 100) - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
    assert_eq!(ramp_weight(100, 1.5, 100), 1.5);
    assert_eq!(ramp_weight(250, 1.5, 100), 1.5);
    assert_eq!(ramp_weight(0, 1.5, 0), 1.5);
    let mut prev = 0.0;
    for t in 0..=100 {
        let v = ramp_weight(t, 1.0, 100);
        assert!(v >= prev);
        prev = v;
    }
}

#[test]
fn no_unlabeled_means_dice_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labeled: Vec<Tensor> = (0..3)
        .map(|_| Tensor::new(&[2, 2, 2, 2], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let target = Tensor::new(&[2, 2, 2], vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let obj = total_loss(&labeled, &target, &[], 0.8, &ObjectiveConfig::default()).unwrap();
    let dice: f64 = labeled.iter().map(|l| dice_loss(l, &target).unwrap().item().unwrap()).sum::<f64>() / 3.0;
    assert!((obj.report.total - dice).abs() < 1e-15);
    assert_eq!(obj.report.consistency, 0.0);
    assert!(matches!(
        total_loss(&[], &target, &[], 0.8, &ObjectiveConfig::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn full_objective_gradient_micro_fixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut r = |shape: &[usize]| Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let inputs = vec![r(&[1, 2, 2, 2]), r(&[1, 2, 2, 2]), r(&[1, 2, 2, 2]), r(&[1, 2, 2, 2])];
    let target = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let cfg = ObjectiveConfig::default();
    let sharp = |t: &[Tensor]| -> Vec<Tensor> { t[2..].iter().map(|l| sharpen(&l.softmax(1).unwrap(), cfg.temperature).unwrap()).collect() };
    // the pseudo-annotation is a constant target, so the numeric side must
    // not move it either
    let frozen = pseudo_annotation(&sharp(&inputs)).unwrap();
    let objective = |t: &[Tensor]| -> semikan::Result<Tensor> {
        let sharpened = sharp(t);
        let uncertainty = sharpened.iter().map(|p| pixel_kl(p, &frozen)).collect::<semikan::Result<Vec<_>>>()?;
        let weights = uncertainty.iter().map(|u| u.neg().exp()).collect();
        let state = ConsistencyState {
            temperature: cfg.temperature,
            alpha: cfg.alpha,
            sharpened,
            pseudo: frozen.clone(),
            uncertainty,
            weights,
        };
        let (_, _, c) = state.losses()?;
        let dice = dice_loss(&t[0], &target)?.add(&dice_loss(&t[1], &target)?)?.mul_scalar(0.5);
        dice.add(&c.mul_scalar(0.7))
    };
    let full = total_loss(&inputs[..2], &target, &inputs[2..], 0.7, &cfg).unwrap().total.item().unwrap();
    assert!((objective(&inputs).unwrap().item().unwrap() - full).abs() < 1e-15);
    let groups = check_tensors(&inputs, objective, CheckOptions::default()).unwrap();
    let via_total: Vec<Vec<f64>> = {
        let leaves: Vec<Tensor> = inputs.iter().map(Tensor::detach_param).collect();
        total_loss(&leaves[..2], &target, &leaves[2..], 0.7, &cfg).unwrap().total.backward().unwrap();
        leaves.iter().map(|l| l.grad().unwrap()).collect()
    };
    let via_oracle: Vec<Vec<f64>> = {
        let leaves: Vec<Tensor> = inputs.iter().map(Tensor::detach_param).collect();
        objective(&leaves).unwrap().backward().unwrap();
        leaves.iter().map(|l| l.grad().unwrap()).collect()
    };
    for (a, b) in via_total.iter().flatten().zip(via_oracle.iter().flatten()) {
        assert!((a - b).abs() < 1e-14);
    }
    for g in &groups {
        assert!(g.rel_err < 1e-4, "{}: {}", g.name, g.rel_err);
    }
    assert!(groups[2].analytic_norm > 0.0);
}

#[test]
fn report_fields_are_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut r = |shape: &[usize]| Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let labeled = vec![r(&[1, 2, 4, 4]), r(&[1, 2, 4, 4])];
    let unlabeled = vec![r(&[2, 2, 4, 4]), r(&[2, 2, 4, 4])];
    let target = Tensor::new(&[1, 4, 4], (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let cfg = ObjectiveConfig {
        alpha: 0.25,
        ..ObjectiveConfig::default()
    };
    let rep = total_loss(&labeled, &target, &unlabeled, 0.4, &cfg).unwrap().report;
    assert!((rep.consistency - (0.25 * rep.uncertainty + 0.75 * rep.rectify)).abs() < 1e-15);
    assert!((rep.total - (rep.dice + 0.4 * rep.consistency)).abs() < 1e-15);
    assert_eq!(rep.lambda, 0.4);
}
