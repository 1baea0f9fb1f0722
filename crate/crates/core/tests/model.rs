use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semikan::model::{average_argmax, ModelConfig, SemiKanModel};
use semikan::nn::Module;
use semikan::{Error, Tensor};

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: vec![4, 8],
        embed_dim: 8,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn default_model_emits_three_full_size_maps() {
    let model = SemiKanModel::build(&ModelConfig::default(), 0).unwrap();
    let logits = model.forward(&rand_tensor(&[2, 1, 64, 64], 1, 1.0), true).unwrap();
    assert_eq!(logits.len(), 3);
    for l in &logits {
        assert_eq!(l.shape(), [2, 2, 64, 64]);
        assert!(l.data().iter().all(|v| v.is_finite()));
    }
    assert_eq!(model.encoder_passes(), 1);
}

#[test]
fn two_decoders_two_outputs() {
    let cfg = ModelConfig {
        strategies: vec!["nearest".into(), "transposed_conv".into()],
        ..small_config()
    };
    let model = SemiKanModel::build(&cfg, 0).unwrap();
    assert_eq!(model.forward(&rand_tensor(&[1, 1, 16, 16], 2, 1.0), true).unwrap().len(), 2);
}

#[test]
fn decoder_count_and_divisibility_are_validated() {
    let one = ModelConfig {
        strategies: vec!["nearest".into()],
        ..small_config()
    };
    assert!(matches!(SemiKanModel::build(&one, 0), Err(Error::Config(_))));
    let repeated = ModelConfig {
        strategies: vec!["nearest".into(), "nearest".into()],
        ..small_config()
    };
    assert!(matches!(SemiKanModel::build(&repeated, 0), Err(Error::Config(_))));
    let odd = ModelConfig {
        height: 20,
        ..small_config()
    };
    assert!(matches!(SemiKanModel::build(&odd, 0), Err(Error::Config(_))));
    let unknown = ModelConfig {
        strategies: vec!["nearest".into(), "pixel_shuffle".into()],
        ..small_config()
    };
    assert!(matches!(SemiKanModel::build(&unknown, 0), Err(Error::UnknownEntry { .. })));
}

#[test]
fn same_seed_same_parameters() {
    let a = SemiKanModel::build(&small_config(), 7).unwrap();
    let b = SemiKanModel::build(&small_config(), 7).unwrap();
    let c = SemiKanModel::build(&small_config(), 8).unwrap();
    assert_eq!(a.num_params(), b.num_params());
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.name(), q.name());
        assert_eq!(p.data(), q.data());
    }
    assert!(a.params().iter().zip(c.params()).any(|(p, q)| p.data() != q.data()));
}

#[test]
fn identical_decoders_give_identical_logits() {
    let cfg = ModelConfig {
        strategies: vec!["bilinear".into(), "bilinear".into()],
        ..small_config()
    };
    let mut model = SemiKanModel::build_unchecked(&cfg, 3).unwrap();
    let source: Vec<Vec<f64>> = model.decoders[0].params().iter().map(|p| p.data().to_vec()).collect();
    for (p, data) in model.decoders[1].params_mut().into_iter().zip(source) {
        p.set_data(data).unwrap();
    }
    let logits = model.forward(&rand_tensor(&[2, 1, 16, 16], 4, 1.0), true).unwrap();
    assert_eq!(logits[0].data(), logits[1].data());
}

#[test]
fn every_parameter_receives_gradient() {
    let model = SemiKanModel::build(&small_config(), 5).unwrap();
    let logits = model.forward(&rand_tensor(&[2, 1, 16, 16], 6, 1.0), true).unwrap();
    let mut total = logits[0].sum();
    for l in &logits[1..] {
        total = total.add(&l.sum()).unwrap();
    }
    total.backward().unwrap();
    for p in model.params() {
        let g = p.grad().unwrap_or_else(|| panic!("{} has no gradient", p.name()));
        assert!(g.iter().any(|&v| v != 0.0), "{} gradient is all zero", p.name());
    }
}

#[test]
fn encoder_runs_once_per_forward() {
    for strategies in [vec!["nearest", "bilinear"], vec!["nearest", "bilinear", "transposed_conv"]] {
        let cfg = ModelConfig {
            strategies: strategies.iter().map(|s| s.to_string()).collect(),
            ..small_config()
        };
        let model = SemiKanModel::build(&cfg, 0).unwrap();
        let x = rand_tensor(&[1, 1, 16, 16], 7, 1.0);
        model.forward(&x, true).unwrap();
        assert_eq!(model.encoder_passes(), 1);
        model.predict(&x).unwrap();
        assert_eq!(model.encoder_passes(), 2);
    }
}

#[test]
fn decoder_parameters_are_disjoint() {
    let model = SemiKanModel::build(&ModelConfig::default(), 0).unwrap();
    let mut ids = HashSet::new();
    let mut names = HashSet::new();
    for p in model.params() {
        assert!(ids.insert(p.tensor().id()), "aliased tensor {}", p.name());
        assert!(names.insert(p.name().to_string()), "duplicate name {}", p.name());
    }
    let per_decoder: Vec<HashSet<u64>> = model.decoders.iter().map(|d| d.params().iter().map(|p| p.tensor().id()).collect()).collect();
    for i in 0..per_decoder.len() {
        for j in i + 1..per_decoder.len() {
            assert!(per_decoder[i].is_disjoint(&per_decoder[j]));
        }
    }
}

#[test]
fn eval_forward_is_repeatable() {
    let model = SemiKanModel::build(&small_config(), 9).unwrap();
    model.forward(&rand_tensor(&[4, 1, 16, 16], 10, 1.0), true).unwrap();
    let x = rand_tensor(&[2, 1, 16, 16], 11, 1.0);
    let a = model.forward(&x, false).unwrap();
    let b = model.forward(&x, false).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.data(), q.data());
    }
}

#[test]
fn wrong_input_shape_is_a_dimension_error() {
    let model = SemiKanModel::build(&small_config(), 0).unwrap();
    assert!(matches!(model.forward(&Tensor::zeros(&[1, 2, 16, 16]), true), Err(Error::Dimension { .. })));
    assert!(matches!(model.forward(&Tensor::zeros(&[1, 1, 12, 16]), true), Err(Error::Dimension { .. })));
}

#[test]
fn class_one_everywhere() {
    let mut l = vec![0.0; 2 * 16];
    l[16..].fill(3.0);
    let logits = Tensor::new(&[1, 2, 4, 4], l).unwrap();
    let p = average_argmax(&[logits.clone(), logits]).unwrap();
    assert!(p.data().iter().all(|&v| v == 1.0));
}

#[test]
fn exact_tie_goes_to_class_zero() {
    let a = Tensor::new(&[1, 2, 1, 1], vec![2.0, 0.0]).unwrap();
    let b = Tensor::new(&[1, 2, 1, 1], vec![0.0, 2.0]).unwrap();
    assert_eq!(average_argmax(&[a, b]).unwrap().data(), [0.0]);
    let flat = Tensor::zeros(&[1, 3, 2, 2]);
    assert!(average_argmax(&[flat]).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn average_then_argmax_oracle() {
    let (n, k, h, w) = (2, 3, 4, 4);
    let logits: Vec<Tensor> = (0..3).map(|d| rand_tensor(&[n, k, h, w], 20 + d, 2.0)).collect();
    let got = average_argmax(&logits).unwrap();
    for s in 0..n {
        for a in 0..h * w {
            let mut avg = vec![0.0; k];
            for l in &logits {
                let z: Vec<f64> = (0..k).map(|c| l.data()[(s * k + c) * h * w + a]).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = e.iter().sum();
                for c in 0..k {
                    avg[c] += e[c] / sum / logits.len() as f64;
                }
            }
            let mut best = 0;
            for c in 1..k {
                if avg[c] > avg[best] {
                    best = c;
                }
            }
            assert_eq!(got.data()[s * h * w + a], best as f64);
        }
    }
}
