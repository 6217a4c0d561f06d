use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ising::{Phase, SimConfig};
use crate::modadd;
use crate::numerics::{conv2d_forward, linear_forward, relu};
use crate::testutil::{central_difference, central_difference_at, max_relative_error};

fn random_params(arch: &Architecture, seed: u64, scale: f64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..arch.param_count()).map(|_| rng.gen_range(-scale..scale)).collect();
    arch.zeros().with_values(values).unwrap()
}

fn random_spins(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

#[test]
fn parameter_counts() {
    assert_eq!(Architecture::modadd(113).param_count(), 174193);
    assert_eq!(Architecture::ising(16).unwrap().param_count(), 6748);
    assert!(Architecture::ising(3).is_err());
}

#[test]
fn init_moments_follow_fan_in() {
    for arch in [Architecture::modadd(113), Architecture::ising(16).unwrap()] {
        let p = init(&arch, 1.0, 11).unwrap();
        for l in arch.layers().iter().filter(|l| l.weight.len() >= 5000) {
            let w = p.weights(l);
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let expected = (1.0 / (3.0 * l.fan_in() as f64)).sqrt();
            assert!((sd / expected - 1.0).abs() < 0.05, "{}: {sd} vs {expected}", l.name);
            assert!(p.bias(l).iter().all(|&b| b == 0.0));
        }
    }
}

#[test]
fn multiplier_scales_weights_exactly() {
    let arch = Architecture::ising(16).unwrap();
    let one = init(&arch, 1.0, 4).unwrap();
    let ten = init(&arch, 10.0, 4).unwrap();
    for l in arch.layers() {
        for (a, b) in one.weights(l).iter().zip(ten.weights(l)) {
            assert_eq!(a * 10.0, *b);
        }
        assert_eq!(one.bias(l), ten.bias(l));
    }
    assert_eq!(init(&arch, 1.0, 4).unwrap(), one);
    assert_ne!(init(&arch, 1.0, 5).unwrap(), one);
    assert!(matches!(init(&arch, 0.0, 1), Err(Error::Domain(_))));
    assert!(matches!(init(&arch, -1.0, 1), Err(Error::Domain(_))));
}

#[test]
fn zero_model_is_uniform() {
    let arch = Architecture::modadd(113);
    let split = modadd::split(113, 0.7, 0).unwrap();
    let test = Dataset::from_modadd(&split.test[..200]).unwrap();
    let m = evaluate(&arch, arch.zeros().values(), &test).unwrap();
    assert!((m.loss - 113f64.ln()).abs() < 1e-12);

    let arch = Architecture::ising(16).unwrap();
    let snaps = vec![Snapshot::filled(16, 1, 1.5, 1.0), Snapshot::checkerboard(16, 3.0, 1.0)];
    let data = Dataset::from_snapshots(&snaps).unwrap();
    let m = evaluate(&arch, arch.zeros().values(), &data).unwrap();
    assert!((m.loss - 2f64.ln()).abs() < 1e-12);
    assert_eq!(m.accuracy, 0.5);
}

#[test]
fn ising_feature_map_shapes() {
    let arch = Architecture::ising(16).unwrap();
    let p = init(&arch, 1.0, 0).unwrap();
    let x = Tensor::new(vec![3, 1, 16, 16], vec![1.0; 768]).unwrap();
    let out = forward(&arch, &p, &x).unwrap();
    let shapes: Vec<&[usize]> = out.pre_activations.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[3, 2, 8, 8][..], &[3, 4, 4, 4], &[3, 100], &[3, 2]]);
    assert_eq!(out.logits.shape(), &[3, 2]);
    let flat = Tensor::new(vec![3, 256], vec![1.0; 768]).unwrap();
    assert_eq!(forward(&arch, &p, &flat).unwrap(), out);
    let bad = Tensor::new(vec![3, 255], vec![1.0; 765]).unwrap();
    assert!(matches!(forward(&arch, &p, &bad), Err(Error::Dimension(_))));
}

#[test]
fn forward_matches_manual_composition() {
    let arch = Architecture::ising(16).unwrap();
    let p = random_params(&arch, 3, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(vec![1, 1, 16, 16], random_spins(&mut rng, 256)).unwrap();
    let layers = p.unflatten();
    let h = relu(&conv2d_forward(&x, &layers[0].0, &layers[0].1, 2).unwrap());
    let h = relu(&conv2d_forward(&h, &layers[1].0, &layers[1].1, 2).unwrap());
    let h = h.reshape(vec![1, 64]).unwrap();
    let h = relu(&linear_forward(&h, &layers[2].0, &layers[2].1).unwrap());
    let z = linear_forward(&h, &layers[3].0, &layers[3].1).unwrap();
    assert_eq!(forward(&arch, &p, &x).unwrap().logits, z);

    let arch = Architecture::modadd(7);
    let p = random_params(&arch, 4, 0.5);
    let x = Tensor::new(vec![1, 14], modadd::encode(3, 5, 7).unwrap().input()).unwrap();
    let layers = p.unflatten();
    let h = relu(&linear_forward(&x, &layers[0].0, &layers[0].1).unwrap());
    let z = linear_forward(&h, &layers[1].0, &layers[1].1).unwrap();
    assert_eq!(forward(&arch, &p, &x).unwrap().logits, z);
}

fn ising_batch(rows: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_spins(&mut rng, rows * 256);
    let t = (0..rows).map(|i| i % 2).collect();
    (x, t)
}

#[test]
fn ising_gradient_matches_finite_differences() {
    let arch = Architecture::ising(16).unwrap();
    let p = random_params(&arch, 8, 0.4);
    let (x, t) = ising_batch(4, 2);
    let mut grads = vec![0.0; p.len()];
    loss_and_grad(&arch, p.values(), &x, &t, &mut grads).unwrap();
    let mut scratch = vec![0.0; p.len()];
    let numeric = central_difference(p.values(), 1e-6, |q| loss_and_grad(&arch, q, &x, &t, &mut scratch).unwrap());
    let err = max_relative_error(&grads, &numeric);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn modadd_gradient_matches_finite_differences() {
    let arch = Architecture::modadd(113);
    let p = init(&arch, 1.0, 6).unwrap();
    let split = modadd::split(113, 0.7, 1).unwrap();
    let data = Dataset::from_modadd(&split.train[..8]).unwrap();
    let (x, t) = data.rows(0..8);
    let mut grads = vec![0.0; p.len()];
    loss_and_grad(&arch, p.values(), x, t, &mut grads).unwrap();
    // every gradient-carrying fc1 row, plus a spread of fc2 weights and all fc2 biases
    let fc1 = arch.layer("fc1").unwrap();
    let fc2 = arch.layer("fc2").unwrap();
    let mut coords: Vec<usize> = (0..p.len()).filter(|&i| fc1.weight.contains(&i) && grads[i] != 0.0).step_by(7).collect();
    coords.extend(fc1.bias.clone().step_by(5));
    coords.extend(fc2.weight.clone().step_by(97));
    coords.extend(fc2.bias.clone());
    let mut scratch = vec![0.0; p.len()];
    let numeric = central_difference_at(p.values(), &coords, 1e-5, |q| loss_and_grad(&arch, q, x, t, &mut scratch).unwrap());
    let analytic: Vec<f64> = coords.iter().map(|&i| grads[i]).collect();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn param_vector_layout_validation() {
    let arch = Architecture::modadd(5);
    let layers = arch.layers().to_vec();
    assert!(ParamVector::new(vec![0.0; arch.param_count() - 1], layers.clone()).is_err());
    let mut shifted = layers.clone();
    shifted[1].weight = shifted[1].weight.start + 1..shifted[1].weight.end + 1;
    assert!(ParamVector::new(vec![0.0; arch.param_count() + 1], shifted).is_err());
    assert!(matches!(arch.zeros().layer("fc3"), Err(Error::UnknownLayer(_))));
    assert!(arch.zeros().with_values(vec![0.0; 3]).is_err());
}

#[test]
fn dataset_construction() {
    let s = vec![modadd::encode(1, 2, 3).unwrap(), modadd::encode(2, 2, 3).unwrap()];
    let d = Dataset::from_modadd(&s).unwrap();
    assert_eq!(d.width(), 6);
    assert_eq!(d.targets(), &[0, 1]);
    assert_eq!(d.row(1), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let sub = d.subset(&[1]);
    assert_eq!(sub.targets(), &[1]);
    assert!(Dataset::new(vec![0.0; 5], 2, vec![0, 1]).is_err());

    let cfg = SimConfig::standard(4, 0);
    let snaps = vec![Snapshot::filled(4, -1, 1.0, cfg.coupling)];
    let d = Dataset::from_snapshots(&snaps).unwrap();
    assert_eq!(d.targets(), &[Phase::Ordered.class()]);
    assert!(d.features().iter().all(|&v| v == -1.0));
}

#[test]
fn loss_and_grad_agrees_with_evaluate() {
    let arch = Architecture::modadd(11);
    let p = init(&arch, 1.0, 2).unwrap();
    let split = modadd::split(11, 0.5, 2).unwrap();
    let d = Dataset::from_modadd(&split.train).unwrap();
    let mut g = vec![0.0; p.len()];
    let loss = loss_and_grad(&arch, p.values(), d.features(), d.targets(), &mut g).unwrap();
    let m = evaluate(&arch, p.values(), &d).unwrap();
    assert!((loss - m.loss).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&m.accuracy));
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flatten_round_trip(seed in any::<u64>(), p in 2usize..20) {
        let arch = Architecture::modadd(p);
        let v = random_params(&arch, seed, 3.0);
        let back = ParamVector::flatten(arch.layers().to_vec(), &v.unflatten()).unwrap();
        prop_assert_eq!(back.values(), v.values());
    }

    #[test]
    fn logits_scale_monotonically_with_multiplier(seed in any::<u64>(), lambda in 1.01f64..5.0) {
        // zero biases and positive homogeneity of ReLU: logits scale by w0²
        let arch = Architecture::modadd(13);
        let small = init(&arch, 0.5, seed).unwrap();
        let big = init(&arch, 0.5 * lambda, seed).unwrap();
        let x = modadd::encode(3, 7, 13).unwrap().input();
        let zs = logits(&arch, small.values(), &x).unwrap();
        let zb = logits(&arch, big.values(), &x).unwrap();
        let ns: f64 = zs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = zb.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(nb > ns);
        prop_assert!((nb / ns - lambda * lambda).abs() < 1e-9 * lambda * lambda);
    }
}
