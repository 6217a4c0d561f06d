use proptest::prelude::*;

use super::*;
use crate::infogeo::Estimator;
use crate::models::{init, LayerEntry, LayerKind};
use crate::modadd;

/// One linear layer per `(weights, bias)` pair, shape `[n / m, m]`.
fn params(layers: &[(Vec<f64>, Vec<f64>)]) -> ParamVector {
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for (k, (w, b)) in layers.iter().enumerate() {
        let start = values.len();
        values.extend(w);
        values.extend(b);
        entries.push(LayerEntry {
            name: format!("fc{}", k + 1),
            kind: LayerKind::Linear,
            weight: start..start + w.len(),
            bias: start + w.len()..values.len(),
            shape: vec![w.len() / b.len(), b.len()],
            stride: 1,
        });
    }
    ParamVector::new(values, entries).unwrap()
}

fn fim(values: Vec<f64>) -> FimDiagonal {
    FimDiagonal { values, epoch: None, estimator: Estimator::ExactClassExpectation }
}

fn curve(grid: &[f64], acc: impl Fn(f64) -> f64) -> PruningCurve {
    PruningCurve { scheme: Scheme::Parallel, points: grid.iter().map(|&p| CurvePoint { p, accuracy: acc(p), loss: 0.0 }).collect() }
}

#[test]
fn parallel_reference_vector() {
    let p = params(&[(vec![3.0, -1.0, 0.5, 2.0], vec![7.0])]);
    assert_eq!(prune_parallel(&p, 0.5).unwrap().values(), &[3.0, 0.0, 0.0, 2.0, 7.0]);
    assert_eq!(prune_parallel(&p, 0.0).unwrap(), p);
    assert_eq!(prune_parallel(&p, 1.0).unwrap().values(), &[0.0, 0.0, 0.0, 0.0, 7.0]);
    assert!(matches!(prune_parallel(&p, 1.5), Err(Error::Domain(_))));
}

#[test]
fn global_and_rescaled_global() {
    let p = params(&[(vec![10.0, 10.0], vec![0.5]), (vec![1.0, 1.0], vec![0.5])]);
    assert_eq!(prune_global(&p, 0.5, false).unwrap().values(), &[10.0, 10.0, 0.5, 0.0, 0.0, 0.5]);
    // equal rescaled scores everywhere; one weight goes from each layer
    assert_eq!(prune_global(&p, 0.5, true).unwrap().values(), &[0.0, 10.0, 0.5, 0.0, 1.0, 0.5]);
}

#[test]
fn layer_pruning() {
    let p = params(&[(vec![1.0, 2.0], vec![0.0]), (vec![3.0, 4.0], vec![0.0])]);
    assert_eq!(prune_layer(&p, "fc2", 0.5).unwrap().values(), &[1.0, 2.0, 0.0, 0.0, 4.0, 0.0]);
    assert!(matches!(prune_layer(&p, "fc9", 0.5), Err(Error::UnknownLayer(_))));
}

#[test]
fn sort_oracle() {
    let p = init(&Architecture::modadd(7), 1.0, 3).unwrap();
    for frac in [0.1, 0.37, 0.9] {
        let pruned = prune_parallel(&p, frac).unwrap();
        for l in p.layers() {
            let mut w: Vec<(f64, usize)> = p.weights(l).iter().map(|v| v.abs()).zip(0..).collect();
            w.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let k = (frac * w.len() as f64).floor() as usize;
            let got = pruned.weights(l);
            for (rank, &(_, i)) in w.iter().enumerate() {
                let expected = if rank < k { 0.0 } else { p.weights(l)[i] };
                assert_eq!(got[i], expected);
            }
            assert_eq!(pruned.bias(l), p.bias(l));
        }
    }
}

#[test]
fn fisher_orderings() {
    let p = params(&[(vec![0.5, -3.0, 2.0, 0.1], vec![1.0]), (vec![-0.2, 4.0], vec![1.0])]);
    let sq: Vec<f64> = p.values().iter().map(|v| v * v).collect();
    for frac in [0.25, 0.5, 0.75] {
        assert_eq!(fisher_prune(&p, &fim(sq.clone()), frac, &FisherScope::Whole).unwrap(), prune_global(&p, frac, false).unwrap());
    }
    // uniform metric: ties resolved by index
    let flat = fim(vec![1.0; p.len()]);
    assert_eq!(fisher_prune(&p, &flat, 0.5, &FisherScope::Whole).unwrap().values(), &[0.0, 0.0, 0.0, 0.1, 1.0, -0.2, 4.0, 1.0]);
    assert_eq!(
        fisher_prune(&p, &flat, 0.5, &FisherScope::Layer("fc2".into())).unwrap().values(),
        &[0.5, -3.0, 2.0, 0.1, 1.0, 0.0, 4.0, 1.0]
    );
    assert!(matches!(fisher_prune(&p, &fim(vec![1.0; 3]), 0.5, &FisherScope::Whole), Err(Error::Dimension(_))));
    assert!(matches!(PruneOrder::new(&p, &Scheme::FisherWhole, None), Err(Error::Config(_))));
}

#[test]
fn scheme_tags_round_trip() {
    for s in [Scheme::Parallel, Scheme::Global, Scheme::GlobalRescaled, Scheme::Layer("fc1".into()), Scheme::FisherWhole, Scheme::FisherLayer("conv2".into())] {
        assert_eq!(Scheme::parse(&s.tag()).unwrap(), s);
    }
    assert!(Scheme::parse("random").is_err());
}

#[test]
fn curve_matches_pointwise_pruning() {
    let s = modadd::split(7, 0.7, 0).unwrap();
    let arch = Architecture::modadd(7);
    let test = Dataset::from_modadd(&s.test).unwrap();
    let p = init(&arch, 1.0, 4).unwrap();
    let grid = [0.0, 0.3, 0.55, 1.0];
    let c = pruning_curve(&arch, &p, &test, &Scheme::Parallel, None, &grid).unwrap();
    for pt in &c.points {
        let m = models::evaluate(&arch, prune_parallel(&p, pt.p).unwrap().values(), &test).unwrap();
        assert_eq!((pt.accuracy, pt.loss), (m.accuracy, m.loss));
    }
    assert!(pruning_curve(&arch, &p, &test, &Scheme::Parallel, None, &[0.0, 0.5]).is_err());
}

#[test]
fn compressibility_reference_curves() {
    let grid = default_grid();
    let linear = compressibility(&curve(&grid, |p| 1.0 - p), RunId::default()).unwrap();
    assert!((linear.integrated_accuracy - 0.5).abs() < 1e-12);
    assert!((linear.compressibility - 2.0).abs() < 1e-12);

    // step at 0.5: a near-duplicate point makes the trapezoid exact
    let mut g: Vec<f64> = grid.clone();
    g.insert(26, 0.5 + 1e-9);
    let step = compressibility(&curve(&g, |p| if p <= 0.5 { 1.0 } else { 0.0 }), RunId::default()).unwrap();
    assert!((step.compressibility - 2.0).abs() < 1e-6);

    let perfect = curve(&grid, |_| 1.0);
    assert!(matches!(compressibility(&perfect, RunId::default()), Err(Error::Domain(_))));
}

#[test]
fn trapezoid_converges_to_integral() {
    let f = |p: f64| 0.5 + 0.4 * (3.0 * p).cos();
    let exact = 0.5 + 0.4 * 3.0f64.sin() / 3.0;
    let fine: Vec<f64> = (0..=2000).map(|i| i as f64 / 2000.0).collect();
    let y: Vec<f64> = fine.iter().map(|&p| f(p)).collect();
    assert!((trapezoid(&fine, &y) - exact).abs() < 1e-6);
}

#[test]
fn correlates_flag_constant_columns() {
    let runs: Vec<RunProperties> = (0..4)
        .map(|i| {
            let x = i as f64;
            RunProperties {
                compressibility: 1.0 + x,
                final_train_loss: 2.0 * x,
                final_test_loss: -x,
                ipr_embedding: 0.3,
                ipr_unembedding: x * x,
                weight_gini: x,
                fisher_gini: f64::NAN,
                t_grok: 10.0 - x,
            }
        })
        .collect();
    let rows = compressibility_correlates(&runs).unwrap();
    let get = |name: &str| rows.iter().find(|r| r.property == name).unwrap();
    assert!((get("final_train_loss").r - 1.0).abs() < 1e-12);
    assert!((get("final_test_loss").r + 1.0).abs() < 1e-12);
    assert!(get("ipr_embedding").flagged && get("fisher_gini").flagged);
    assert!(compressibility_correlates(&runs[..2]).is_err());
}

fn layered() -> impl Strategy<Value = ParamVector> {
    prop::collection::vec((prop::collection::vec(0.01f64..10.0, 1..12), any::<bool>()), 1..4).prop_map(|ls| {
        let ls: Vec<(Vec<f64>, Vec<f64>)> = ls
            .into_iter()
            .map(|(w, neg)| (w.into_iter().enumerate().map(|(i, v)| if neg && i % 2 == 0 { -v } else { v }).collect(), vec![1.0]))
            .collect();
        params(&ls)
    })
}

fn mask(p: &ParamVector) -> Vec<bool> {
    p.values().iter().map(|v| *v == 0.0).collect()
}

proptest! {
    #[test]
    fn pruning_is_idempotent(p in layered(), frac in 0.0f64..=1.0) {
        for scheme in [Scheme::Parallel, Scheme::Global, Scheme::GlobalRescaled] {
            let once = PruneOrder::new(&p, &scheme, None).unwrap().apply(&p, frac).unwrap();
            let twice = PruneOrder::new(&once, &scheme, None).unwrap().apply(&once, frac).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn pruned_count_is_floor(p in layered(), frac in 0.0f64..=1.0) {
        let pruned = prune_parallel(&p, frac).unwrap();
        for l in p.layers() {
            let zeros = pruned.weights(l).iter().filter(|v| **v == 0.0).count();
            prop_assert_eq!(zeros, (frac * l.weight.len() as f64).floor() as usize);
            prop_assert_eq!(pruned.bias(l), p.bias(l));
        }
        let total: usize = p.layers().iter().map(|l| l.weight.len()).sum();
        let g = prune_global(&p, frac, false).unwrap();
        prop_assert_eq!(g.values().iter().filter(|v| **v == 0.0).count(), prune_count(total, frac));
    }

    #[test]
    fn rescaled_mask_ignores_layer_scale(p in layered(), frac in 0.0f64..=1.0, shifts in prop::collection::vec(-4i32..4, 3)) {
        let mut scaled = p.clone();
        let layers = p.layers().to_vec();
        for (l, s) in layers.iter().zip(&shifts) {
            for i in l.weight.clone() {
                scaled.values_mut()[i] *= 2f64.powi(*s);
            }
        }
        prop_assert_eq!(mask(&prune_global(&p, frac, true).unwrap()), mask(&prune_global(&scaled, frac, true).unwrap()));
    }

    #[test]
    fn compressibility_increases_with_area(lo in 0.0f64..0.9, d in 0.001f64..0.09) {
        let grid = default_grid();
        let a = compressibility(&curve(&grid, |_| lo), RunId::default()).unwrap();
        let b = compressibility(&curve(&grid, |_| lo + d), RunId::default()).unwrap();
        prop_assert!(b.compressibility > a.compressibility);
        prop_assert!(a.compressibility >= 1.0);
    }
}
