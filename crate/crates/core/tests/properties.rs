//! Property-based invariants of the public API.

use difflab::bounds::{chi2_divergence, Convention, DiscreteDensityPair};
use difflab::datagen::{label_for_class, make_fold_plan, Dataset, NoiseKind};
use difflab::difficulty::{closed_form_error, epistemic_uncertainty};
use difflab::models::{Dims, LossKind, LossSpec, ModelKind, ModelParams};
use difflab::optimizer::{bound_and_normalize, make_weights, DifficultyInputs, SchemeKind, WeightScheme};
use difflab::propcheck::corrupted_risk;
use difflab::seed::derive_seed;
use ndarray::Array2;
use proptest::prelude::*;

fn probabilities(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, m).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn dataset(n: usize, d: usize, classes: usize) -> impl Strategy<Value = Dataset> {
    (prop::collection::vec(-3.0f64..3.0, n * d), prop::collection::vec(0..classes, n)).prop_map(move |(x, mut cls)| {
        // Keep the first and last class present so the class count is recoverable.
        cls[0] = 0;
        cls[n - 1] = classes - 1;
        let labels = cls.iter().map(|&k| label_for_class(k, classes)).collect();
        Dataset::new(Array2::from_shape_vec((n, d), x).unwrap(), labels, vec![false; n], cls, classes).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn weights_are_bounded_with_unit_mean(
        raw in prop::collection::vec(0.0f64..50.0, 2..40),
        lower in 0.05f64..0.9,
        upper in 1.1f64..20.0,
    ) {
        prop_assume!(raw.iter().any(|&r| r > 0.0));
        let w = bound_and_normalize(&raw, lower, upper).unwrap();
        prop_assert!((w.mean() - 1.0).abs() < 1e-9);
        for &v in w.as_slice() {
            prop_assert!(v >= lower - 1e-9 && v <= upper + 1e-9);
        }
    }

    #[test]
    fn error_schemes_order_weights_by_error(errors in prop::collection::vec(0.0f64..5.0, 2..30)) {
        let inputs = DifficultyInputs { errors: Some(&errors), ..Default::default() };
        let hard = make_weights(&WeightScheme::new(SchemeKind::ErrorHardFirst), errors.len(), &inputs).unwrap();
        let easy = make_weights(&WeightScheme::new(SchemeKind::ErrorEasyFirst), errors.len(), &inputs).unwrap();
        for i in 0..errors.len() {
            for j in 0..errors.len() {
                if errors[i] > errors[j] {
                    prop_assert!(hard.as_slice()[i] >= hard.as_slice()[j] - 1e-12);
                    prop_assert!(easy.as_slice()[i] <= easy.as_slice()[j] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn derived_seeds_are_stable_and_path_sensitive(master in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(master, &[a, b]), derive_seed(master, &[a, b]));
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(master, &[a]), derive_seed(master, &[b]));
        prop_assert_ne!(derive_seed(master, &[a, b]), derive_seed(master, &[b, a]));
    }

    #[test]
    fn chi2_is_nonnegative_and_zero_on_equal_densities(p in probabilities(6), q in probabilities(6)) {
        for conv in [Convention::SourceWeighted, Convention::Standard] {
            let pair = DiscreteDensityPair::from_densities(p.clone(), q.clone()).unwrap();
            prop_assert!(chi2_divergence(&pair, conv).unwrap() >= -1e-12);
            let same = DiscreteDensityPair::from_densities(p.clone(), p.clone()).unwrap();
            prop_assert!(chi2_divergence(&same, conv).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_error_is_monotone(mu in -3.0f64..3.0, s in 0.0f64..3.0, dmu in 0.0f64..2.0, ds in 0.0f64..2.0) {
        let base = closed_form_error(mu, s).unwrap();
        prop_assert!(closed_form_error(mu + dmu, s).unwrap() <= base);
        prop_assert!(closed_form_error(mu, s + ds).unwrap() >= base);
    }

    #[test]
    fn fold_plan_partitions_indices(n in 2usize..200, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 2 + ((n - 2) as f64 * k_frac) as usize;
        let plan = make_fold_plan(n, k, seed).unwrap();
        let mut seen = vec![0; n];
        for f in 0..k {
            let test = plan.test_indices(f);
            prop_assert_eq!(test.len() + plan.train_indices(f).len(), n);
            for i in test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn dataset_csv_round_trips(ds in dataset(7, 3, 3)) {
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.labels, ds.labels);
        prop_assert_eq!(back.class_of, ds.class_of);
        prop_assert_eq!(back.features, ds.features);
    }

    #[test]
    fn corrupted_risk_identity_holds(
        ds in dataset(5, 2, 2),
        seed in any::<u64>(),
        rate in 0.0f64..1.0,
        kind in prop_oneof![Just(NoiseKind::FlipLabel), Just(NoiseKind::UniformLabel)],
        loss in prop_oneof![Just(LossKind::Logistic), Just(LossKind::Exponential), Just(LossKind::Squared)],
    ) {
        let model = ModelParams::init_normal(ModelKind::Linear, Dims { d: 2, h: 1, c: 1 }, seed, 1.0).unwrap();
        let r = corrupted_risk(&model, &ds, &LossSpec::new(loss), kind, rate).unwrap();
        prop_assert!((r.enumerated - r.closed_form).abs() <= 1e-10 * (1.0 + r.enumerated.abs()));
    }

    #[test]
    fn epistemic_uncertainty_is_at_least_tau(
        preds in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 2..8),
        tau_inv in 0.0f64..2.0,
    ) {
        for u in epistemic_uncertainty(&preds, tau_inv).unwrap() {
            prop_assert!(u >= tau_inv - 1e-9);
        }
    }

    #[test]
    fn scaled_parameters_stay_homogeneous(seed in any::<u64>(), c in 0.1f64..4.0, x in prop::collection::vec(-2.0f64..2.0, 3)) {
        for (kind, alpha) in [(ModelKind::Linear, 1), (ModelKind::Mlp2, 2)] {
            let p = ModelParams::init_normal(kind, Dims { d: 3, h: 4, c: 2 }, seed, 1.0).unwrap();
            let f = p.forward(&x).unwrap();
            let g = p.scaled(c).forward(&x).unwrap();
            for (a, b) in g.iter().zip(&f) {
                prop_assert!((a - c.powi(alpha) * b).abs() <= 1e-9 * (1.0 + b.abs() * c.powi(alpha)));
            }
        }
    }
}
