mod common;

use common::*;
use mvne::eval::*;
use mvne::Tensor;
use proptest::prelude::*;

#[test]
fn logistic_regression_matches_convex_solver() {
    if let Err(e) = check_probe_against_solver() {
        panic!("{e}");
    }
}

#[test]
fn kmeans_reaches_exhaustive_optimum() {
    for k in [2, 3] {
        let (got, oracle) = twelve_point_inertia(k);
        assert!((got - oracle).abs() < 1e-9, "k={k}: {got} vs {oracle}");
    }
}

#[test]
fn kmeans_recovers_separated_clouds() {
    let mut r = rng(40);
    let a = random_tensor(vec![15, 3], &mut r);
    let b = random_tensor(vec![15, 3], &mut r).map(|v| v + 20.0);
    let t = Tensor::new(vec![30, 3], [a.data(), b.data()].concat()).unwrap();
    let res = kmeans(&t, 2, 1, DEFAULT_RESTARTS).unwrap();
    let truth: Vec<usize> = (0..30).map(|i| usize::from(i >= 15)).collect();
    assert_eq!(nmi(&res.assignment, &truth).unwrap(), 1.0);
    assert_eq!(kmeans(&t, 2, 1, DEFAULT_RESTARTS).unwrap(), res);
}

#[test]
fn nmi_of_independent_labelings_is_zero() {
    assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
}

#[test]
fn f1_on_all_zero_predictions() {
    let (macro_f1, micro_f1) = f1_scores(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
    assert!((micro_f1 - 0.5).abs() < 1e-15);
    assert!((macro_f1 - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn label_aligned_embeddings_score_perfectly() {
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let cfg = EvalConfig { runs: 5, base_seed: 3, ..EvalConfig::default() };
    let report = evaluate(&one_hot(&labels, 4), &labels, 4, &cfg).unwrap();
    for m in Metric::ALL {
        assert_eq!(report.mean(m), Some(1.0), "{m}");
    }
}

#[test]
fn runs_stream_seeds() {
    let mut r = rng(41);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let z = random_tensor(vec![30, 4], &mut r);
    let z = Tensor::new(
        vec![30, 4],
        z.data().iter().enumerate().map(|(e, v)| v + labels[e / 4] as f64 * 0.7).collect(),
    )
    .unwrap();
    let cfg = EvalConfig { runs: 1, base_seed: 9, ..EvalConfig::default() };
    let one = evaluate(&z, &labels, 3, &cfg).unwrap();
    let direct = evaluate_run(&z, &labels, 3, &cfg, 9).unwrap();
    for (m, v) in direct {
        assert_eq!(one.get(m).unwrap().values, vec![v]);
        assert_eq!(one.mean(m), Some(v));
    }

    let four = evaluate(&z, &labels, 3, &EvalConfig { runs: 4, ..cfg }).unwrap();
    let eight = evaluate(&z, &labels, 3, &EvalConfig { runs: 8, ..cfg }).unwrap();
    for m in Metric::ALL {
        assert_eq!(eight.get(m).unwrap().values[..4], four.get(m).unwrap().values[..]);
    }
    assert_eq!(eight.to_records().lines().count(), 8 * 3 + 3);
}

#[test]
fn nmi_only_mode_skips_the_probe() {
    let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let cfg = EvalConfig { runs: 2, nmi_only: true, ..EvalConfig::default() };
    let report = evaluate(&one_hot(&labels, 2), &labels, 2, &cfg).unwrap();
    assert_eq!(report.series.len(), 1);
    assert_eq!(report.mean(Metric::Nmi), Some(1.0));
}

proptest! {
    #[test]
    fn nmi_is_symmetric_and_bounded(
        a in prop::collection::vec(0usize..4, 1..40),
        seed in any::<u64>(),
    ) {
        let b: Vec<usize> = random_tensor(vec![a.len()], &mut rng(seed))
            .data()
            .iter()
            .map(|v| ((v + 1.0) * 2.5) as usize)
            .collect();
        let ab = nmi(&a, &b).unwrap();
        let ba = nmi(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&ab));
        let renamed: Vec<usize> = a.iter().map(|&x| 3 - x).collect();
        prop_assert!((nmi(&a, &renamed).unwrap() - 1.0).abs() < 1e-9 || a.iter().all(|&x| x == a[0]));
    }

    #[test]
    fn micro_f1_equals_accuracy(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60),
    ) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let accuracy = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64;
        let (macro_f1, micro_f1) = f1_scores(&pred, &truth, 5).unwrap();
        prop_assert!((micro_f1 - accuracy).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&macro_f1));
    }

    #[test]
    fn lloyd_inertia_never_increases(n in 3usize..40, k in 1usize..4, seed in any::<u64>()) {
        let t = random_tensor(vec![n, 2], &mut rng(seed));
        let r = kmeans(&t, k.min(n), seed, 3).unwrap();
        for w in r.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", r.trace);
        }
        prop_assert!((r.trace.last().unwrap() - r.inertia).abs() < 1e-12);
    }

    #[test]
    fn splits_partition_and_stratify(classes in 2usize..5, per in 2usize..10, ratio in 0.1f64..0.9, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..classes * per).map(|i| i % classes).collect();
        let (train, test) = split_nodes(labels.len(), Some(&labels), ratio, seed).unwrap();
        let mut all = [train.clone(), test.clone()].concat();
        all.sort();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..classes {
            let k = train.iter().filter(|&&i| labels[i] == c).count();
            prop_assert_eq!(k, ((ratio * per as f64).round() as usize).clamp(1, per - 1));
        }
    }
}
