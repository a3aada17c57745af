use proptest::prelude::*;

use sdrelab::gauss::{make_split, true_llr, GaussianSpec, Split};
use sdrelab::harness::format_float;
use sdrelab::nets::{b2bsqrt, nsp_pool};
use sdrelab::optim::BalancedSampler;
use sdrelab::sprt::{sprt_run, ThresholdMatrix};
use sdrelab::tandem::{log_softmax, tandem_llr, tandem_llr_at, PosteriorTrajectoryPair, WindowPlan};

fn pair_strategy() -> impl Strategy<Value = PosteriorTrajectoryPair> {
    (2usize..5, 2usize..12, 0usize..4, any::<bool>())
        .prop_flat_map(|(k, horizon, order, prefix)| {
            let order = order.min(horizon - 1);
            let mut plan = WindowPlan::new(horizon, order).unwrap();
            if prefix {
                plan = plan.with_prefix();
            }
            let rows = |n: usize| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, k), n);
            (
                Just(plan.clone()),
                rows(plan.prefix.len()),
                rows(plan.full.len()),
                rows(plan.short.len()),
                prop::collection::vec(-2.0f64..2.0, k),
            )
        })
        .prop_map(|(plan, prefix, full, short, prior)| {
            let lsm = |rows: Vec<Vec<f64>>| rows.iter().map(|r| log_softmax(r)).collect();
            PosteriorTrajectoryPair::from_log_probabilities(&plan, lsm(prefix), lsm(full), lsm(short), log_softmax(&prior))
                .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn llr_matrix_is_antisymmetric(pair in pair_strategy()) {
        let llr = tandem_llr(&pair).unwrap();
        for t in llr.times() {
            for k in 0..llr.classes() {
                prop_assert_eq!(llr.get(t, k, k), 0.0);
                for l in 0..llr.classes() {
                    prop_assert!((llr.get(t, k, l) + llr.get(t, l, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn incremental_matches_recomputation(pair in pair_strategy()) {
        let llr = tandem_llr(&pair).unwrap();
        for t in llr.times() {
            let scores = tandem_llr_at(&pair, t);
            for k in 0..llr.classes() {
                for l in 0..llr.classes() {
                    let direct = scores[k] - scores[l];
                    prop_assert!((llr.get(t, k, l) - direct).abs() < 1e-9 * (1.0 + direct.abs()));
                }
            }
        }
    }

    #[test]
    fn b2bsqrt_is_odd_and_increasing(x in -1e6f64..1e6, dx in 1e-6f64..10.0, alpha in 0.01f64..10.0) {
        let f = |v| b2bsqrt(v, alpha).unwrap();
        prop_assert_eq!(f(-x), -f(x));
        prop_assert!(f(x + dx) > f(x));
    }

    #[test]
    fn nsp_is_sum_over_order_plus_one(
        tokens in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..6),
        extra in 0usize..5,
    ) {
        let order = tokens.len() - 1 + extra;
        let pooled = nsp_pool(&tokens, order).unwrap();
        for (j, &p) in pooled.iter().enumerate() {
            let sum: f64 = tokens.iter().map(|t| t[j]).sum();
            prop_assert!((p - sum / (order + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn higher_threshold_never_stops_earlier(seed in 0u64..1000, a in 0.0f64..10.0, da in 0.0f64..10.0) {
        let spec = GaussianSpec { dim: 2, offset: 0.5, horizon: 30, per_class: 1, seed, ..GaussianSpec::default() };
        for seq in make_split(&spec, Split::Test).unwrap() {
            let llr = true_llr(&seq, &spec).unwrap();
            let low = sprt_run(&llr, &ThresholdMatrix::scalar(2, a).unwrap()).unwrap();
            let high = sprt_run(&llr, &ThresholdMatrix::scalar(2, a + da).unwrap()).unwrap();
            prop_assert!(high.stopping_time >= low.stopping_time);
        }
    }

    #[test]
    fn sampler_batches_are_balanced(
        labels in prop::collection::vec(0usize..3, 3..60),
        size in 1usize..40,
        seed in any::<u64>(),
    ) {
        prop_assume!((0..3).all(|c| labels.contains(&c)));
        let mut sampler = BalancedSampler::new(&labels, 3, seed).unwrap();
        let mut totals = [0usize; 3];
        for _ in 0..6 {
            let batch = sampler.next_batch(size);
            prop_assert_eq!(batch.len(), size);
            let mut counts = [0usize; 3];
            for &i in &batch {
                counts[labels[i]] += 1;
                totals[labels[i]] += 1;
            }
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        prop_assert!(totals.iter().max().unwrap() - totals.iter().min().unwrap() <= 1);
    }

    #[test]
    fn float_format_keeps_nine_digits(x in prop::num::f64::NORMAL) {
        let back: f64 = format_float(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 1e-8 * x.abs());
    }
}
