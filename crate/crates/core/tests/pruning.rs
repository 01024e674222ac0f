use dun::datasets::{generate_toy, normalize, split, SplitSpec};
use dun::metrics::Prediction;
use dun::model::{DepthDistribution, DunModel};
use dun::nn::ArchitectureConfig;
use dun::pruning::{predict_truncated, select_depth, truncate_posterior, PruneStrategy};
use dun::training::{train_dun_vi, Data, OptimizerConfig, TrainOptions};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, 1..12)
}

proptest! {
    #[test]
    fn argmax_survives_monotone_logit_transforms(z in logits(), a in 0.1f64..5.0, b in -10.0f64..10.0) {
        let q = DepthDistribution::from_logits(z.clone()).unwrap();
        let affine = DepthDistribution::from_logits(z.iter().map(|v| a * v + b).collect()).unwrap();
        let cubic = DepthDistribution::from_logits(z.iter().map(|v| v * v * v / 10.0 + v).collect()).unwrap();
        let d = select_depth(&q, PruneStrategy::Argmax).unwrap();
        prop_assert_eq!(select_depth(&affine, PruneStrategy::Argmax).unwrap(), d);
        prop_assert_eq!(select_depth(&cubic, PruneStrategy::Argmax).unwrap(), d);
    }

    #[test]
    fn percentile_choice_satisfies_its_definition(z in logits(), threshold in 0.05f64..=1.0) {
        let q = DepthDistribution::from_logits(z).unwrap();
        let p = q.probs();
        let max = p.iter().cloned().fold(0.0, f64::max);
        let d = select_depth(&q, PruneStrategy::Percentile { threshold }).unwrap();
        prop_assert!(p[d] >= threshold * max);
        prop_assert!(p[..d].iter().all(|&v| v < threshold * max));
    }

    #[test]
    fn expected_depth_is_rounded_mean(z in logits()) {
        let q = DepthDistribution::from_logits(z).unwrap();
        let mean: f64 = q.probs().iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        let d = select_depth(&q, PruneStrategy::Expected).unwrap();
        prop_assert!((d as f64 - mean).abs() <= 0.5 + 1e-12);
    }

    #[test]
    fn truncation_keeps_prefix_and_mass_and_is_idempotent(z in logits(), pick in 0usize..12) {
        let q = DepthDistribution::from_logits(z).unwrap();
        let d = pick % q.len();
        let t = truncate_posterior(&q, d).unwrap();
        prop_assert!((t.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (a, b) in t.probs()[..d].iter().zip(&q.probs()[..d]) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
        prop_assert!(t.probs()[d + 1..].iter().all(|&v| v == 0.0));
        let twice = truncate_posterior(&t, d).unwrap();
        for (a, b) in twice.probs().iter().zip(t.probs()) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }
}

#[test]
fn truncated_prediction_tracks_the_full_marginal_on_trained_models() {
    let ds = normalize(&split(&generate_toy("spirals", 160, 2).unwrap(), SplitSpec::standard(2)).unwrap()).unwrap();
    let (x, y) = (ds.train_x(), ds.train_y());
    let test = ds.test_x();
    let mut checked = 0;
    for seed in 0..3 {
        let mut model = DunModel::<f64>::new(ArchitectureConfig::classification(2, 16, 6, 2), seed).unwrap();
        let opts = TrainOptions {
            optimizer: OptimizerConfig {
                lr: 1e-2,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            epochs: 300,
            ..Default::default()
        };
        train_dun_vi(&mut model, Data::new(&x, &y).unwrap(), &opts).unwrap();
        let q = model.variational();
        let full = model.predict_marginal(&test, &q).unwrap();
        for d in 0..=model.max_depth() {
            if q.probs()[..=d].iter().sum::<f64>() < 0.99 {
                continue;
            }
            model.reset_block_evaluations();
            let cut = predict_truncated(&model, &test, &q, d).unwrap();
            assert_eq!(model.block_evaluations(), d + 1);
            let (Prediction::Classification { probs: a }, Prediction::Classification { probs: b }) = (&cut, &full) else {
                panic!("classification expected");
            };
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((u - v).abs() <= 0.02, "seed {seed}, depth {d}: {u} vs {v}");
            }
            checked += 1;
        }
    }
    assert!(checked >= 3);
}

#[test]
fn pruning_a_delta_posterior_changes_nothing() {
    let model = DunModel::<f64>::new(ArchitectureConfig::classification(2, 6, 4, 3), 1).unwrap();
    let x = dun::numerics::Matrix::from_fn(7, 2, |r, c| (r as f64 - 3.0) * (c as f64 + 0.5));
    let q = DepthDistribution::delta(5, 2);
    let d = select_depth(&q, PruneStrategy::Argmax).unwrap();
    assert_eq!(d, 2);
    assert_eq!(predict_truncated(&model, &x, &q, d).unwrap(), model.predict_marginal(&x, &q).unwrap());
}
