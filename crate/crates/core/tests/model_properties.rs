use dun::metrics::Prediction;
use dun::model::{exact_posterior, DepthDistribution, DunModel};
use dun::nn::{ArchitectureConfig, Mode};
use dun::numerics::{Matrix, ParamBundle};
use dun::objectives::{loglik_table, LogLikTable};
use dun_testkit::{normal_matrix, random_instance};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_depth_slice_equals_its_subnetwork(seed in any::<u64>()) {
        let inst = random_instance(seed, 5, 16, 32);
        let all = inst.model.forward_all_depths(&inst.x, Mode::Eval).unwrap();
        for d in 0..=inst.model.max_depth() {
            let sub = inst.model.subnetwork_forward(&inst.x, d).unwrap();
            prop_assert_eq!(all.depth(d).as_slice(), sub.as_slice());
        }
    }

    #[test]
    fn marginal_class_outputs_are_distributions(seed in any::<u64>()) {
        let inst = random_instance(seed, 4, 8, 16);
        if let Prediction::Classification { probs } = inst.model.predict_marginal(&inst.x, &inst.q).unwrap() {
            for r in 0..probs.rows() {
                let row = probs.row(r);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn eval_forward_is_pure_and_repeatable(seed in any::<u64>()) {
        let inst = random_instance(seed, 3, 8, 16);
        let before = inst.model.flat_values();
        let a = inst.model.forward_all_depths(&inst.x, Mode::Eval).unwrap();
        let b = inst.model.forward_all_depths(&inst.x, Mode::Eval).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(inst.model.flat_values(), before);
    }

    #[test]
    fn posterior_is_shift_invariant_on_network_tables(seed in any::<u64>(), shift in -100.0f64..100.0) {
        let inst = random_instance(seed, 4, 8, 16);
        let table = loglik_table(&inst.model, &inst.x, &inst.y, Mode::Eval).unwrap();
        let shifted = LogLikTable::new(table.values().map(|v| v + shift / table.data_len() as f64)).unwrap();
        let a = exact_posterior(&table, inst.model.prior()).unwrap();
        let b = exact_posterior(&shifted, inst.model.prior()).unwrap();
        for (p, q) in a.probs().iter().zip(b.probs()) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }
}

#[test]
fn zero_weight_residual_stack_is_identity_at_every_depth() {
    let config = ArchitectureConfig {
        batchnorm: false,
        ..ArchitectureConfig::classification(3, 6, 7, 4)
    };
    let mut model = DunModel::<f64>::new(config, 11).unwrap();
    let d = model.max_depth();
    for block in &mut model.blocks[1..=d] {
        block.weight.value.fill(0.0);
    }
    let x = normal_matrix(9, 3, &mut ChaCha8Rng::seed_from_u64(2));
    let out = model.forward_all_depths(&x, Mode::Train).unwrap();
    for i in 1..=d {
        assert_eq!(out.depth(i), out.depth(0));
    }
    let uniform = DepthDistribution::uniform(d + 1);
    let Prediction::Classification { probs } = model.predict_marginal(&x, &uniform).unwrap() else {
        panic!("classification model");
    };
    for (a, b) in probs.as_slice().iter().zip(out.depth(0).as_slice()) {
        assert!((a - b).abs() <= 1e-15);
    }
}

#[test]
fn same_seed_gives_identical_models() {
    let config = ArchitectureConfig::regression(2, 5, 3);
    let a = DunModel::<f64>::new(config.clone(), 99).unwrap();
    let b = DunModel::<f64>::new(config, 99).unwrap();
    assert_eq!(a.flat_values(), b.flat_values());
}

#[test]
fn subnetwork_rejects_depth_past_the_last_block() {
    let model = DunModel::<f64>::new(ArchitectureConfig::regression(1, 3, 2), 0).unwrap();
    let x = Matrix::zeros(4, 1);
    assert!(model.subnetwork_forward(&x, 3).is_err());
    assert!(model.forward_all_depths(&Matrix::zeros(4, 2), Mode::Eval).is_err());
}
