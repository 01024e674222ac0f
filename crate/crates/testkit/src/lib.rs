//! Shared fixtures for the workspace test suites: random network
//! instances and a double-double scalar for high-precision finite
//! differences.

pub mod dd;
pub mod oracles;

use dun::model::{DepthDistribution, DunModel};
use dun::nn::{ArchitectureConfig, Task};
use dun::numerics::Matrix;
use dun::objectives::Targets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Instance {
    pub model: DunModel<f64>,
    pub x: Matrix<f64>,
    pub y: Targets<f64>,
    pub q: DepthDistribution<f64>,
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random network, data and depth distribution within the given bounds.
pub fn random_instance(seed: u64, max_depth: usize, max_width: usize, max_n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(0..=max_depth);
    let w = rng.random_range(1..=max_width);
    let n = rng.random_range(2..=max_n);
    let input_dim = rng.random_range(1..=3);
    let task = if rng.random_bool(0.5) { Task::Regression } else { Task::Classification };
    let mut config = match task {
        Task::Regression => ArchitectureConfig::regression(input_dim, w, d),
        Task::Classification => ArchitectureConfig::classification(input_dim, w, d, rng.random_range(2..=4)),
    };
    config.residual = rng.random_bool(0.7);
    config.batchnorm = rng.random_bool(0.5);
    let prior_logits: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let prior = DepthDistribution::from_logits(prior_logits).unwrap();
    let mut model = DunModel::with_prior(config.clone(), rng.random(), prior).unwrap();
    for block in &mut model.blocks {
        block.bias.value.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        if let Some(bn) = &mut block.norm {
            bn.scale.value.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            bn.shift.value.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            bn.running_mean.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.5));
            bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    if let Some(p) = &mut model.noise_log_std {
        p.value.fill(rng.random_range(-0.5..0.5));
    }
    let q_logits: Vec<f64> = (0..=d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let q = DepthDistribution::from_logits(q_logits).unwrap();
    model.set_variational(&q).unwrap();
    let x = normal_matrix(n, input_dim, &mut rng);
    let y = match task {
        Task::Regression => Targets::Regression(normal_matrix(n, 1, &mut rng)),
        Task::Classification => {
            Targets::Classification((0..n).map(|_| rng.random_range(0..config.output_dim)).collect())
        }
    };
    Instance { model, x, y, q }
}

/// Small network away from degenerate regimes: at least two inputs, mild
/// offsets, a damped output block so that no depth dominates the
/// posterior, and enough rows that ReLU columns are rarely all active.
pub fn gradient_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=2);
    let w = rng.random_range(2..=8);
    let n = rng.random_range(8..=12);
    let input_dim = rng.random_range(2..=3);
    let task = if rng.random_bool(0.5) { Task::Regression } else { Task::Classification };
    let mut config = match task {
        Task::Regression => ArchitectureConfig::regression(input_dim, w, d),
        Task::Classification => ArchitectureConfig::classification(input_dim, w, d, rng.random_range(2..=4)),
    };
    config.residual = rng.random_bool(0.7);
    config.batchnorm = rng.random_bool(0.5);
    let prior_logits: Vec<f64> = (0..=d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let prior = DepthDistribution::from_logits(prior_logits).unwrap();
    let mut model = DunModel::with_prior(config.clone(), rng.random(), prior).unwrap();
    for block in &mut model.blocks {
        block.bias.value.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        if let Some(bn) = &mut block.norm {
            bn.scale.value.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(0.8..1.2));
            bn.shift.value.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            bn.running_mean.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.2));
            bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.8..1.2));
        }
    }
    model.blocks.last_mut().unwrap().weight.value.scale(0.1);
    if let Some(p) = &mut model.noise_log_std {
        p.value.fill(rng.random_range(-0.3..0.3));
    }
    let q_logits: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = DepthDistribution::from_logits(q_logits).unwrap();
    model.set_variational(&q).unwrap();
    let x = normal_matrix(n, input_dim, &mut rng);
    let y = match task {
        Task::Regression => Targets::Regression(normal_matrix(n, 1, &mut rng)),
        Task::Classification => {
            Targets::Classification((0..n).map(|_| rng.random_range(0..config.output_dim)).collect())
        }
    };
    Instance { model, x, y, q }
}
