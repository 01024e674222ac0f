//! Deep ensembles, depth ensembles and MC dropout.

use rand::SeedableRng;

use crate::error::{invalid, Result};
use crate::metrics::{moment_match, Prediction, PredictiveGaussian};
use crate::model::{DropoutRng, DunModel, Heads};
use crate::nn::{ArchitectureConfig, Mode, Task};
use crate::numerics::Matrix;
use crate::scalar::Scalar;
use crate::training::{train_vanilla, Data, RunRecord, TrainOptions};

/// Which members an ensemble holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    /// `M` networks of the same depth with different seeds.
    Standard,
    /// One network per depth `d_min..d_min+M`.
    Depth,
}

impl EnsembleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleKind::Standard => "standard",
            EnsembleKind::Depth => "depth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(EnsembleKind::Standard),
            "depth" => Some(EnsembleKind::Depth),
            _ => None,
        }
    }
}

/// Independently trained fixed-depth networks.
#[derive(Debug, Clone)]
pub struct EnsembleModel<T> {
    pub kind: EnsembleKind,
    pub members: Vec<DunModel<T>>,
    pub seeds: Vec<u64>,
}

impl<T: Scalar> EnsembleModel<T> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Member configurations and seeds for an ensemble of `m` networks.
pub fn member_plan(
    kind: EnsembleKind,
    m: usize,
    base: &ArchitectureConfig,
    seed: u64,
    d_min: usize,
) -> Result<Vec<(ArchitectureConfig, u64)>> {
    if m == 0 {
        return Err(invalid("an ensemble needs at least one member"));
    }
    match kind {
        EnsembleKind::Standard => Ok((0..m).map(|i| (base.clone(), seed + i as u64)).collect()),
        EnsembleKind::Depth => {
            let available = base.max_depth + 1;
            if d_min + m > available {
                return Err(invalid(format!(
                    "depth ensemble of {m} members from depth {d_min} needs depths up to {}, only 0..={} available",
                    d_min + m - 1,
                    base.max_depth
                )));
            }
            Ok((0..m)
                .map(|i| (base.with_depth(d_min + i), seed + i as u64))
                .collect())
        }
    }
}

/// Trains every member with [`train_vanilla`]. Member `i` uses seed
/// `seed + i` for both initialisation and shuffling.
pub fn train_ensemble<T: Scalar>(
    kind: EnsembleKind,
    m: usize,
    base: &ArchitectureConfig,
    data: Data<'_, T>,
    opts: &TrainOptions,
    seed: u64,
    d_min: usize,
) -> Result<(EnsembleModel<T>, Vec<RunRecord>)> {
    let plan = member_plan(kind, m, base, seed, d_min)?;
    let mut members = Vec::with_capacity(m);
    let mut records = Vec::with_capacity(m);
    let mut seeds = Vec::with_capacity(m);
    for (config, s) in plan {
        let (member, record) = train_member(config, s, data, opts)?;
        members.push(member);
        records.push(record);
        seeds.push(s);
    }
    Ok((EnsembleModel { kind, members, seeds }, records))
}

/// Trains a single fixed-depth member.
pub fn train_member<T: Scalar>(
    config: ArchitectureConfig,
    seed: u64,
    data: Data<'_, T>,
    opts: &TrainOptions,
) -> Result<(DunModel<T>, RunRecord)> {
    let mut model = DunModel::fixed_depth(config, seed)?;
    let member_opts = TrainOptions { seed, ..opts.clone() };
    let record = train_vanilla(&mut model, data, &member_opts)?;
    Ok((model, record))
}

/// Output of the deepest block only (eval mode, no dropout).
pub fn point_output<T: Scalar>(model: &DunModel<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let d = model.max_depth();
    let trace = model.forward_trace(x, Mode::Eval, d, Heads::Only(d), None)?;
    Ok(model.outputs_from_trace(&trace).depths.remove(0))
}

/// Uniform mixture over member predictions.
pub fn ensemble_predict<T: Scalar>(ens: &EnsembleModel<T>, x: &Matrix<T>) -> Result<Prediction<T>> {
    let first = ens
        .members
        .first()
        .ok_or_else(|| invalid("an ensemble needs at least one member"))?;
    let outputs = ens
        .members
        .iter()
        .map(|m| point_output(m, x))
        .collect::<Result<Vec<_>>>()?;
    let m = T::c(ens.len() as f64);
    let weights = vec![T::one() / m; ens.len()];
    match first.task() {
        Task::Classification => {
            let mut probs = Matrix::zeros(outputs[0].rows(), outputs[0].cols());
            for out in &outputs {
                probs.add_assign(out)?;
            }
            probs.scale(T::one() / m);
            Ok(Prediction::Classification { probs })
        }
        Task::Regression => {
            // a uniform mixture of N(μ_m, σ_m²) has the moments of one with
            // the average noise variance
            let noise_var = ens
                .members
                .iter()
                .map(|mm| mm.noise_std() * mm.noise_std())
                .sum::<T>()
                / m;
            let (rows, cols) = outputs[0].shape();
            let mut means = vec![T::zero(); outputs.len()];
            let mut gaussians = Vec::with_capacity(rows * cols);
            for idx in 0..rows * cols {
                for (mu, out) in means.iter_mut().zip(&outputs) {
                    *mu = out.as_slice()[idx];
                }
                gaussians.push(moment_match(&weights, &means, noise_var)?);
            }
            Ok(Prediction::Regression { gaussians, rows, cols })
        }
    }
}

/// `samples` stochastic forward passes with fresh dropout masks,
/// averaged (classification) or moment-matched (regression).
pub fn dropout_predict_mc<T: Scalar>(
    model: &DunModel<T>,
    x: &Matrix<T>,
    samples: usize,
    seed: u64,
) -> Result<Prediction<T>> {
    if samples == 0 {
        return Err(invalid("MC dropout needs at least one sample"));
    }
    let d = model.max_depth();
    let mut rng = DropoutRng::seed_from_u64(seed);
    let mut sum: Option<Matrix<T>> = None;
    let mut sum_sq: Option<Matrix<T>> = None;
    for _ in 0..samples {
        let trace = model.forward_trace(x, Mode::Eval, d, Heads::Only(d), Some(&mut rng))?;
        let out = model.outputs_from_trace(&trace).depths.remove(0);
        if model.task() == Task::Regression {
            let sq = out.map(|v| v * v);
            match &mut sum_sq {
                Some(acc) => acc.add_assign(&sq)?,
                None => sum_sq = Some(sq),
            }
        }
        match &mut sum {
            Some(acc) => acc.add_assign(&out)?,
            None => sum = Some(out),
        }
    }
    let inv = T::one() / T::c(samples as f64);
    let mut mean = sum.expect("at least one sample");
    mean.scale(inv);
    match model.task() {
        Task::Classification => Ok(Prediction::Classification { probs: mean }),
        Task::Regression => {
            let mut second = sum_sq.expect("regression second moment");
            second.scale(inv);
            let noise_var = model.noise_std() * model.noise_std();
            let gaussians = mean
                .as_slice()
                .iter()
                .zip(second.as_slice())
                .map(|(&mu, &s)| {
                    let model_term = (s - mu * mu).max(T::zero());
                    PredictiveGaussian {
                        mean: mu,
                        variance: model_term + noise_var,
                        model_term,
                        noise_term: noise_var,
                    }
                })
                .collect();
            Ok(Prediction::Regression {
                gaussians,
                rows: mean.rows(),
                cols: mean.cols(),
            })
        }
    }
}
