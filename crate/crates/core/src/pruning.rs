//! Depth selection and truncated-posterior prediction.

use crate::error::{invalid, Result};
use crate::metrics::Prediction;
use crate::model::{combine_depths, DepthDistribution, DunModel, Heads};
use crate::nn::Mode;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Rule for picking a single depth from a depth distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneStrategy {
    /// Most probable depth, lowest index on ties.
    Argmax,
    /// Smallest depth whose probability is at least `threshold` times the
    /// maximum.
    Percentile { threshold: f64 },
    /// Expected depth rounded half up.
    Expected,
}

impl PruneStrategy {
    pub const PERCENTILE95: PruneStrategy = PruneStrategy::Percentile { threshold: 0.95 };

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "argmax" => Some(PruneStrategy::Argmax),
            "percentile95" => Some(Self::PERCENTILE95),
            "expected" => Some(PruneStrategy::Expected),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            PruneStrategy::Argmax => "argmax".into(),
            PruneStrategy::Percentile { threshold } if *threshold == 0.95 => "percentile95".into(),
            PruneStrategy::Percentile { threshold } => format!("percentile{threshold}"),
            PruneStrategy::Expected => "expected".into(),
        }
    }

    pub fn all() -> [PruneStrategy; 3] {
        [PruneStrategy::Argmax, Self::PERCENTILE95, PruneStrategy::Expected]
    }
}

/// Applies `strategy` to `q`.
pub fn select_depth<T: Scalar>(q: &DepthDistribution<T>, strategy: PruneStrategy) -> Result<usize> {
    let p = q.probs();
    let max = p.iter().copied().fold(T::neg_infinity(), T::max);
    match strategy {
        PruneStrategy::Argmax => Ok(p.iter().position(|&v| v == max).expect("non-empty distribution")),
        PruneStrategy::Percentile { threshold } => {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(invalid(format!("threshold must lie in (0, 1], got {threshold}")));
            }
            let cut = T::c(threshold) * max;
            Ok(p.iter().position(|&v| v >= cut).expect("the maximum passes"))
        }
        PruneStrategy::Expected => {
            let mean: f64 = p.iter().enumerate().map(|(i, &v)| i as f64 * v.f64()).sum();
            Ok(((mean + 0.5).floor() as usize).min(q.max_depth()))
        }
    }
}

/// Folds all mass above `d_opt` onto `d_opt`.
pub fn truncate_posterior<T: Scalar>(q: &DepthDistribution<T>, d_opt: usize) -> Result<DepthDistribution<T>> {
    if d_opt > q.max_depth() {
        return Err(invalid(format!("depth {d_opt} out of range 0..={}", q.max_depth())));
    }
    let p = q.probs();
    let mut out = p.to_vec();
    out[d_opt] = p[d_opt..].iter().copied().sum();
    out[d_opt + 1..].iter_mut().for_each(|v| *v = T::zero());
    DepthDistribution::from_probs(out)
}

/// Marginal prediction over depths `0..=d_opt` with the truncated
/// distribution. Blocks past `d_opt` are never evaluated.
pub fn predict_truncated<T: Scalar>(
    model: &DunModel<T>,
    x: &Matrix<T>,
    q: &DepthDistribution<T>,
    d_opt: usize,
) -> Result<Prediction<T>> {
    if q.len() != model.max_depth() + 1 {
        return Err(invalid("depth weights length mismatch"));
    }
    let truncated = truncate_posterior(q, d_opt)?;
    let trace = model.forward_trace(x, Mode::Eval, d_opt, Heads::All, None)?;
    let outputs = model.outputs_from_trace(&trace);
    combine_depths(&outputs, &truncated.probs()[..=d_opt], model.task(), model.noise_std())
}
