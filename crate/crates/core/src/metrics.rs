//! Predictive distributions and the evaluation suite.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::numerics::Matrix;
use crate::objectives::{loglik_categorical, loglik_gaussian, Targets};
use crate::scalar::Scalar;

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_BINS: usize = 10;

/// Moment-matched Gaussian approximation of a depth mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveGaussian<T> {
    pub mean: T,
    pub variance: T,
    pub model_term: T,
    pub noise_term: T,
}

impl<T: Scalar> PredictiveGaussian<T> {
    pub fn std(&self) -> T {
        self.variance.sqrt()
    }

    pub fn loglik(&self, y: T) -> Result<T> {
        loglik_gaussian(self.mean, y, self.std())
    }

    pub fn cdf(&self, y: T) -> T {
        let z = (y - self.mean).f64() / (self.std().f64() * std::f64::consts::SQRT_2);
        T::c(0.5 * (1.0 + libm::erf(z)))
    }

    /// Same distribution on a rescaled axis `y ↦ shift + scale·y`.
    pub fn rescale(&self, shift: T, scale: T) -> Self {
        let s2 = scale * scale;
        Self {
            mean: shift + scale * self.mean,
            variance: s2 * self.variance,
            model_term: s2 * self.model_term,
            noise_term: s2 * self.noise_term,
        }
    }
}

/// Mixture mean, model variance and total variance.
pub fn moment_match<T: Scalar>(weights: &[T], means: &[T], noise_var: T) -> Result<PredictiveGaussian<T>> {
    if weights.len() != means.len() || weights.is_empty() {
        return Err(invalid(format!(
            "{} weights for {} means",
            weights.len(),
            means.len()
        )));
    }
    if !(noise_var > T::zero()) {
        return Err(invalid(format!("noise variance must be positive, got {noise_var}")));
    }
    let mut mean = T::zero();
    let mut second = T::zero();
    for (&w, &m) in weights.iter().zip(means) {
        if w == T::zero() {
            continue;
        }
        mean += w * m;
        second += w * m * m;
    }
    let model_term = (second - mean * mean).max(T::zero());
    Ok(PredictiveGaussian {
        mean,
        variance: model_term + noise_var,
        model_term,
        noise_term: noise_var,
    })
}

/// Output of any predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<T> {
    /// `[N × K]` class probabilities.
    Classification { probs: Matrix<T> },
    /// One Gaussian per target entry, row-major `[rows × cols]`.
    Regression {
        gaussians: Vec<PredictiveGaussian<T>>,
        rows: usize,
        cols: usize,
    },
}

impl<T: Scalar> Prediction<T> {
    pub fn len(&self) -> usize {
        match self {
            Prediction::Classification { probs } => probs.rows(),
            Prediction::Regression { rows, .. } => *rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps regression predictions back to the original target scale
    /// (per-column `mean + std·y`). Classification is unchanged.
    pub fn denormalize(&self, mean: &[T], std: &[T]) -> Result<Self> {
        match self {
            Prediction::Classification { .. } => Ok(self.clone()),
            Prediction::Regression { gaussians, rows, cols } => {
                if mean.len() != *cols || std.len() != *cols {
                    return Err(invalid("normalization statistics do not match output width"));
                }
                let gaussians = gaussians
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g.rescale(mean[i % cols], std[i % cols]))
                    .collect();
                Ok(Prediction::Regression {
                    gaussians,
                    rows: *rows,
                    cols: *cols,
                })
            }
        }
    }

    /// Per-row predictive entropy (classification only).
    pub fn entropies(&self) -> Result<Vec<T>> {
        match self {
            Prediction::Classification { probs } => {
                Ok((0..probs.rows()).map(|r| predictive_entropy(probs.row(r))).collect())
            }
            Prediction::Regression { .. } => Err(invalid("entropy is defined for classification outputs")),
        }
    }
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy<T: Scalar>(probs: &[T]) -> T {
    let h: T = probs
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| -p * p.ln())
        .sum();
    h.max(T::zero())
}

/// Tail calibration error at level `tau`.
pub fn tce(cdf_values: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 0.5) {
        return Err(invalid(format!("tau must lie in (0, 0.5), got {tau}")));
    }
    if cdf_values.is_empty() {
        return Err(invalid("tce of an empty set"));
    }
    let n = cdf_values.len() as f64;
    let lower = cdf_values.iter().filter(|&&v| v < tau).count() as f64;
    let upper = cdf_values.iter().filter(|&&v| v >= 1.0 - tau).count() as f64;
    let total = lower + upper;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok([lower, upper]
        .iter()
        .map(|&b| b / total * (tau - b / n).abs())
        .sum())
}

fn bin_index(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Regression calibration error over `bins` equal-width bins.
pub fn rce(cdf_values: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(invalid(format!("need at least 2 bins, got {bins}")));
    }
    if cdf_values.is_empty() {
        return Err(invalid("rce of an empty set"));
    }
    let mut counts = vec![0usize; bins];
    for &v in cdf_values {
        counts[bin_index(v, bins)] += 1;
    }
    let n = cdf_values.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| {
            let f = c as f64 / n;
            f * (1.0 / bins as f64 - f).abs()
        })
        .sum())
}

fn check_labels<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(invalid(format!("{} labels for {} predictions", labels.len(), probs.rows())));
    }
    if probs.rows() == 0 {
        return Err(invalid("metric over an empty set"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(invalid(format!("label {l} out of range for {} classes", probs.cols())));
    }
    Ok(())
}

/// Brier score including the `1/K` factor.
pub fn brier<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let k = probs.cols() as f64;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| {
            probs
                .row(n)
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    let d = p.f64() - if c == y { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
                / k
        })
        .sum();
    Ok(total / labels.len() as f64)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes (ties go to the lowest index).
pub fn predicted_classes<T: Scalar>(probs: &Matrix<T>) -> Vec<usize> {
    (0..probs.rows()).map(|r| argmax(probs.row(r))).collect()
}

/// Expected calibration error over `bins` confidence bins.
pub fn ece<T: Scalar>(probs: &Matrix<T>, labels: &[usize], bins: usize) -> Result<f64> {
    check_labels(probs, labels)?;
    if bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    for (n, &y) in labels.iter().enumerate() {
        let row = probs.row(n);
        let k = argmax(row);
        let c = row[k].f64();
        let b = bin_index(c, bins);
        count[b] += 1;
        conf[b] += c;
        if k == y {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            m / n * (correct[b] as f64 / m - conf[b] / m).abs()
        })
        .sum())
}

/// Classification error rate.
pub fn error_rate<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let wrong = predicted_classes(probs)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Accuracy after rejecting the `⌈rN⌉` highest-entropy points, for each
/// `r` in `grid`. Equal entropies are rejected in index order.
pub fn rejection_curve(entropies: &[f64], correct: &[bool], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if entropies.len() != correct.len() {
        return Err(invalid("entropies and correctness flags differ in length"));
    }
    let n = entropies.len();
    let mut order: Vec<usize> = (0..n).collect();
    // highest entropy first; sort_by is stable so lower indices go first on ties
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]));
    grid.iter()
        .map(|&r| {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid(format!("rejection fraction {r} outside [0, 1]")));
            }
            let drop = ((r * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
            let kept = &order[drop..];
            let acc = if kept.is_empty() {
                1.0
            } else {
                kept.iter().filter(|&&i| correct[i]).count() as f64 / kept.len() as f64
            };
            Ok((r, acc))
        })
        .collect()
}

/// One row of the evaluation report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationReport {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub ll: Option<f64>,
    pub rmse: Option<f64>,
    pub tce: Option<f64>,
    pub rce: Option<f64>,
    pub brier: Option<f64>,
    pub ece: Option<f64>,
    pub err: Option<f64>,
    pub batch_time_s: Option<f64>,
    pub bins: usize,
    pub tau: f64,
}

pub const REPORT_HEADER: &str = "method,dataset,seed,ll,rmse,tce,rce,brier,ece,err,batch_time_s";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl CalibrationReport {
    /// Scores a prediction against targets on the same scale.
    pub fn from_prediction<T: Scalar>(prediction: &Prediction<T>, targets: &Targets<T>) -> Result<Self> {
        let mut report = CalibrationReport {
            bins: DEFAULT_BINS,
            tau: DEFAULT_TAU,
            ..Default::default()
        };
        match (prediction, targets) {
            (Prediction::Regression { gaussians, rows, cols }, Targets::Regression(y)) => {
                if y.shape() != (*rows, *cols) {
                    return Err(invalid(format!(
                        "targets {:?} do not match predictions ({rows}, {cols})",
                        y.shape()
                    )));
                }
                if gaussians.is_empty() {
                    return Err(invalid("metric over an empty set"));
                }
                let m = gaussians.len() as f64;
                let mut ll = 0.0;
                let mut sq = 0.0;
                let mut cdfs = Vec::with_capacity(gaussians.len());
                for (g, &t) in gaussians.iter().zip(y.as_slice()) {
                    ll += g.loglik(t)?.f64();
                    let d = (t - g.mean).f64();
                    sq += d * d;
                    cdfs.push(g.cdf(t).f64());
                }
                report.ll = Some(ll / *rows as f64);
                report.rmse = Some((sq / m).sqrt());
                report.tce = Some(tce(&cdfs, report.tau)?);
                report.rce = Some(rce(&cdfs, report.bins)?);
            }
            (Prediction::Classification { probs }, Targets::Classification(labels)) => {
                check_labels(probs, labels)?;
                let ll: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(n, &l)| loglik_categorical(probs.row(n), l).map(Scalar::f64))
                    .sum::<Result<f64>>()?;
                report.ll = Some(ll / labels.len() as f64);
                report.brier = Some(brier(probs, labels)?);
                report.ece = Some(ece(probs, labels, report.bins)?);
                report.err = Some(error_rate(probs, labels)?);
            }
            _ => return Err(invalid("prediction and targets are for different tasks")),
        }
        Ok(report)
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.dataset,
            self.seed,
            cell(self.ll),
            cell(self.rmse),
            cell(self.tce),
            cell(self.rce),
            cell(self.brier),
            cell(self.ece),
            cell(self.err),
            cell(self.batch_time_s)
        )
        .expect("writing to a String");
        s
    }
}
