//! Per-depth likelihoods, the marginal log-likelihood, the categorical KL,
//! the ELBO and the EM reference procedure, plus [`evaluate`], which turns
//! any of the training objectives into a loss and its exact gradient.

use crate::error::{invalid, Error, Result};
use crate::model::{exact_posterior, DepthDistribution, DropoutRng, DunModel, ForwardTrace, Heads};
use crate::nn::{Mode, Task};
use crate::numerics::{logsumexp, softmax, Matrix, ParamBundle, ParamRole};
use crate::scalar::Scalar;

/// `ln(1e-12)`: floor for categorical log-probabilities.
pub const LOG_PROB_FLOOR: f64 = -27.631021115928547;

/// Training targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    /// `[N × out]` real targets.
    Regression(Matrix<T>),
    /// Class indices.
    Classification(Vec<usize>),
}

impl<T: Scalar> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(m) => m.rows(),
            Targets::Classification(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            Targets::Regression(m) => Targets::Regression(m.select_rows(indices)),
            Targets::Classification(l) => {
                Targets::Classification(indices.iter().map(|&i| l[i]).collect())
            }
        }
    }
}

/// `log p(y_n | x_n, d = i; θ)` for every depth `i` (rows) and datum `n`
/// (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikTable<T> {
    values: Matrix<T>,
}

impl<T: Scalar> LogLikTable<T> {
    pub fn new(values: Matrix<T>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(invalid("log-likelihood table needs >= 1 depth and >= 1 datum"));
        }
        if !values.all_finite() {
            return Err(invalid("log-likelihood table has non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let depths = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid("ragged log-likelihood rows"));
        }
        Self::new(Matrix::from_vec(depths, n, rows.concat())?)
    }

    pub fn depths(&self) -> usize {
        self.values.rows()
    }

    pub fn data_len(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, depth: usize, n: usize) -> T {
        self.values.get(depth, n)
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    /// `Σ_n loglik[i][n]` for each depth.
    pub fn totals(&self) -> Vec<T> {
        (0..self.depths())
            .map(|i| self.values.row(i).iter().copied().sum())
            .collect()
    }
}

/// `log N(y; μ, σ²)`.
pub fn loglik_gaussian<T: Scalar>(mu: T, y: T, sigma: T) -> Result<T> {
    if !(sigma > T::zero()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let d = y - mu;
    Ok(-T::c(0.5) * (T::c(std::f64::consts::TAU) * sigma * sigma).ln() - d * d / (T::c(2.0) * sigma * sigma))
}

/// `ln probs[label]`, floored at `ln(1e-12)`.
pub fn loglik_categorical<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    let p = *probs
        .get(label)
        .ok_or_else(|| invalid(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(p.ln().max(T::c(LOG_PROB_FLOOR)))
}

/// Marginal log-likelihood `log Σ_i prior_i Π_n p(y_n | x_n, d=i)`.
pub fn mll<T: Scalar>(table: &LogLikTable<T>, prior: &DepthDistribution<T>) -> Result<T> {
    scaled_mll(table, prior, T::one())
}

/// The minibatch analogue: per-depth totals are scaled by `N/B` before the
/// log-sum-exp.
pub fn scaled_mll<T: Scalar>(table: &LogLikTable<T>, prior: &DepthDistribution<T>, scale: T) -> Result<T> {
    check_depths(table, prior)?;
    let terms: Vec<T> = prior
        .log_probs()
        .iter()
        .zip(table.totals())
        .map(|(&lp, t)| lp + scale * t)
        .collect();
    logsumexp(&terms)
}

fn check_depths<T: Scalar>(table: &LogLikTable<T>, d: &DepthDistribution<T>) -> Result<()> {
    if table.depths() != d.len() {
        return Err(invalid(format!(
            "table has {} depths, distribution has {}",
            table.depths(),
            d.len()
        )));
    }
    Ok(())
}

/// `KL(q ‖ p)` with `0·ln(0/p) = 0`.
pub fn kl_categorical<T: Scalar>(q: &DepthDistribution<T>, p: &DepthDistribution<T>) -> Result<T> {
    if q.len() != p.len() {
        return Err(invalid("KL between distributions of different lengths"));
    }
    let mut kl = T::zero();
    for i in 0..q.len() {
        let qi = q.probs()[i];
        if qi == T::zero() {
            continue;
        }
        if p.log_probs()[i] == T::neg_infinity() {
            return Err(Error::InfiniteKl(i));
        }
        kl += qi * (q.log_probs()[i] - p.log_probs()[i]);
    }
    Ok(kl.max(T::zero()))
}

/// Minibatch ELBO `(N/B) Σ_n Σ_i q_i loglik[i][n] − KL(q ‖ prior)`.
pub fn elbo<T: Scalar>(
    table: &LogLikTable<T>,
    q: &DepthDistribution<T>,
    prior: &DepthDistribution<T>,
    n_total: usize,
) -> Result<T> {
    check_depths(table, q)?;
    let b = table.data_len();
    if n_total < b {
        return Err(invalid(format!("batch of {b} exceeds dataset size {n_total}")));
    }
    let scale = T::c(n_total as f64 / b as f64);
    let expected: T = q
        .probs()
        .iter()
        .zip(table.totals())
        .filter(|(&qi, _)| qi > T::zero())
        .map(|(&qi, t)| qi * t)
        .sum();
    Ok(scale * expected - kl_categorical(q, prior)?)
}

/// E step: the exact depth posterior (same formula as
/// [`exact_posterior`]).
pub fn em_e_step<T: Scalar>(
    table: &LogLikTable<T>,
    prior: &DepthDistribution<T>,
) -> Result<DepthDistribution<T>> {
    exact_posterior(table, prior)
}

/// The quantity a training step minimises.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective<T> {
    /// Minibatch ELBO with the model's variational `q`.
    Elbo { n_total: usize },
    /// Minibatch marginal log-likelihood.
    Mll { n_total: usize },
    /// `(N/B) Σ_i w_i Σ_n loglik[i][n]` with fixed depth weights: the M step,
    /// and maximum likelihood for fixed-depth networks.
    Weighted { weights: Vec<T>, n_total: usize },
}

impl<T> Objective<T> {
    fn n_total(&self) -> usize {
        match self {
            Objective::Elbo { n_total } | Objective::Mll { n_total } => *n_total,
            Objective::Weighted { n_total, .. } => *n_total,
        }
    }
}

/// Result of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub table: LogLikTable<T>,
    /// Objective on the dataset scale (ELBO, MLL or weighted likelihood).
    pub objective: T,
    /// `-objective / N`: what the optimizer minimises.
    pub loss: T,
    pub trace: ForwardTrace<T>,
}

/// Per-datum log-likelihood at one depth plus its derivative with respect
/// to the raw output and to `ln σ`.
struct DepthLik<T> {
    loglik: Vec<T>,
    d_raw: Matrix<T>,
    d_log_sigma: Vec<T>,
}

fn depth_likelihood<T: Scalar>(raw: &Matrix<T>, y: &Targets<T>, task: Task, sigma: T) -> Result<DepthLik<T>> {
    let n = raw.rows();
    if y.len() != n {
        return Err(invalid(format!("{} targets for {n} inputs", y.len())));
    }
    let mut loglik = vec![T::zero(); n];
    let mut d_raw = Matrix::zeros(n, raw.cols());
    let mut d_log_sigma = vec![T::zero(); n];
    match (task, y) {
        (Task::Regression, Targets::Regression(targets)) => {
            if targets.cols() != raw.cols() {
                return Err(Error::ShapeMismatch {
                    op: "regression targets",
                    left: raw.shape(),
                    right: targets.shape(),
                });
            }
            let var = sigma * sigma;
            for r in 0..n {
                for c in 0..raw.cols() {
                    let mu = raw.get(r, c);
                    let t = targets.get(r, c);
                    loglik[r] += loglik_gaussian(mu, t, sigma)?;
                    let resid = t - mu;
                    d_raw.set(r, c, resid / var);
                    d_log_sigma[r] += resid * resid / var - T::one();
                }
            }
        }
        (Task::Classification, Targets::Classification(labels)) => {
            let floor = T::c(LOG_PROB_FLOOR);
            for r in 0..n {
                let logits = raw.row(r);
                let label = labels[r];
                if label >= logits.len() {
                    return Err(invalid(format!("label {label} out of range for {} classes", logits.len())));
                }
                let ll = logits[label] - logsumexp(logits)?;
                if ll < floor {
                    loglik[r] = floor;
                    continue;
                }
                loglik[r] = ll;
                let p = softmax(logits);
                for (c, &pc) in p.iter().enumerate() {
                    let onehot = if c == label { T::one() } else { T::zero() };
                    d_raw.set(r, c, onehot - pc);
                }
            }
        }
        _ => return Err(invalid("targets do not match the model task")),
    }
    Ok(DepthLik {
        loglik,
        d_raw,
        d_log_sigma,
    })
}

/// Forward pass, log-likelihood table, objective value and (optionally)
/// gradients accumulated into the model's parameters.
///
/// The model's parameter gradients are *accumulated*; zero them first.
pub fn evaluate<T: Scalar>(
    model: &mut DunModel<T>,
    x: &Matrix<T>,
    y: &Targets<T>,
    objective: &Objective<T>,
    mode: Mode,
    dropout: Option<&mut DropoutRng>,
    backward: bool,
) -> Result<Evaluation<T>> {
    let depths = model.max_depth() + 1;
    let trace = model.forward_trace(x, mode, model.max_depth(), Heads::All, dropout)?;
    let sigma = model.noise_std();
    let task = model.task();
    let b = x.rows();
    let n_total = objective.n_total();
    if b == 0 || n_total < b {
        return Err(invalid(format!("batch of {b} rows with dataset size {n_total}")));
    }
    let mut liks = Vec::with_capacity(depths);
    for i in 0..depths {
        let raw = trace.raw_output(i).expect("all heads emitted");
        liks.push(depth_likelihood(raw, y, task, sigma)?);
    }
    let table = LogLikTable::new(Matrix::from_vec(
        depths,
        b,
        liks.iter().flat_map(|l| l.loglik.iter().copied()).collect(),
    )?)
    .map_err(|_| Error::LossNotFinite)?;

    let n = T::c(n_total as f64);
    let scale = T::c(n_total as f64 / b as f64);
    let prior = model.prior().clone();
    let totals = table.totals();
    // depth weights w_i such that d(objective)/d(loglik[i][n]) = w_i·N/B
    let (value, weights, q) = match objective {
        Objective::Elbo { .. } => {
            let q = model.variational();
            let value = elbo(&table, &q, &prior, n_total)?;
            (value, q.probs().to_vec(), Some(q))
        }
        Objective::Mll { .. } => {
            let value = scaled_mll(&table, &prior, scale)?;
            let terms: Vec<T> = prior
                .log_probs()
                .iter()
                .zip(&totals)
                .map(|(&lp, &t)| lp + scale * t)
                .collect();
            (value, softmax(&terms), None)
        }
        Objective::Weighted { weights, .. } => {
            if weights.len() != depths {
                return Err(invalid("objective weights length mismatch"));
            }
            let value = weights
                .iter()
                .zip(&totals)
                .filter(|(&w, _)| w != T::zero())
                .map(|(&w, &t)| w * (scale * t))
                .sum();
            (value, weights.clone(), None)
        }
    };
    let loss = -value / n;
    if !loss.is_finite() {
        return Err(Error::LossNotFinite);
    }

    if backward {
        let mut d_raw: Vec<Option<Matrix<T>>> = vec![None; depths];
        let mut d_log_sigma = T::zero();
        for (i, lik) in liks.iter().enumerate() {
            let w = weights[i];
            if w == T::zero() {
                continue;
            }
            // dLoss/dloglik[i][n]
            let g = -w * scale / n;
            let mut d = lik.d_raw.clone();
            d.scale(g);
            d_raw[i] = Some(d);
            d_log_sigma += g * lik.d_log_sigma.iter().copied().sum::<T>();
        }
        model.backward(&trace, &d_raw)?;
        if let Some(p) = &mut model.noise_log_std {
            p.grad.as_mut_slice()[0] += d_log_sigma;
        }
        if let Some(q) = q {
            // d ELBO / d q_i up to a constant that cancels through the softmax
            let g: Vec<T> = (0..depths)
                .map(|i| {
                    if q.probs()[i] == T::zero() {
                        T::zero()
                    } else {
                        scale * totals[i] - (q.log_probs()[i] - prior.log_probs()[i])
                    }
                })
                .collect();
            let mean: T = q.probs().iter().zip(&g).map(|(&p, &gi)| p * gi).sum();
            let grad = model.variational.grad.as_mut_slice();
            for i in 0..depths {
                grad[i] += -(q.probs()[i] * (g[i] - mean)) / n;
            }
        }
    }

    Ok(Evaluation {
        table,
        objective: value,
        loss,
        trace,
    })
}

/// Per-depth log-likelihood table on the given data (no gradients).
pub fn loglik_table<T: Scalar>(model: &DunModel<T>, x: &Matrix<T>, y: &Targets<T>, mode: Mode) -> Result<LogLikTable<T>> {
    let trace = model.forward_trace(x, mode, model.max_depth(), Heads::All, None)?;
    let sigma = model.noise_std();
    let mut rows = Vec::with_capacity(model.max_depth() + 1);
    for i in 0..=model.max_depth() {
        let raw = trace.raw_output(i).expect("all heads emitted");
        rows.push(depth_likelihood(raw, y, model.task(), sigma)?.loglik);
    }
    LogLikTable::from_rows(rows)
}

/// M step: `steps` gradient-ascent updates of `Σ_i posterior_i Σ_n loglik`
/// (scaled by `1/N`) with the posterior held fixed. A step that would
/// lower the objective is retried with a halved step size, so the
/// objective never decreases.
pub fn em_m_step<T: Scalar>(
    model: &mut DunModel<T>,
    x: &Matrix<T>,
    y: &Targets<T>,
    posterior: &DepthDistribution<T>,
    steps: usize,
    lr: T,
) -> Result<()> {
    let objective = Objective::Weighted {
        weights: posterior.probs().to_vec(),
        n_total: x.rows(),
    };
    for step in 0..steps {
        model.zero_grad();
        let current = evaluate(model, x, y, &objective, Mode::Train, None, true)
            .map_err(|_| Error::Divergence { epoch: step })?;
        let snapshot = model.clone();
        let mut rate = lr;
        let mut accepted = false;
        for _ in 0..40 {
            model.visit_params_mut(&mut |p| {
                if p.frozen || p.role == ParamRole::DepthLogits {
                    return;
                }
                let grad = p.grad.clone();
                p.value.axpy(-rate, &grad).expect("grad mirrors value");
            });
            match evaluate(model, x, y, &objective, Mode::Train, None, false) {
                Ok(next) if next.loss <= current.loss => {
                    model.apply_running_stats(&next.trace);
                    accepted = true;
                    break;
                }
                _ => {
                    *model = snapshot.clone();
                    rate = rate * T::c(0.5);
                }
            }
        }
        if !accepted {
            // no descent direction at this scale; the model stays put
            *model = snapshot;
        }
        if !current.loss.is_finite() {
            return Err(Error::Divergence { epoch: step });
        }
    }
    model.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_loglik_values() {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((loglik_gaussian(1.0, 1.0, 1.0).unwrap() + half_ln_2pi).abs() < 1e-12);
        assert!((loglik_gaussian(0.0, 1.0, 1.0).unwrap() + half_ln_2pi + 0.5).abs() < 1e-12);
        assert!(loglik_gaussian(0.0, 1.0, 0.0).is_err());
        assert!(loglik_gaussian(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_loglik_matches_density_formula() {
        let pairs: [(f64, f64, f64); 3] = [(0.3, -1.2, 0.7), (5.0, 4.1, 2.0), (-2.0, -1.7, 0.5)];
        for (mu, y, s) in pairs {
            let density = (-(y - mu) * (y - mu) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            assert!((loglik_gaussian(mu, y, s).unwrap() - density.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn categorical_loglik_values() {
        let u = [0.25; 4];
        assert!((loglik_categorical(&u, 3).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        assert_eq!(loglik_categorical(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(loglik_categorical(&[0.0, 1.0], 0).unwrap(), LOG_PROB_FLOOR);
        assert!(loglik_categorical(&u, 4).is_err());
        assert!((LOG_PROB_FLOOR - 1e-12f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn mll_simple_cases() {
        let t = LogLikTable::from_rows(vec![vec![-1.0, -2.0, -0.5]]).unwrap();
        assert_eq!(mll(&t, &DepthDistribution::uniform(1)).unwrap(), -3.5);
        let t = LogLikTable::<f64>::from_rows(vec![vec![-1.0, -2.0], vec![-2.5, -0.5], vec![-3.0, 0.0]]).unwrap();
        assert!((mll(&t, &DepthDistribution::uniform(3)).unwrap() + 3.0).abs() < 1e-12);
        // zero-prior depths contribute nothing
        let t = LogLikTable::from_rows(vec![vec![-1.0], vec![50.0]]).unwrap();
        assert_eq!(mll(&t, &DepthDistribution::delta(2, 0)).unwrap(), -1.0);
    }

    #[test]
    fn kl_cases() {
        let p = DepthDistribution::<f64>::from_probs(vec![0.2, 0.5, 0.3]).unwrap();
        assert!(kl_categorical(&p, &p).unwrap().abs() < 1e-15);
        let delta = DepthDistribution::<f64>::delta(3, 1);
        let u = DepthDistribution::uniform(3);
        assert!((kl_categorical(&delta, &u).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(kl_categorical(&u, &delta), Err(Error::InfiniteKl(0))));
    }

    #[test]
    fn elbo_at_prior_has_no_kl() {
        let t = LogLikTable::from_rows(vec![vec![-1.0, -3.0], vec![-2.0, -2.0]]).unwrap();
        let prior = DepthDistribution::<f64>::from_probs(vec![0.25, 0.75]).unwrap();
        let e = elbo(&t, &prior, &prior, 10).unwrap();
        let expected = 5.0 * (0.25 * -4.0 + 0.75 * -4.0);
        assert!((e - expected).abs() < 1e-12);
        assert!(elbo(&t, &prior, &prior, 1).is_err());
    }

    #[test]
    fn elbo_is_tight_at_the_exact_posterior() {
        let t = LogLikTable::from_rows(vec![vec![-1.0, -3.0, -0.2], vec![-2.0, -0.1, -0.4], vec![-0.7, -0.9, -1.1]])
            .unwrap();
        let prior = DepthDistribution::<f64>::from_probs(vec![0.2, 0.3, 0.5]).unwrap();
        let post = em_e_step(&t, &prior).unwrap();
        let e = elbo(&t, &post, &prior, 3).unwrap();
        let m = mll(&t, &prior).unwrap();
        assert!((e - m).abs() < 1e-9);
    }
}
