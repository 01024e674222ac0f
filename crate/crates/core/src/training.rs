//! SGD with momentum and the three training loops.

use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::model::{exact_posterior, DepthDistribution, DropoutRng, DunModel};
use crate::nn::Mode;
use crate::numerics::{Matrix, ParamBundle};
use crate::objectives::{elbo, evaluate, mll, Evaluation, Objective, Targets};
use crate::scalar::Scalar;

/// Hyperparameters of SGD with momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus one velocity tensor per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Matrix<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lr: T::c(config.lr),
            momentum: T::c(config.momentum),
            weight_decay: T::c(config.weight_decay),
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Matrix<T>] {
        &self.velocity
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v` for every unfrozen parameter.
/// Weight decay touches only weights and biases. Nothing is modified when
/// any gradient is non-finite.
pub fn sgd_step<T: Scalar, M: ParamBundle<T> + ?Sized>(state: &mut OptimizerState<T>, params: &mut M) -> Result<()> {
    let mut bad: Option<String> = None;
    let mut shapes = Vec::new();
    params.visit_params(&mut |p| {
        shapes.push(p.value.shape());
        if bad.is_none() && !p.frozen && !p.grad.all_finite() {
            bad = Some(p.name.clone());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }
    if state.velocity.is_empty() {
        state.velocity = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    } else if state.velocity.len() != shapes.len()
        || state.velocity.iter().zip(&shapes).any(|(v, s)| v.shape() != *s)
    {
        return Err(invalid("optimizer state does not mirror the parameter shapes"));
    }
    let (lr, momentum, wd) = (state.lr, state.momentum, state.weight_decay);
    let mut velocity = state.velocity.iter_mut();
    params.visit_params_mut(&mut |p| {
        let v = velocity.next().expect("velocity per parameter");
        if p.frozen {
            return;
        }
        let decay = if p.role.decays() { wd } else { T::zero() };
        for ((vi, &g), w) in v
            .as_mut_slice()
            .iter_mut()
            .zip(p.grad.as_slice())
            .zip(p.value.as_mut_slice())
        {
            *vi = momentum * *vi + (g + decay * *w);
            *w -= lr * *vi;
        }
    });
    Ok(())
}

/// Settings shared by all training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// `None` trains full batch.
    pub batch_size: Option<usize>,
    /// Epochs during which the depth logits stay at the prior (VI only).
    pub q_freeze_epochs: usize,
    /// Seeds shuffling and dropout masks.
    pub seed: u64,
    /// Store elapsed seconds in each record row; otherwise `wall_s` is 0 so
    /// records are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            batch_size: None,
            q_freeze_epochs: 0,
            seed: 0,
            record_timing: false,
        }
    }
}

/// Training inputs and targets.
#[derive(Debug, Clone, Copy)]
pub struct Data<'a, T> {
    pub x: &'a Matrix<T>,
    pub y: &'a Targets<T>,
}

impl<'a, T: Scalar> Data<'a, T> {
    pub fn new(x: &'a Matrix<T>, y: &'a Targets<T>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(invalid(format!("{} inputs but {} targets", x.rows(), y.len())));
        }
        if x.rows() == 0 {
            return Err(invalid("empty training set"));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Full-batch state after `epoch` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mll: f64,
    pub elbo: f64,
    pub loss: f64,
    /// The run's depth distribution: `q_α` for VI and fixed-depth runs, the
    /// exact posterior for MLL runs.
    pub q: Vec<f64>,
    pub posterior: Vec<f64>,
    /// Log of `posterior`, finite where the probabilities underflow.
    pub log_posterior: Vec<f64>,
    pub wall_s: f64,
}

/// Per-epoch trace of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub rows: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    pub fn header(depths: usize) -> String {
        let mut s = String::from("epoch,mll,elbo,loss");
        for i in 0..depths {
            write!(s, ",q{i}").expect("writing to a String");
        }
        s.push_str(",wall_s");
        s
    }

    pub fn to_csv(&self) -> String {
        let depths = self.rows.first().map_or(0, |r| r.q.len());
        let mut s = Self::header(depths);
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{},{},{}", r.epoch, sig17(r.mll), sig17(r.elbo), sig17(r.loss)).expect("writing to a String");
            for q in &r.q {
                write!(s, ",{}", sig17(*q)).expect("writing to a String");
            }
            writeln!(s, ",{}", sig17(r.wall_s)).expect("writing to a String");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

/// 17 significant digits.
pub fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Vi,
    Mll,
    Vanilla,
}

/// Maximises the ELBO jointly over weights and depth logits. The logits
/// stay at the prior for the first `q_freeze_epochs` epochs.
pub fn train_dun_vi<T: Scalar>(model: &mut DunModel<T>, data: Data<'_, T>, opts: &TrainOptions) -> Result<RunRecord> {
    run(model, data, opts, Kind::Vi)
}

/// Maximises the marginal log-likelihood. The variational logits are set
/// to the final exact posterior when training ends.
pub fn train_dun_mll<T: Scalar>(model: &mut DunModel<T>, data: Data<'_, T>, opts: &TrainOptions) -> Result<RunRecord> {
    run(model, data, opts, Kind::Mll)
}

/// Maximum-likelihood training of a fixed-depth network.
pub fn train_vanilla<T: Scalar>(model: &mut DunModel<T>, data: Data<'_, T>, opts: &TrainOptions) -> Result<RunRecord> {
    if !model.is_fixed_depth() {
        return Err(invalid("train_vanilla needs a fixed-depth model"));
    }
    run(model, data, opts, Kind::Vanilla)
}

fn objective_for<T: Scalar>(model: &DunModel<T>, kind: Kind, n: usize) -> Objective<T> {
    match kind {
        Kind::Vi => Objective::Elbo { n_total: n },
        Kind::Mll => Objective::Mll { n_total: n },
        Kind::Vanilla => Objective::Weighted {
            weights: model.variational().probs().to_vec(),
            n_total: n,
        },
    }
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::LossNotFinite | Error::NonFiniteGradient(_) => {
            log::warn!("training diverged at epoch {epoch}: {e}");
            Error::Divergence { epoch }
        }
        other => other,
    }
}

fn record_row<T: Scalar>(
    model: &DunModel<T>,
    ev: &Evaluation<T>,
    kind: Kind,
    epoch: usize,
    n: usize,
    wall_s: f64,
) -> Result<EpochRecord> {
    let prior = model.prior();
    let m = mll(&ev.table, prior)?;
    let posterior = exact_posterior(&ev.table, prior)?;
    let q: DepthDistribution<T> = match kind {
        Kind::Mll => posterior.clone(),
        Kind::Vi | Kind::Vanilla => model.variational(),
    };
    let e = elbo(&ev.table, &q, prior, n)?;
    let loss = ev.loss.f64();
    if !(m.is_finite() && e.is_finite() && loss.is_finite()) {
        return Err(Error::Divergence { epoch });
    }
    Ok(EpochRecord {
        epoch,
        mll: m.f64(),
        elbo: e.f64(),
        loss,
        q: q.probs_f64(),
        posterior: posterior.probs_f64(),
        log_posterior: posterior.log_probs().iter().map(|v| v.f64()).collect(),
        wall_s,
    })
}

fn batches(n: usize, b: usize, order: &[usize]) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(b).collect();
    // a trailing single row cannot be batch-normalised; fold it into the previous batch
    if out.len() > 1 && out.last().is_some_and(|c| c.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * b;
        *out.last_mut().expect("at least one batch") = &order[start..n];
    }
    out
}

fn run<T: Scalar>(model: &mut DunModel<T>, data: Data<'_, T>, opts: &TrainOptions, kind: Kind) -> Result<RunRecord> {
    let n = data.len();
    if n == 0 || data.y.len() != n {
        return Err(invalid("training data is empty or misaligned"));
    }
    let b = opts.batch_size.unwrap_or(n);
    if b == 0 || b > n {
        return Err(invalid(format!("batch size {b} outside 1..={n}")));
    }
    let mut opt = OptimizerState::new(opts.optimizer)?;
    let objective = objective_for(model, kind, n);
    let full_batch = b == n;
    let stochastic = model.config.dropout > 0.0;
    let reuse = full_batch && !stochastic;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dropout_rng = DropoutRng::seed_from_u64(opts.seed);
    dropout_rng.set_stream(1);
    let started = Instant::now();
    let wall = |start: &Instant| {
        if opts.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let learn_q = kind == Kind::Vi && !model.variational.frozen;
    let initial_frozen = model.variational.frozen;
    let mut order: Vec<usize> = (0..n).collect();
    let mut record = RunRecord::default();

    let measure = |model: &mut DunModel<T>, epoch: usize| -> Result<Evaluation<T>> {
        evaluate(model, data.x, data.y, &objective, Mode::Train, None, false).map_err(diverged(epoch))
    };

    if !reuse || opts.epochs == 0 {
        let ev = measure(model, 0)?;
        record.rows.push(record_row(model, &ev, kind, 0, n, wall(&started))?);
    }
    for epoch in 0..opts.epochs {
        if learn_q {
            model.variational.frozen = epoch < opts.q_freeze_epochs;
        }
        if reuse {
            model.zero_grad();
            let ev = evaluate(model, data.x, data.y, &objective, Mode::Train, None, true).map_err(diverged(epoch))?;
            record.rows.push(record_row(model, &ev, kind, epoch, n, wall(&started))?);
            model.apply_running_stats(&ev.trace);
            sgd_step(&mut opt, model).map_err(diverged(epoch))?;
            continue;
        }
        if !full_batch {
            order.shuffle(&mut shuffle_rng);
        }
        for idx in batches(n, b, &order) {
            let (bx, by) = if full_batch {
                (data.x.clone(), data.y.clone())
            } else {
                (data.x.select_rows(idx), data.y.select(idx))
            };
            model.zero_grad();
            let rng = stochastic.then_some(&mut dropout_rng);
            let ev = evaluate(model, &bx, &by, &objective, Mode::Train, rng, true).map_err(diverged(epoch))?;
            model.apply_running_stats(&ev.trace);
            sgd_step(&mut opt, model).map_err(diverged(epoch))?;
        }
        let ev = measure(model, epoch + 1)?;
        record.rows.push(record_row(model, &ev, kind, epoch + 1, n, wall(&started))?);
    }
    if reuse && opts.epochs > 0 {
        let ev = measure(model, opts.epochs)?;
        record.rows.push(record_row(model, &ev, kind, opts.epochs, n, wall(&started))?);
    }
    model.variational.frozen = initial_frozen;
    model.zero_grad();
    if kind == Kind::Mll {
        let log_posterior = &record.last().expect("at least one row").log_posterior;
        let q = DepthDistribution::from_logits(log_posterior.iter().map(|&v| T::c(v)).collect())?;
        model.set_variational(&q)?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchitectureConfig;
    use crate::numerics::{Param, ParamRole};

    struct Bundle(Vec<Param<f64>>);

    impl ParamBundle<f64> for Bundle {
        fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
            self.0.iter().for_each(f)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            self.0.iter_mut().for_each(f)
        }
    }

    fn scalar(role: ParamRole, v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new(format!("{role:?}"), role, Matrix::filled(1, 1, v));
        p.grad.fill(g);
        p
    }

    fn opt(lr: f64, momentum: f64, wd: f64) -> OptimizerState<f64> {
        OptimizerState::new(OptimizerConfig {
            lr,
            momentum,
            weight_decay: wd,
        })
        .unwrap()
    }

    #[test]
    fn sgd_hand_cases() {
        let mut b = Bundle(vec![scalar(ParamRole::Weight, 0.7, 0.0)]);
        sgd_step(&mut opt(0.1, 0.9, 0.0), &mut b).unwrap();
        assert_eq!(b.0[0].value.get(0, 0), 0.7);

        let mut b = Bundle(vec![scalar(ParamRole::Weight, 1.0, 1.0)]);
        sgd_step(&mut opt(0.1, 0.0, 0.0), &mut b).unwrap();
        assert!((b.0[0].value.get(0, 0) - 0.9).abs() < 1e-15);

        let mut b = Bundle(vec![scalar(ParamRole::Weight, 0.0, 1.0)]);
        let mut s = opt(0.1, 0.9, 0.0);
        sgd_step(&mut s, &mut b).unwrap();
        assert!((b.0[0].value.get(0, 0) + 0.1).abs() < 1e-15);
        sgd_step(&mut s, &mut b).unwrap();
        assert!((s.velocity()[0].get(0, 0) - 1.9).abs() < 1e-15);
        assert!((b.0[0].value.get(0, 0) + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_excluded_roles() {
        let roles = [
            ParamRole::Weight,
            ParamRole::Bias,
            ParamRole::NormScale,
            ParamRole::NormShift,
            ParamRole::DepthLogits,
            ParamRole::NoiseLogStd,
        ];
        let mut with = Bundle(roles.iter().map(|&r| scalar(r, 2.0, 0.5)).collect());
        sgd_step(&mut opt(0.1, 0.0, 0.3), &mut with).unwrap();
        for p in &with.0 {
            let expected = if p.role.decays() { 2.0 - 0.1 * (0.5 + 0.3 * 2.0) } else { 2.0 - 0.1 * 0.5 };
            assert!((p.value.get(0, 0) - expected).abs() < 1e-15, "{:?}", p.role);
        }
    }

    #[test]
    fn frozen_and_non_finite() {
        let mut frozen = scalar(ParamRole::Weight, 1.0, 1.0);
        frozen.frozen = true;
        let mut b = Bundle(vec![frozen, scalar(ParamRole::Bias, 1.0, 1.0)]);
        sgd_step(&mut opt(0.5, 0.0, 0.0), &mut b).unwrap();
        assert_eq!(b.0[0].value.get(0, 0), 1.0);
        assert_eq!(b.0[1].value.get(0, 0), 0.5);

        let mut p = scalar(ParamRole::Weight, 1.0, 0.0);
        p.name = "hidden3.weight".into();
        p.grad.fill(f64::NAN);
        let mut b = Bundle(vec![scalar(ParamRole::Bias, 1.0, 1.0), p]);
        let err = sgd_step(&mut opt(0.5, 0.0, 0.0), &mut b).unwrap_err();
        assert!(err.to_string().contains("hidden3.weight"));
        assert_eq!(b.0[0].value.get(0, 0), 1.0);
    }

    #[test]
    fn optimizer_config_is_validated() {
        assert!(OptimizerState::<f64>::new(OptimizerConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(OptimizerState::<f64>::new(OptimizerConfig { momentum: 1.0, ..Default::default() }).is_err());
        assert!(OptimizerState::<f64>::new(OptimizerConfig { weight_decay: -1.0, ..Default::default() }).is_err());
    }

    fn line_data(n: usize) -> (Matrix<f64>, Targets<f64>) {
        let x = Matrix::from_fn(n, 1, |r, _| -1.0 + 2.0 * r as f64 / (n - 1) as f64);
        let y = Matrix::from_fn(n, 1, |r, _| 0.5 - 1.5 * x.get(r, 0));
        (x, Targets::Regression(y))
    }

    #[test]
    fn zero_epochs_leave_the_model_alone() {
        let (x, y) = line_data(10);
        let mut m = DunModel::<f64>::fixed_depth(ArchitectureConfig::regression(1, 4, 1), 3).unwrap();
        let before = m.clone();
        let rec = train_vanilla(&mut m, Data::new(&x, &y).unwrap(), &TrainOptions { epochs: 0, ..Default::default() })
            .unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(m.flat_values(), before.flat_values());
    }

    #[test]
    fn vanilla_rejects_learnt_depth() {
        let (x, y) = line_data(10);
        let mut m = DunModel::<f64>::new(ArchitectureConfig::regression(1, 4, 1), 3).unwrap();
        assert!(train_vanilla(&mut m, Data::new(&x, &y).unwrap(), &TrainOptions::default()).is_err());
    }

    #[test]
    fn record_csv_layout() {
        let (x, y) = line_data(12);
        let mut m = DunModel::<f64>::new(ArchitectureConfig::regression(1, 4, 2), 1).unwrap();
        let opts = TrainOptions {
            epochs: 3,
            ..Default::default()
        };
        let rec = train_dun_vi(&mut m, Data::new(&x, &y).unwrap(), &opts).unwrap();
        assert_eq!(rec.rows.len(), 4);
        let csv = rec.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,mll,elbo,loss,q0,q1,q2,wall_s");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 8);
        assert_eq!(first[0], "0");
        assert_eq!(first[7], sig17(0.0));
        let digits = first[1].split('e').next().unwrap().replace(['-', '.'], "");
        assert_eq!(digits.len(), 17);
    }

    #[test]
    fn minibatches_cover_every_row_once() {
        let order: Vec<usize> = (0..11).collect();
        let bs = batches(11, 5, &order);
        assert_eq!(bs.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![5, 6]);
        let order: Vec<usize> = (0..12).collect();
        let bs = batches(12, 5, &order);
        assert_eq!(bs.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![5, 5, 2]);
    }
}
