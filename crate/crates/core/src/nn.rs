//! Network blocks: linear input block, residual hidden blocks
//! (`x + BN(ReLU(xW + b))`), linear output block, batch normalization,
//! inverted dropout and He initialization, each with a hand-written
//! backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, Param, ParamRole};
use crate::scalar::Scalar;

/// Added to the batch variance before taking the inverse square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regression" => Some(Task::Regression),
            "classification" => Some(Task::Classification),
            _ => None,
        }
    }
}

/// Batch-norm statistics source: the current batch (`Train`) or the running
/// averages (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    /// Identity.
    Eval,
    /// Fresh mask at evaluation time (MC dropout).
    EvalSampling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Number of intermediate blocks `D`; the network has depths `0..=D`.
    pub max_depth: usize,
    pub output_dim: usize,
    pub residual: bool,
    pub batchnorm: bool,
    pub task: Task,
    /// Dropout rate after every hidden ReLU. Zero for DUNs.
    pub dropout: f64,
}

impl ArchitectureConfig {
    pub fn regression(input_dim: usize, hidden_width: usize, max_depth: usize) -> Self {
        Self {
            input_dim,
            hidden_width,
            max_depth,
            output_dim: 1,
            residual: true,
            batchnorm: true,
            task: Task::Regression,
            dropout: 0.0,
        }
    }

    pub fn classification(
        input_dim: usize,
        hidden_width: usize,
        max_depth: usize,
        classes: usize,
    ) -> Self {
        Self {
            output_dim: classes,
            task: Task::Classification,
            ..Self::regression(input_dim, hidden_width, max_depth)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.output_dim == 0 {
            return Err(invalid("input_dim, hidden_width and output_dim must be >= 1"));
        }
        if self.task == Task::Classification && self.output_dim < 2 {
            return Err(invalid("classification needs at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Same architecture truncated to `depth` intermediate blocks.
    pub fn with_depth(&self, depth: usize) -> Self {
        Self {
            max_depth: depth,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Input,
    Hidden,
    Output,
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(prefix: &str, width: usize) -> Self {
        Self {
            scale: Param::new(
                format!("{prefix}.bn_scale"),
                ParamRole::NormScale,
                Matrix::filled(1, width, T::one()),
            ),
            shift: Param::new(
                format!("{prefix}.bn_shift"),
                ParamRole::NormShift,
                Matrix::zeros(1, width),
            ),
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
        }
    }
}

/// One block `f_i`. Weight is stored `[fan_in × fan_out]` so that a
/// forward pass is `x · W + b` with one datum per row.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub kind: BlockKind,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub norm: Option<BatchNorm<T>>,
    pub residual: bool,
    pub dropout: f64,
}

/// Intermediate values kept by [`Block::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    input: Matrix<T>,
    pre_activation: Option<Matrix<T>>,
    mask: Option<Matrix<T>>,
    normalized: Option<Matrix<T>>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> Block<T> {
    pub fn fan_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.weight, &self.bias];
        if let Some(bn) = &self.norm {
            out.push(&bn.scale);
            out.push(&bn.shift);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.weight, &mut self.bias];
        if let Some(bn) = &mut self.norm {
            out.push(&mut bn.scale);
            out.push(&mut bn.shift);
        }
        out
    }

    /// Pure forward pass. Batch statistics are returned in the cache and
    /// only written back by [`Block::update_running`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Matrix<T>,
        mode: Mode,
        dropout: Option<&mut R>,
    ) -> Result<(Matrix<T>, BlockCache<T>)> {
        if x.cols() != self.fan_in() {
            return Err(Error::ShapeMismatch {
                op: "block_forward",
                left: x.shape(),
                right: self.weight.value.shape(),
            });
        }
        let mut h = x.matmul(&self.weight.value)?;
        h.add_row_broadcast(self.bias.value.as_slice())?;
        let mut cache = BlockCache {
            input: x.clone(),
            pre_activation: None,
            mask: None,
            normalized: None,
            inv_std: Vec::new(),
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
            mode,
        };
        if self.kind != BlockKind::Hidden {
            return Ok((h, cache));
        }

        let mut r = h.map(|v| v.max(T::zero()));
        cache.pre_activation = Some(h);
        if let Some(rng) = dropout {
            if self.dropout > 0.0 {
                let mask = dropout_mask(r.rows(), r.cols(), self.dropout, rng);
                for (v, &m) in r.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *v *= m;
                }
                cache.mask = Some(mask);
            }
        }

        let mut out = match &self.norm {
            None => r,
            Some(bn) => {
                let (mean, var) = match mode {
                    Mode::Train => {
                        if r.rows() < 2 {
                            return Err(Error::BatchTooSmall(r.rows()));
                        }
                        column_moments(&r)
                    }
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let eps = T::c(BN_EPS);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = r;
                for row in 0..xhat.rows() {
                    for (j, v) in xhat.row_mut(row).iter_mut().enumerate() {
                        *v = (*v - mean[j]) * inv_std[j];
                    }
                }
                let gamma = bn.scale.value.as_slice();
                let beta = bn.shift.value.as_slice();
                let mut y = xhat.clone();
                for row in 0..y.rows() {
                    for (j, v) in y.row_mut(row).iter_mut().enumerate() {
                        *v = *v * gamma[j] + beta[j];
                    }
                }
                cache.normalized = Some(xhat);
                cache.inv_std = inv_std;
                if mode == Mode::Train {
                    cache.batch_mean = mean;
                    cache.batch_var = var;
                }
                y
            }
        };
        if self.residual {
            out.add_assign(x)?;
        }
        Ok((out, cache))
    }

    /// Moves running statistics toward the batch statistics of a
    /// train-mode forward pass.
    pub fn update_running(&mut self, cache: &BlockCache<T>) {
        if cache.mode != Mode::Train || cache.batch_mean.is_empty() {
            return;
        }
        if let Some(bn) = &mut self.norm {
            let m = T::c(BN_MOMENTUM);
            let keep = T::one() - m;
            for (r, &b) in bn.running_mean.iter_mut().zip(&cache.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in bn.running_var.iter_mut().zip(&cache.batch_var) {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Accumulates parameter gradients and returns `dL/dx` when requested.
    pub fn backward(
        &mut self,
        cache: &BlockCache<T>,
        dout: &Matrix<T>,
        need_input_grad: bool,
    ) -> Result<Option<Matrix<T>>> {
        let dh = if self.kind == BlockKind::Hidden {
            let mut dr = match (&mut self.norm, &cache.normalized) {
                (Some(bn), Some(xhat)) => batchnorm_backward(bn, xhat, &cache.inv_std, dout, cache.mode),
                _ => dout.clone(),
            };
            if let Some(mask) = &cache.mask {
                for (g, &m) in dr.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *g *= m;
                }
            }
            let pre = cache
                .pre_activation
                .as_ref()
                .expect("hidden block cache holds pre-activations");
            for (g, &h) in dr.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if h <= T::zero() {
                    *g = T::zero();
                }
            }
            dr
        } else {
            dout.clone()
        };

        cache.input.t_matmul_acc(&dh, &mut self.weight.grad)?;
        for (g, s) in self
            .bias
            .grad
            .as_mut_slice()
            .iter_mut()
            .zip(dh.column_sums())
        {
            *g += s;
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = dh.matmul_t(&self.weight.value)?;
        if self.kind == BlockKind::Hidden && self.residual {
            dx.add_assign(dout)?;
        }
        Ok(Some(dx))
    }
}

fn column_moments<T: Scalar>(m: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let n = T::c(m.rows() as f64);
    let mean: Vec<T> = m.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![T::zero(); m.cols()];
    for r in 0..m.rows() {
        for (j, &v) in m.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn batchnorm_backward<T: Scalar>(
    bn: &mut BatchNorm<T>,
    xhat: &Matrix<T>,
    inv_std: &[T],
    dout: &Matrix<T>,
    mode: Mode,
) -> Matrix<T> {
    let cols = dout.cols();
    let rows = dout.rows();
    let gamma = bn.scale.value.as_slice().to_vec();
    let mut sum_d = vec![T::zero(); cols];
    let mut sum_dx = vec![T::zero(); cols];
    for r in 0..rows {
        for j in 0..cols {
            let d = dout.get(r, j);
            sum_d[j] += d;
            sum_dx[j] += d * xhat.get(r, j);
        }
    }
    for j in 0..cols {
        bn.shift.grad.as_mut_slice()[j] += sum_d[j];
        bn.scale.grad.as_mut_slice()[j] += sum_dx[j];
    }
    let mut dr = Matrix::zeros(rows, cols);
    match mode {
        Mode::Eval => {
            for r in 0..rows {
                for j in 0..cols {
                    dr.set(r, j, dout.get(r, j) * gamma[j] * inv_std[j]);
                }
            }
        }
        Mode::Train => {
            // dxhat = dout·γ, so the batch sums scale by γ as well.
            let n = T::c(rows as f64);
            for r in 0..rows {
                for j in 0..cols {
                    let g = gamma[j];
                    let v = (n * dout.get(r, j) * g
                        - sum_d[j] * g
                        - xhat.get(r, j) * sum_dx[j] * g)
                        * inv_std[j]
                        / n;
                    dr.set(r, j, v);
                }
            }
        }
    }
    dr
}

/// Mask of zeros and `1/(1-p)` survivors.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Matrix<T> {
    let keep = T::c(1.0 / (1.0 - p));
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

/// Inverted dropout. `Eval` is the identity; `Train` and `EvalSampling`
/// draw a mask from `seed`.
pub fn dropout_apply<T: Scalar>(
    a: &Matrix<T>,
    p: f64,
    seed: u64,
    mode: DropoutMode,
) -> Result<Matrix<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("dropout probability {p} not in [0, 1)")));
    }
    if mode == DropoutMode::Eval || p == 0.0 {
        return Ok(a.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Matrix<T> = dropout_mask(a.rows(), a.cols(), p, &mut rng);
    let mut out = a.clone();
    for (v, &m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *v *= m;
    }
    Ok(out)
}

/// He-initialized blocks `f_0, f_1..f_D, f_{D+1}`: weights `N(0, 2/fan_in)`,
/// zero biases, unit BN scale, zero BN shift, running statistics `(0, 1)`.
pub fn init_he<T: Scalar>(config: &ArchitectureConfig, seed: u64) -> Result<Vec<Block<T>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = config.hidden_width;
    let mut blocks = Vec::with_capacity(config.max_depth + 2);
    blocks.push(he_block("input", BlockKind::Input, config.input_dim, w, config, &mut rng));
    for i in 1..=config.max_depth {
        blocks.push(he_block(
            &format!("hidden{i}"),
            BlockKind::Hidden,
            w,
            w,
            config,
            &mut rng,
        ));
    }
    blocks.push(he_block(
        "output",
        BlockKind::Output,
        w,
        config.output_dim,
        config,
        &mut rng,
    ));
    Ok(blocks)
}

fn he_block<T: Scalar>(
    name: &str,
    kind: BlockKind,
    fan_in: usize,
    fan_out: usize,
    config: &ArchitectureConfig,
    rng: &mut ChaCha8Rng,
) -> Block<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let weight = Matrix::from_fn(fan_in, fan_out, |_, _| T::c(normal.sample(rng)));
    let hidden = kind == BlockKind::Hidden;
    Block {
        kind,
        weight: Param::new(format!("{name}.weight"), ParamRole::Weight, weight),
        bias: Param::new(format!("{name}.bias"), ParamRole::Bias, Matrix::zeros(1, fan_out)),
        norm: (hidden && config.batchnorm).then(|| BatchNorm::new(name, fan_out)),
        residual: hidden && config.residual,
        dropout: if hidden { config.dropout } else { 0.0 },
    }
}

/// Forward through one block, committing running statistics in train mode.
pub fn block_forward<T: Scalar>(block: &mut Block<T>, a_prev: &Matrix<T>, mode: Mode) -> Result<Matrix<T>> {
    let (out, cache) = block.forward::<ChaCha8Rng>(a_prev, mode, None)?;
    block.update_running(&cache);
    Ok(out)
}
