//! The depth uncertainty network.
//!
//! A DUN is an ordinary feed-forward stack `f_0, f_1..f_D, f_{D+1}` in which
//! the output block is applied to the activations after *every* intermediate
//! block, so one forward pass yields predictions for all `D+1` depths. Depth
//! is a categorical latent variable with a fixed prior and a learnt
//! variational distribution; predictions marginalise over it.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::metrics::{moment_match, Prediction};
use crate::nn::{init_he, ArchitectureConfig, Block, BlockCache, Mode, Task};
use crate::numerics::{logsumexp, softmax, Matrix, Param, ParamBundle, ParamRole};
use crate::objectives::LogLikTable;
use crate::scalar::Scalar;

/// RNG driving dropout masks inside forward passes.
pub type DropoutRng = ChaCha8Rng;

/// Categorical distribution over depths `0..=D`, stored as logits with
/// derived probabilities. Logits may be `-∞` (zero mass).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution<T> {
    logits: Vec<T>,
    probs: Vec<T>,
    log_probs: Vec<T>,
}

impl<T: Scalar> DepthDistribution<T> {
    pub fn from_logits(logits: Vec<T>) -> Result<Self> {
        if logits.is_empty() {
            return Err(invalid("depth distribution needs at least one depth"));
        }
        if logits.iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(invalid("depth logits must be finite or -inf"));
        }
        let lse = logsumexp(&logits)?;
        if lse == T::neg_infinity() {
            return Err(invalid("depth distribution has zero mass everywhere"));
        }
        let log_probs: Vec<T> = logits.iter().map(|&z| z - lse).collect();
        let probs = softmax(&logits);
        Ok(Self {
            logits,
            probs,
            log_probs,
        })
    }

    /// From (possibly unnormalized) non-negative weights.
    pub fn from_probs(probs: Vec<T>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= T::zero()) || !p.is_finite()) {
            return Err(invalid("depth probabilities must be finite and non-negative"));
        }
        Self::from_logits(probs.into_iter().map(|p| p.ln()).collect())
    }

    pub fn uniform(len: usize) -> Self {
        Self::from_logits(vec![T::zero(); len]).expect("len >= 1")
    }

    pub fn delta(len: usize, at: usize) -> Self {
        let logits = (0..len)
            .map(|i| if i == at { T::zero() } else { T::neg_infinity() })
            .collect();
        Self::from_logits(logits).expect("delta index in range")
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[T] {
        &self.log_probs
    }

    pub fn probs_f64(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.f64()).collect()
    }
}

/// Per-depth predictions `ŷ_i = f_{D+1}(a_i)`: regression means or
/// classification probabilities, one `[N × out]` matrix per depth.
#[derive(Debug, Clone, PartialEq)]
pub struct PerDepthOutputs<T> {
    pub depths: Vec<Matrix<T>>,
}

impl<T: Scalar> PerDepthOutputs<T> {
    pub fn depth(&self, i: usize) -> &Matrix<T> {
        &self.depths[i]
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Which depths a forward pass must emit outputs for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    /// Every depth up to the evaluation limit.
    All,
    /// A single depth (fixed-depth networks).
    Only(usize),
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    mode: Mode,
    block_caches: Vec<BlockCache<T>>,
    output_caches: Vec<Option<BlockCache<T>>>,
    /// Pre-softmax logits (classification) or means (regression), per depth.
    raw: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn raw_output(&self, depth: usize) -> Option<&Matrix<T>> {
        self.raw.get(depth).and_then(|m| m.as_ref())
    }

    pub fn depth_count(&self) -> usize {
        self.raw.len()
    }
}

#[derive(Debug, Default)]
struct BlockCounter(AtomicUsize);

impl Clone for BlockCounter {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.0.load(Ordering::Relaxed)))
    }
}

/// Architecture, all block parameters, the fixed depth prior, the
/// variational depth logits and (for regression) the shared noise scale.
#[derive(Debug, Clone)]
pub struct DunModel<T> {
    pub config: ArchitectureConfig,
    pub blocks: Vec<Block<T>>,
    prior: DepthDistribution<T>,
    pub variational: Param<T>,
    pub noise_log_std: Option<Param<T>>,
    pub seed: u64,
    block_evals: BlockCounter,
}

impl<T: Scalar> DunModel<T> {
    /// He-initialized DUN with a uniform depth prior and `q` equal to it.
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        let prior = DepthDistribution::uniform(config.max_depth + 1);
        Self::with_prior(config, seed, prior)
    }

    pub fn with_prior(
        config: ArchitectureConfig,
        seed: u64,
        prior: DepthDistribution<T>,
    ) -> Result<Self> {
        if prior.len() != config.max_depth + 1 {
            return Err(invalid(format!(
                "prior has {} depths, architecture has {}",
                prior.len(),
                config.max_depth + 1
            )));
        }
        let blocks = init_he(&config, seed)?;
        let variational = Param::new(
            "depth_logits",
            ParamRole::DepthLogits,
            Matrix::row_vector(prior.logits().to_vec()),
        );
        let noise_log_std = (config.task == Task::Regression).then(|| {
            Param::new("noise_log_std", ParamRole::NoiseLogStd, Matrix::zeros(1, 1))
        });
        Ok(Self {
            config,
            blocks,
            prior,
            variational,
            noise_log_std,
            seed,
            block_evals: BlockCounter::default(),
        })
    }

    /// A deterministic-depth network: prior and `q` are both a point mass
    /// at `config.max_depth`, and the depth logits are frozen.
    pub fn fixed_depth(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        let d = config.max_depth;
        let mut model = Self::with_prior(config, seed, DepthDistribution::delta(d + 1, d))?;
        model.variational.frozen = true;
        Ok(model)
    }

    pub fn max_depth(&self) -> usize {
        self.config.max_depth
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn prior(&self) -> &DepthDistribution<T> {
        &self.prior
    }

    /// `q_α` as a distribution.
    pub fn variational(&self) -> DepthDistribution<T> {
        DepthDistribution::from_logits(self.variational.value.as_slice().to_vec())
            .expect("variational logits stay valid")
    }

    pub fn set_variational(&mut self, q: &DepthDistribution<T>) -> Result<()> {
        if q.len() != self.max_depth() + 1 {
            return Err(invalid("variational distribution length mismatch"));
        }
        self.variational
            .value
            .as_mut_slice()
            .copy_from_slice(q.logits());
        Ok(())
    }

    /// Whether `q` is a point mass at the deepest depth (fixed-depth nets).
    pub fn is_fixed_depth(&self) -> bool {
        let d = self.max_depth();
        self.prior.probs()[d] == T::one()
    }

    pub fn noise_std(&self) -> T {
        self.noise_log_std
            .as_ref()
            .map(|p| p.value.as_slice()[0].exp())
            .unwrap_or_else(T::one)
    }

    /// Count of `f_0..f_D` evaluations since construction or last reset.
    pub fn block_evaluations(&self) -> usize {
        self.block_evals.0.load(Ordering::Relaxed)
    }

    pub fn reset_block_evaluations(&self) {
        self.block_evals.0.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "dun_forward",
                left: x.shape(),
                right: (x.rows(), self.config.input_dim),
            });
        }
        Ok(())
    }

    /// Single pass through `f_0..f_limit`, applying the output block where
    /// `heads` asks for it.
    pub fn forward_trace(
        &self,
        x: &Matrix<T>,
        mode: Mode,
        limit: usize,
        heads: Heads,
        mut dropout: Option<&mut DropoutRng>,
    ) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        if limit > self.max_depth() {
            return Err(invalid(format!(
                "depth {limit} out of range 0..={}",
                self.max_depth()
            )));
        }
        let output = self.blocks.last().expect("output block");
        let mut trace = ForwardTrace {
            mode,
            block_caches: Vec::with_capacity(limit + 1),
            output_caches: vec![None; limit + 1],
            raw: vec![None; limit + 1],
        };
        let mut a = x.clone();
        for i in 0..=limit {
            let (next, cache) = self.blocks[i].forward(&a, mode, dropout.as_deref_mut())?;
            self.block_evals.0.fetch_add(1, Ordering::Relaxed);
            trace.block_caches.push(cache);
            a = next;
            let wanted = match heads {
                Heads::All => true,
                Heads::Only(d) => d == i,
            };
            if wanted {
                let (out, cache) = output.forward::<DropoutRng>(&a, mode, None)?;
                trace.output_caches[i] = Some(cache);
                trace.raw[i] = Some(out);
            }
        }
        Ok(trace)
    }

    /// Converts raw per-depth outputs into predictions (softmax for
    /// classification). Depths that were not emitted are omitted.
    pub fn outputs_from_trace(&self, trace: &ForwardTrace<T>) -> PerDepthOutputs<T> {
        let depths = trace
            .raw
            .iter()
            .flatten()
            .map(|raw| self.finish_output(raw))
            .collect();
        PerDepthOutputs { depths }
    }

    fn finish_output(&self, raw: &Matrix<T>) -> Matrix<T> {
        match self.task() {
            Task::Regression => raw.clone(),
            Task::Classification => {
                let mut probs = raw.clone();
                for r in 0..probs.rows() {
                    let row = softmax(raw.row(r));
                    probs.row_mut(r).copy_from_slice(&row);
                }
                probs
            }
        }
    }

    /// Predictions at every depth `0..=D` from one pass. Pure: in train
    /// mode batch statistics are used but running statistics are left alone.
    pub fn forward_all_depths(&self, x: &Matrix<T>, mode: Mode) -> Result<PerDepthOutputs<T>> {
        let trace = self.forward_trace(x, mode, self.max_depth(), Heads::All, None)?;
        Ok(self.outputs_from_trace(&trace))
    }

    /// Evaluates only `f_0..f_depth` then the output block (eval mode),
    /// composing the blocks directly rather than through a trace.
    pub fn subnetwork_forward(&self, x: &Matrix<T>, depth: usize) -> Result<Matrix<T>> {
        self.check_input(x)?;
        if depth > self.max_depth() {
            return Err(invalid(format!(
                "depth {depth} out of range 0..={}",
                self.max_depth()
            )));
        }
        let mut a = x.clone();
        for block in &self.blocks[..=depth] {
            a = block.forward::<DropoutRng>(&a, Mode::Eval, None)?.0;
        }
        let raw = self.blocks[self.max_depth() + 1]
            .forward::<DropoutRng>(&a, Mode::Eval, None)?
            .0;
        Ok(self.finish_output(&raw))
    }

    /// Commits the batch statistics of a train-mode trace.
    pub fn apply_running_stats(&mut self, trace: &ForwardTrace<T>) {
        if trace.mode != Mode::Train {
            return;
        }
        for (block, cache) in self.blocks.iter_mut().zip(&trace.block_caches) {
            block.update_running(cache);
        }
    }

    /// Backpropagates `dL/d raw_output_i` for each depth into the block
    /// gradients. `None` entries contribute nothing.
    pub fn backward(&mut self, trace: &ForwardTrace<T>, d_raw: &[Option<Matrix<T>>]) -> Result<()> {
        let limit = trace.block_caches.len() - 1;
        let out_index = self.blocks.len() - 1;
        let mut d_act: Option<Matrix<T>> = None;
        for i in (0..=limit).rev() {
            if let (Some(g), Some(cache)) = (d_raw.get(i).and_then(|g| g.as_ref()), &trace.output_caches[i]) {
                let dx = self.blocks[out_index]
                    .backward(cache, g, true)?
                    .expect("input grad requested");
                match &mut d_act {
                    Some(acc) => acc.add_assign(&dx)?,
                    None => d_act = Some(dx),
                }
            }
            let Some(upstream) = d_act.take() else { continue };
            let need = i > 0;
            d_act = self.blocks[i].backward(&trace.block_caches[i], &upstream, need)?;
        }
        Ok(())
    }

    /// Depth-marginal prediction with the given depth weights.
    /// Classification: `Σ_i w_i ŷ_i`; regression: moment-matched Gaussian
    /// of the mixture of per-depth means with the shared noise.
    pub fn predict_marginal(
        &self,
        x: &Matrix<T>,
        weights: &DepthDistribution<T>,
    ) -> Result<Prediction<T>> {
        if weights.len() != self.max_depth() + 1 {
            return Err(invalid("depth weights length mismatch"));
        }
        let outputs = self.forward_all_depths(x, Mode::Eval)?;
        combine_depths(&outputs, weights.probs(), self.task(), self.noise_std())
    }
}

/// Weighted combination of per-depth outputs (shared by full and
/// truncated prediction).
pub(crate) fn combine_depths<T: Scalar>(
    outputs: &PerDepthOutputs<T>,
    weights: &[T],
    task: Task,
    noise_std: T,
) -> Result<Prediction<T>> {
    let (rows, cols) = outputs.depth(0).shape();
    match task {
        Task::Classification => {
            let mut probs = Matrix::zeros(rows, cols);
            for (w, out) in weights.iter().zip(&outputs.depths) {
                probs.axpy(*w, out)?;
            }
            Ok(Prediction::Classification { probs })
        }
        Task::Regression => {
            let noise_var = noise_std * noise_std;
            let mut means = vec![T::zero(); outputs.len()];
            let mut gaussians = Vec::with_capacity(rows * cols);
            for idx in 0..rows * cols {
                for (m, out) in means.iter_mut().zip(&outputs.depths) {
                    *m = out.as_slice()[idx];
                }
                gaussians.push(moment_match(&weights[..outputs.len()], &means, noise_var)?);
            }
            Ok(Prediction::Regression {
                gaussians,
                rows,
                cols,
            })
        }
    }
}

/// Depth posterior `p(d | data)`: `prior_j · exp(Σ_n loglik[j][n])`,
/// normalized in log space.
pub fn exact_posterior<T: Scalar>(
    table: &LogLikTable<T>,
    prior: &DepthDistribution<T>,
) -> Result<DepthDistribution<T>> {
    if table.depths() != prior.len() {
        return Err(invalid("log-likelihood table and prior disagree on depth count"));
    }
    let log_joint: Vec<T> = prior
        .log_probs()
        .iter()
        .zip(table.totals())
        .map(|(&lp, total)| lp + total)
        .collect();
    DepthDistribution::from_logits(log_joint)
}

impl<T: Scalar> ParamBundle<T> for DunModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for block in &self.blocks {
            for p in block.params() {
                f(p);
            }
        }
        f(&self.variational);
        if let Some(p) = &self.noise_log_std {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for block in &mut self.blocks {
            for p in block.params_mut() {
                f(p);
            }
        }
        f(&mut self.variational);
        if let Some(p) = &mut self.noise_log_std {
            f(p);
        }
    }
}
