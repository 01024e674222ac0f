//! Data preparation, per-seed training and scoring shared by the commands.

use std::path::Path;
use std::time::Instant;

use dun::baselines::{dropout_predict_mc, ensemble_predict, train_ensemble, EnsembleKind, EnsembleModel};
use dun::checkpoint;
use dun::datasets::{generate_toy, load_csv, normalize, split, Dataset, SplitSpec};
use dun::metrics::REPORT_HEADER;
use dun::model::exact_posterior;
use dun::objectives::loglik_table;
use dun::pruning::{predict_truncated, select_depth, PruneStrategy};
use dun::training::{train_dun_mll, train_dun_vi, train_vanilla, Data, OptimizerConfig, RunRecord, TrainOptions};
use dun::{ArchitectureConfig, CalibrationReport, DepthDistribution, Matrix, Mode, Model, Prediction, Targets, Task};

use crate::config::{DataSource, ExperimentConfig, Method, SplitChoice};
use crate::CliError;

/// A dataset in model space (`model`) next to the same rows on the
/// original scale (`raw`).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub raw: Dataset,
    pub model: Dataset,
}

impl Prepared {
    /// Rows scored in reports: the test split, or the training rows when
    /// there is no test split.
    pub fn eval_rows(&self) -> &[usize] {
        if self.raw.test.is_empty() {
            &self.raw.train
        } else {
            &self.raw.test
        }
    }

    pub fn eval_x(&self) -> Matrix {
        self.model.x.select_rows(self.eval_rows())
    }

    pub fn eval_targets(&self) -> Targets {
        self.raw.y.select(self.eval_rows())
    }

    pub fn train_x(&self) -> Matrix {
        self.model.train_x()
    }

    pub fn train_y(&self) -> Targets {
        self.model.train_y()
    }

    /// Maps a model-space prediction onto the original target scale.
    pub fn to_raw_scale(&self, pred: &Prediction) -> Result<Prediction, CliError> {
        match &self.model.normalization {
            Some(n) if self.model.task == Task::Regression => Ok(pred.denormalize(&n.y_mean, &n.y_std)?),
            _ => Ok(pred.clone()),
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let ds = match &cfg.data {
        DataSource::Toy { name, n, seed } => generate_toy(name, *n, *seed)?,
        DataSource::Csv {
            path,
            target,
            header,
            task,
        } => load_csv(path, *target, *header, *task)?,
    };
    let raw = match cfg.split {
        SplitChoice::None => ds,
        SplitChoice::Standard { test_fraction, seed } => split(&ds, SplitSpec::Standard { test_fraction, seed })?,
        SplitChoice::Gap { feature } => split(&ds, SplitSpec::Gap { feature })?,
    };
    let model = if cfg.normalize { normalize(&raw)? } else { raw.clone() };
    Ok(Prepared { raw, model })
}

pub fn architecture(cfg: &ExperimentConfig, ds: &Dataset, depth: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        input_dim: ds.input_dim(),
        hidden_width: cfg.width,
        max_depth: depth,
        output_dim: ds.outputs,
        residual: cfg.residual,
        batchnorm: cfg.batchnorm,
        task: ds.task,
        dropout: cfg.dropout,
    }
}

pub fn train_options(cfg: &ExperimentConfig, seed: u64) -> TrainOptions {
    TrainOptions {
        optimizer: OptimizerConfig {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        q_freeze_epochs: cfg.q_freeze_epochs,
        seed,
        record_timing: cfg.record_timing,
    }
}

/// A trained single network or ensemble.
#[derive(Debug, Clone)]
pub enum Trained {
    Single(Model),
    Ensemble(EnsembleModel<f64>),
}

impl Trained {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        match self {
            Trained::Single(m) => checkpoint::save_model(m, path)?,
            Trained::Ensemble(e) => checkpoint::save_ensemble(e, path)?,
        }
        Ok(())
    }

    /// Loads a checkpoint file, or an ensemble directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if path.is_dir() {
            Ok(Trained::Ensemble(checkpoint::load_ensemble(path)?))
        } else if path.is_file() {
            Ok(Trained::Single(checkpoint::load_model(path)?))
        } else {
            Err(CliError::usage(format!("checkpoint `{}` does not exist", path.display())))
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Trained::Single(m) => m.seed,
            Trained::Ensemble(e) => e.seeds.first().copied().unwrap_or(0),
        }
    }

    fn first(&self) -> Option<&Model> {
        match self {
            Trained::Single(m) => Some(m),
            Trained::Ensemble(e) => e.members.first(),
        }
    }

    /// Rejects checkpoints whose input, output or task disagree with `ds`.
    pub fn check_compatible(&self, ds: &Dataset) -> Result<(), CliError> {
        let Some(m) = self.first() else {
            return Err(CliError::usage("checkpoint holds no networks"));
        };
        let c = &m.config;
        if c.input_dim != ds.input_dim() || c.output_dim != ds.outputs || c.task != ds.task {
            return Err(CliError::usage(format!(
                "checkpoint expects {} inputs and {} {} outputs, dataset `{}` has {} inputs and {} {} outputs",
                c.input_dim,
                c.output_dim,
                c.task.as_str(),
                ds.name,
                ds.input_dim(),
                ds.outputs,
                ds.task.as_str()
            )));
        }
        Ok(())
    }
}

/// Trains one seed of `cfg.method`. Ensembles return one record per member.
pub fn train_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<(Trained, Vec<RunRecord>), CliError> {
    let (x, y) = (prep.train_x(), prep.train_y());
    let data = Data::new(&x, &y)?;
    let opts = train_options(cfg, seed);
    let arch = architecture(cfg, &prep.model, cfg.depth);
    match cfg.method {
        Method::DunVi | Method::DunMll => {
            let mut model = Model::new(arch, seed)?;
            let record = if cfg.method == Method::DunVi {
                train_dun_vi(&mut model, data, &opts)?
            } else {
                train_dun_mll(&mut model, data, &opts)?
            };
            Ok((Trained::Single(model), vec![record]))
        }
        Method::Vanilla | Method::Dropout => {
            let mut model = Model::fixed_depth(arch, seed)?;
            let record = train_vanilla(&mut model, data, &opts)?;
            Ok((Trained::Single(model), vec![record]))
        }
        Method::Ensemble | Method::DepthEnsemble => {
            let kind = if cfg.method == Method::Ensemble {
                EnsembleKind::Standard
            } else {
                EnsembleKind::Depth
            };
            let (ens, records) = train_ensemble(kind, cfg.ensemble_size, &arch, data, &opts, seed, cfg.d_min)?;
            Ok((Trained::Ensemble(ens), records))
        }
    }
}

/// How a single DUN weights its depths at prediction time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PredictOptions {
    /// Replace `q` by the exact posterior on the training rows.
    pub exact_posterior: bool,
    pub prune: Option<PruneStrategy>,
}

/// Depth weights used for prediction, and the pruned depth if any.
pub fn depth_weights(
    model: &Model,
    prep: &Prepared,
    opts: PredictOptions,
) -> Result<(DepthDistribution, Option<usize>), CliError> {
    let q = if opts.exact_posterior {
        let table = loglik_table(model, &prep.train_x(), &prep.train_y(), Mode::Eval)?;
        exact_posterior(&table, model.prior())?
    } else {
        model.variational()
    };
    let d = opts.prune.map(|s| select_depth(&q, s)).transpose()?;
    Ok((q, d))
}

/// Predicts the evaluation rows in model space.
pub fn predict(
    trained: &Trained,
    method: Method,
    mc_samples: usize,
    prep: &Prepared,
    x: &Matrix,
    opts: PredictOptions,
) -> Result<Prediction, CliError> {
    match trained {
        Trained::Ensemble(e) => {
            if opts != PredictOptions::default() {
                return Err(CliError::usage("posterior and pruning options need a single-network checkpoint"));
            }
            Ok(ensemble_predict(e, x)?)
        }
        Trained::Single(m) if method == Method::Dropout => {
            if opts != PredictOptions::default() {
                return Err(CliError::usage("posterior and pruning options do not apply to MC dropout"));
            }
            Ok(dropout_predict_mc(m, x, mc_samples, m.seed)?)
        }
        Trained::Single(m) => {
            let (q, d) = depth_weights(m, prep, opts)?;
            match d {
                Some(d) => Ok(predict_truncated(m, x, &q, d)?),
                None => Ok(m.predict_marginal(x, &q)?),
            }
        }
    }
}

/// Scores `trained` on the evaluation rows, on the original target scale.
pub fn evaluate(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    trained: &Trained,
    method_name: &str,
    opts: PredictOptions,
) -> Result<CalibrationReport, CliError> {
    let x = prep.eval_x();
    let start = Instant::now();
    let pred = predict(trained, cfg.method, cfg.mc_samples, prep, &x, opts)?;
    let elapsed = start.elapsed().as_secs_f64();
    let pred = prep.to_raw_scale(&pred)?;
    let mut report = CalibrationReport::from_prediction(&pred, &prep.eval_targets())?;
    report.method = method_name.to_string();
    report.dataset = prep.raw.name.clone();
    report.seed = trained.seed();
    report.batch_time_s = Some(elapsed);
    Ok(report)
}

/// Header line plus one row per report.
pub fn reports_csv(reports: &[CalibrationReport]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
