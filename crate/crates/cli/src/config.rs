//! Flat `key = value` experiment configuration.
//!
//! Blank lines and anything after `#` are ignored. Every key may appear at
//! most once; unknown keys are rejected with the offending line number.
//!
//! | key | values | default |
//! |-----|--------|---------|
//! | `method` | `dun_vi`, `dun_mll`, `vanilla`, `ensemble`, `depth_ensemble`, `dropout` | `dun_vi` |
//! | `dataset` | toy name or `csv` | required |
//! | `n` | rows generated for a toy dataset | 300 |
//! | `data_seed` | toy generator seed | 0 |
//! | `csv_path` | file, relative to the config file | required for `csv` |
//! | `csv_target` | zero-based target column | last column |
//! | `csv_header` | `true`/`false` | `true` |
//! | `task` | `regression`/`classification` (csv only) | `regression` |
//! | `split` | `none`, `standard`, `gap` | `none` |
//! | `test_fraction` | fraction of rows in the test split | 0.1 |
//! | `split_seed` | shuffle seed of the standard split | 0 |
//! | `gap_feature` | input column split by the gap split | 0 |
//! | `normalize` | standardise with training statistics | `true` |
//! | `width`, `depth` | hidden width, number of hidden blocks | 100, 5 |
//! | `residual`, `batchnorm` | `true`/`false` | `true` |
//! | `dropout` | dropout rate after each hidden activation | 0, or 0.1 for `dropout` |
//! | `lr`, `momentum`, `weight_decay` | SGD settings | 1e-3, 0.9, 1e-4 |
//! | `epochs` | passes over the training set | 100 |
//! | `batch_size` | minibatch rows, `full` for full batch | `full` |
//! | `q_freeze_epochs` | epochs with depth logits held at the prior | 0 |
//! | `seeds` | comma-separated list | `0` |
//! | `out` | output directory, relative to the working directory | `dun-out` |
//! | `ensemble_size` | members of an ensemble | 5 |
//! | `d_min` | shallowest member of a depth ensemble | 1 |
//! | `mc_samples` | MC dropout passes at prediction time | 100 |
//! | `depth_min`, `depth_max` | depth range of `sweep-depth` | 1, `depth` |
//! | `record_timing` | store wall-clock seconds in traces | `false` |

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dun::datasets::TOY_NAMES;
use dun::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    DunVi,
    DunMll,
    Vanilla,
    Ensemble,
    DepthEnsemble,
    Dropout,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::DunVi,
        Method::DunMll,
        Method::Vanilla,
        Method::Ensemble,
        Method::DepthEnsemble,
        Method::Dropout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DunVi => "dun_vi",
            Method::DunMll => "dun_mll",
            Method::Vanilla => "vanilla",
            Method::Ensemble => "ensemble",
            Method::DepthEnsemble => "depth_ensemble",
            Method::Dropout => "dropout",
        }
    }

    pub fn is_dun(self) -> bool {
        matches!(self, Method::DunVi | Method::DunMll)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown method `{s}`; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Toy { name: String, n: usize, seed: u64 },
    Csv {
        path: PathBuf,
        target: Option<usize>,
        header: bool,
        task: Task,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitChoice {
    None,
    Standard { test_fraction: f64, seed: u64 },
    Gap { feature: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub data: DataSource,
    pub split: SplitChoice,
    pub normalize: bool,
    pub width: usize,
    pub depth: usize,
    pub residual: bool,
    pub batchnorm: bool,
    pub dropout: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub q_freeze_epochs: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub ensemble_size: usize,
    pub d_min: usize,
    pub mc_samples: usize,
    pub depth_min: usize,
    pub depth_max: usize,
    pub record_timing: bool,
}

/// A configuration problem, located by line when it comes from one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

const KEYS: [&str; 32] = [
    "method",
    "dataset",
    "n",
    "data_seed",
    "csv_path",
    "csv_target",
    "csv_header",
    "task",
    "split",
    "test_fraction",
    "split_seed",
    "gap_feature",
    "normalize",
    "width",
    "depth",
    "residual",
    "batchnorm",
    "dropout",
    "lr",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "q_freeze_epochs",
    "seeds",
    "out",
    "ensemble_size",
    "d_min",
    "mc_samples",
    "depth_min",
    "depth_max",
    "record_timing",
];

struct Entries {
    values: HashMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.values.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|_| ConfigError {
                line: Some(line),
                msg: format!("`{key}`: cannot parse `{v}`"),
            }),
        }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some((_, "true" | "yes" | "1")) => Ok(true),
            Some((_, "false" | "no" | "0")) => Ok(false),
            Some((line, v)) => Err(ConfigError {
                line: Some(line),
                msg: format!("`{key}`: expected true or false, got `{v}`"),
            }),
        }
    }

    fn fail(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.raw(key).map(|(l, _)| l),
            msg: msg.into(),
        }
    }
}

fn tokenize(text: &str) -> Result<Entries, ConfigError> {
    let mut values = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError {
                line: Some(line),
                msg: format!("expected `key = value`, got `{content}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(ConfigError {
                line: Some(line),
                msg: format!("unknown key `{k}`"),
            });
        }
        if v.is_empty() {
            return Err(ConfigError {
                line: Some(line),
                msg: format!("`{k}` has no value"),
            });
        }
        if let Some((first, _)) = values.insert(k.to_string(), (line, v.to_string())) {
            return Err(ConfigError {
                line: Some(line),
                msg: format!("`{k}` already set on line {first}"),
            });
        }
    }
    Ok(Entries { values })
}

impl ExperimentConfig {
    /// Parses `text`; relative `csv_path` values resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let e = tokenize(text)?;
        let method: Method = match e.raw("method") {
            None => Method::DunVi,
            Some((line, v)) => v.parse().map_err(|msg| ConfigError { line: Some(line), msg })?,
        };

        let data = match e.raw("dataset") {
            None => {
                return Err(ConfigError {
                    line: None,
                    msg: "missing required key `dataset`".into(),
                })
            }
            Some((_, "csv")) => {
                let (line, p) = e
                    .raw("csv_path")
                    .ok_or_else(|| e.fail("dataset", "`dataset = csv` needs `csv_path`"))?;
                let path = base.join(p);
                if !path.is_file() {
                    return Err(ConfigError {
                        line: Some(line),
                        msg: format!("csv_path `{}` does not exist", path.display()),
                    });
                }
                let task = match e.raw("task") {
                    None => Task::Regression,
                    Some((line, v)) => Task::parse(v).ok_or_else(|| ConfigError {
                        line: Some(line),
                        msg: format!("`task`: expected regression or classification, got `{v}`"),
                    })?,
                };
                DataSource::Csv {
                    path,
                    target: e.raw("csv_target").map(|_| e.get("csv_target", 0)).transpose()?,
                    header: e.flag("csv_header", true)?,
                    task,
                }
            }
            Some((line, name)) => {
                if !TOY_NAMES.contains(&name) {
                    return Err(ConfigError {
                        line: Some(line),
                        msg: format!("unknown dataset `{name}`; expected csv or one of {}", TOY_NAMES.join(", ")),
                    });
                }
                for key in ["csv_path", "csv_target", "csv_header", "task"] {
                    if e.raw(key).is_some() {
                        return Err(e.fail(key, format!("`{key}` only applies to `dataset = csv`")));
                    }
                }
                DataSource::Toy {
                    name: name.to_string(),
                    n: e.get("n", 300)?,
                    seed: e.get("data_seed", 0)?,
                }
            }
        };

        let split = match e.raw("split").map(|(_, v)| v) {
            None | Some("none") => SplitChoice::None,
            Some("standard") => SplitChoice::Standard {
                test_fraction: e.get("test_fraction", 0.1)?,
                seed: e.get("split_seed", 0)?,
            },
            Some("gap") => SplitChoice::Gap {
                feature: e.get("gap_feature", 0)?,
            },
            Some(v) => return Err(e.fail("split", format!("`split`: expected none, standard or gap, got `{v}`"))),
        };

        let depth = e.get("depth", 5)?;
        let batch_size = match e.raw("batch_size") {
            None | Some((_, "full")) => None,
            Some(_) => Some(e.get("batch_size", 0usize)?),
        };
        let seeds = match e.raw("seeds") {
            None => vec![0],
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| ConfigError {
                    line: Some(line),
                    msg: format!("`seeds`: expected comma-separated integers, got `{v}`"),
                })?,
        };
        let default_dropout = if method == Method::Dropout { 0.1 } else { 0.0 };

        let config = ExperimentConfig {
            method,
            data,
            split,
            normalize: e.flag("normalize", true)?,
            width: e.get("width", 100)?,
            depth,
            residual: e.flag("residual", true)?,
            batchnorm: e.flag("batchnorm", true)?,
            dropout: e.get("dropout", default_dropout)?,
            lr: e.get("lr", 1e-3)?,
            momentum: e.get("momentum", 0.9)?,
            weight_decay: e.get("weight_decay", 1e-4)?,
            epochs: e.get("epochs", 100)?,
            batch_size,
            q_freeze_epochs: e.get("q_freeze_epochs", 0)?,
            seeds,
            out: PathBuf::from(e.raw("out").map_or("dun-out", |(_, v)| v)),
            ensemble_size: e.get("ensemble_size", 5)?,
            d_min: e.get("d_min", 1)?,
            mc_samples: e.get("mc_samples", 100)?,
            depth_min: e.get("depth_min", 1)?,
            depth_max: e.get("depth_max", depth)?,
            record_timing: e.flag("record_timing", false)?,
        };
        config.check(&e)?;
        Ok(config)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|err| ConfigError {
            line: None,
            msg: format!("{}: {err}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn check(&self, e: &Entries) -> Result<(), ConfigError> {
        if self.width == 0 {
            return Err(e.fail("width", "`width` must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(e.fail("dropout", "`dropout` must lie in [0, 1)"));
        }
        if self.method == Method::Dropout && self.dropout == 0.0 {
            return Err(e.fail("dropout", "method `dropout` needs a positive dropout rate"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(e.fail("lr", "`lr` must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(e.fail("momentum", "`momentum` must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(e.fail("weight_decay", "`weight_decay` must be non-negative"));
        }
        if self.batch_size == Some(0) {
            return Err(e.fail("batch_size", "`batch_size` must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(e.fail("seeds", "`seeds` is empty"));
        }
        if self.ensemble_size == 0 {
            return Err(e.fail("ensemble_size", "`ensemble_size` must be at least 1"));
        }
        if self.mc_samples == 0 {
            return Err(e.fail("mc_samples", "`mc_samples` must be at least 1"));
        }
        if self.depth_min > self.depth_max {
            return Err(e.fail("depth_min", "`depth_min` exceeds `depth_max`"));
        }
        if let DataSource::Toy { n, .. } = self.data {
            if n < 2 {
                return Err(e.fail("n", "`n` must be at least 2"));
            }
        }
        if let SplitChoice::Standard { test_fraction, .. } = self.split {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(e.fail("test_fraction", "`test_fraction` must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::parse(text, Path::new("."))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("dataset = wiggle\n# comment\n\nseeds = 3, 4 ,5\nbatch_size = 32 # trailing\n").unwrap();
        assert_eq!(c.method, Method::DunVi);
        assert_eq!(c.seeds, vec![3, 4, 5]);
        assert_eq!(c.batch_size, Some(32));
        assert_eq!(c.depth_max, 5);
        assert_eq!(
            c.data,
            DataSource::Toy {
                name: "wiggle".into(),
                n: 300,
                seed: 0
            }
        );
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse("dataset = wiggle\n\nfoo = 1\n").unwrap_err();
        assert_eq!(err.line, Some(3));
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn bad_values_are_located() {
        assert_eq!(parse("dataset = wiggle\nlr = fast\n").unwrap_err().line, Some(2));
        assert_eq!(parse("method = magic\ndataset = wiggle\n").unwrap_err().line, Some(1));
        assert_eq!(parse("dataset = wiggle\nlr = 1\nlr = 2\n").unwrap_err().line, Some(3));
        assert_eq!(parse("dataset = wiggle\njust text\n").unwrap_err().line, Some(2));
        assert!(parse("n = 5\n").is_err());
    }

    #[test]
    fn missing_csv_is_rejected() {
        let err = parse("dataset = csv\ncsv_path = /definitely/not/here.csv\n").unwrap_err();
        assert_eq!(err.line, Some(2));
    }

    #[test]
    fn dropout_method_defaults_to_a_positive_rate() {
        let c = parse("method = dropout\ndataset = wiggle\n").unwrap();
        assert_eq!(c.dropout, 0.1);
        assert!(parse("method = dropout\ndataset = wiggle\ndropout = 0\n").is_err());
    }
}
