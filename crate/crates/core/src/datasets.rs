//! Toy generators, CSV ingestion, normalization and train/test splits.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{invalid, Error, Result};
use crate::nn::Task;
use crate::numerics::Matrix;
use crate::objectives::Targets;

pub const TOY_NAMES: [&str; 6] = ["wiggle", "simple1d", "clusters", "foong", "matern", "spirals"];

/// Per-column affine statistics used to standardise a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    /// Present for regression targets only.
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Inputs, targets and a train/test partition of the row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix<f64>,
    pub y: Targets<f64>,
    pub task: Task,
    /// Number of classes (classification) or target columns (regression).
    pub outputs: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Matrix<f64>, y: Targets<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(invalid(format!("{} inputs but {} targets", x.rows(), y.len())));
        }
        let (task, outputs) = match &y {
            Targets::Regression(m) => (Task::Regression, m.cols()),
            Targets::Classification(l) => (Task::Classification, l.iter().max().map_or(0, |m| m + 1)),
        };
        let n = x.rows();
        Ok(Self {
            name: name.into(),
            x,
            y,
            task,
            outputs,
            train: (0..n).collect(),
            test: Vec::new(),
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn train_x(&self) -> Matrix<f64> {
        self.x.select_rows(&self.train)
    }

    pub fn train_y(&self) -> Targets<f64> {
        self.y.select(&self.train)
    }

    pub fn test_x(&self) -> Matrix<f64> {
        self.x.select_rows(&self.test)
    }

    pub fn test_y(&self) -> Targets<f64> {
        self.y.select(&self.test)
    }

    /// Regression targets as a matrix (error for classification).
    pub fn y_matrix(&self) -> Result<&Matrix<f64>> {
        match &self.y {
            Targets::Regression(m) => Ok(m),
            Targets::Classification(_) => Err(invalid("dataset has class labels, not real targets")),
        }
    }

    pub fn labels(&self) -> Result<&[usize]> {
        match &self.y {
            Targets::Classification(l) => Ok(l),
            Targets::Regression(_) => Err(invalid("dataset has real targets, not class labels")),
        }
    }
}

/// How to partition a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Uniformly random split with the given test fraction.
    Standard { test_fraction: f64, seed: u64 },
    /// Middle tercile of `feature` held out.
    Gap { feature: usize },
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        SplitSpec::Standard {
            test_fraction: 0.1,
            seed,
        }
    }
}

/// Noiseless Wiggle function.
pub fn wiggle_mean(x: f64) -> f64 {
    (PI * x).sin() + 0.2 * (4.0 * PI * x).cos() - 0.3 * x
}

pub const WIGGLE_X_MEAN: f64 = 5.0;
pub const WIGGLE_X_VAR: f64 = 2.5;
pub const WIGGLE_NOISE_VAR: f64 = 0.25;

/// Noiseless spiral arm point at parameter `t` for arm `a`.
pub fn spiral_point(t: f64, arm: usize) -> (f64, f64) {
    let theta = 4.0 * PI * t + arm as f64 * PI;
    (t * theta.sin(), t * theta.cos())
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("finite positive std")
}

fn column(values: Vec<f64>) -> Matrix<f64> {
    Matrix::column_vector(values)
}

/// Draws `n` points from one of the toy problems. Deterministic per
/// `(name, n, seed)`.
pub fn generate_toy(name: &str, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(invalid(format!("toy datasets need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "wiggle" => {
            let xd = normal(WIGGLE_X_MEAN, WIGGLE_X_VAR.sqrt());
            let noise = normal(0.0, WIGGLE_NOISE_VAR.sqrt());
            let xs: Vec<f64> = (0..n).map(|_| xd.sample(&mut rng)).collect();
            let ys: Vec<f64> = xs.iter().map(|&x| wiggle_mean(x) + noise.sample(&mut rng)).collect();
            Dataset::new(name, column(xs), Targets::Regression(column(ys)))
        }
        "simple1d" => {
            let ranges = [(-1.0, -0.6), (-0.15, 0.15), (0.6, 1.0)];
            clustered(name, n, &ranges, 0.05, &mut rng, |x| 0.6 * x + 0.4 * (2.5 * x).sin())
        }
        "clusters" => {
            let ranges = [(-7.2, -4.8), (-1.2, 1.2), (4.8, 7.2)];
            clustered(name, n, &ranges, 0.1, &mut rng, |x| (1.5 * x).sin() + 0.1 * x)
        }
        "foong" => {
            let ranges = [(-1.0, -0.7), (0.5, 1.0)];
            clustered(name, n, &ranges, 0.1, &mut rng, |x| (4.0 * x + 0.8).cos())
        }
        "matern" => matern(n, &mut rng),
        "spirals" => {
            let noise = normal(0.0, 0.15);
            let mut rows = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let arm = i % 2;
                let t = 1.0 - rng.random::<f64>();
                let (a, b) = spiral_point(t, arm);
                rows.push(a + noise.sample(&mut rng));
                rows.push(b + noise.sample(&mut rng));
                labels.push(arm);
            }
            let mut ds = Dataset::new(name, Matrix::from_vec(n, 2, rows)?, Targets::Classification(labels))?;
            ds.outputs = 2;
            Ok(ds)
        }
        _ => Err(Error::UnknownDataset {
            name: name.to_string(),
            valid: TOY_NAMES.join(", "),
        }),
    }
}

fn clustered(
    name: &str,
    n: usize,
    ranges: &[(f64, f64)],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
    f: impl Fn(f64) -> f64,
) -> Result<Dataset> {
    let noise = normal(0.0, noise_std);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = ranges[i % ranges.len()];
        let x = Uniform::new(lo, hi).expect("ordered range").sample(rng);
        xs.push(x);
        ys.push(f(x) + noise.sample(rng));
    }
    Dataset::new(name, column(xs), Targets::Regression(column(ys)))
}

pub const MATERN_LENGTHSCALE: f64 = 0.5;
pub const MATERN_NOISE_STD: f64 = 0.05;

/// Matérn 5/2 covariance with unit signal variance.
pub fn matern52(r: f64, lengthscale: f64) -> f64 {
    let s = 5f64.sqrt() * r.abs() / lengthscale;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn matern(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let xs: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
    let k = DMatrix::from_fn(n, n, |i, j| {
        matern52(xs[i] - xs[j], MATERN_LENGTHSCALE) + if i == j { 1e-8 } else { 0.0 }
    });
    let chol = k
        .cholesky()
        .ok_or_else(|| invalid("Matern kernel matrix is not positive definite"))?;
    let std_normal = normal(0.0, 1.0);
    let z = nalgebra::DVector::from_fn(n, |_, _| std_normal.sample(rng));
    let f = chol.l() * z;
    let noise = normal(0.0, MATERN_NOISE_STD);
    let ys: Vec<f64> = f.iter().map(|v| v + noise.sample(rng)).collect();
    Dataset::new("matern", column(xs), Targets::Regression(column(ys)))
}

/// Reads a numeric CSV. `target` defaults to the last column. With
/// `task = Classification` the target cells must be non-negative integers.
/// Row and column numbers in errors are 1-based and count data rows only.
pub fn load_csv(path: &Path, target: Option<usize>, has_header: bool, task: Task) -> Result<Dataset> {
    let csv_err = |msg: String| Error::Csv {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let mut width: Option<usize> = None;
    let mut cells: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let row = i + 1;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(csv_err(format!("row {row} has {} fields, expected {w}", record.len())));
            }
            _ => {}
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                path: path.to_path_buf(),
                row,
                col: j + 1,
                msg: format!("not a number: {cell:?}"),
            })?;
            cells.push(v);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| csv_err("no data rows".into()))?;
    if width < 2 {
        return Err(csv_err("need at least one input column and a target".into()));
    }
    let target = target.unwrap_or(width - 1);
    if target >= width {
        return Err(csv_err(format!("target column {} out of range (width {width})", target + 1)));
    }
    let all = Matrix::from_vec(rows, width, cells)?;
    let inputs: Vec<usize> = (0..width).filter(|&c| c != target).collect();
    let x = Matrix::from_fn(rows, inputs.len(), |r, c| all.get(r, inputs[c]));
    let ycol: Vec<f64> = (0..rows).map(|r| all.get(r, target)).collect();
    let y = match task {
        Task::Regression => Targets::Regression(column(ycol)),
        Task::Classification => {
            let mut labels = Vec::with_capacity(rows);
            for (r, v) in ycol.into_iter().enumerate() {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::CsvCell {
                        path: path.to_path_buf(),
                        row: r + 1,
                        col: target + 1,
                        msg: format!("class label must be a non-negative integer, got {v}"),
                    });
                }
                labels.push(v as usize);
            }
            Targets::Classification(labels)
        }
    };
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
    Dataset::new(name, x, y)
}

/// Writes `x1..xd,y` columns (regression with several targets: `y1..yk`).
/// Values use the shortest representation that parses back exactly.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut header: Vec<String> = (1..=ds.input_dim()).map(|i| format!("x{i}")).collect();
    match &ds.y {
        Targets::Regression(m) if m.cols() > 1 => header.extend((1..=m.cols()).map(|i| format!("y{i}"))),
        _ => header.push("y".into()),
    }
    let io = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    w.write_record(&header).map_err(io)?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(r).iter().map(|v| v.to_string()).collect();
        match &ds.y {
            Targets::Regression(m) => rec.extend(m.row(r).iter().map(|v| v.to_string())),
            Targets::Classification(l) => rec.push(l[r].to_string()),
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn column_stats(m: &Matrix<f64>, rows: &[usize], what: &str) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; m.cols()];
    for &r in rows {
        for (mu, v) in mean.iter_mut().zip(m.row(r)) {
            *mu += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m.cols()];
    for &r in rows {
        for ((s, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    let std = var
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                log::warn!("{what} column {} is constant on the training split; scaling by 1", c + 1);
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardise(m: &Matrix<f64>, mean: &[f64], std: &[f64]) -> Matrix<f64> {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| (m.get(r, c) - mean[c]) / std[c])
}

fn unstandardise(m: &Matrix<f64>, mean: &[f64], std: &[f64]) -> Matrix<f64> {
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) * std[c] + mean[c])
}

/// Standardises inputs (and regression targets) with training-split
/// statistics (population standard deviation).
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    if ds.train.is_empty() {
        return Err(invalid("cannot normalize with an empty training split"));
    }
    if ds.normalization.is_some() {
        return Err(invalid("dataset is already normalized"));
    }
    let (x_mean, x_std) = column_stats(&ds.x, &ds.train, "input");
    let mut out = ds.clone();
    out.x = standardise(&ds.x, &x_mean, &x_std);
    let (y_mean, y_std) = match &ds.y {
        Targets::Regression(y) => {
            let (m, s) = column_stats(y, &ds.train, "target");
            out.y = Targets::Regression(standardise(y, &m, &s));
            (m, s)
        }
        Targets::Classification(_) => (Vec::new(), Vec::new()),
    };
    out.normalization = Some(Normalization {
        x_mean,
        x_std,
        y_mean,
        y_std,
    });
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    let stats = ds
        .normalization
        .as_ref()
        .ok_or_else(|| invalid("dataset is not normalized"))?;
    let mut out = ds.clone();
    out.x = unstandardise(&ds.x, &stats.x_mean, &stats.x_std);
    if let Targets::Regression(y) = &ds.y {
        out.y = Targets::Regression(unstandardise(y, &stats.y_mean, &stats.y_std));
    }
    out.normalization = None;
    Ok(out)
}

/// Partitions rows into train and test.
pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<Dataset> {
    let n = ds.len();
    let mut out = ds.clone();
    match spec {
        SplitSpec::Standard { test_fraction, seed } => {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(invalid(format!("test fraction must lie in (0, 1), got {test_fraction}")));
            }
            let k = (test_fraction * n as f64).round() as usize;
            if k == 0 || k >= n {
                return Err(invalid(format!("a test fraction of {test_fraction} leaves an empty split of {n} rows")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut test = order[..k].to_vec();
            let mut train = order[k..].to_vec();
            test.sort_unstable();
            train.sort_unstable();
            out.train = train;
            out.test = test;
        }
        SplitSpec::Gap { feature } => {
            if feature >= ds.input_dim() {
                return Err(invalid(format!(
                    "gap feature {feature} out of range for {} inputs",
                    ds.input_dim()
                )));
            }
            let values: Vec<f64> = (0..n).map(|r| ds.x.get(r, feature)).collect();
            if values.iter().all(|&v| v == values[0]) {
                return Err(invalid(format!("gap feature {feature} is constant")));
            }
            if n < 3 {
                return Err(invalid("a gap split needs at least 3 rows"));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let (lo, hi) = (n / 3, 2 * n / 3);
            let mut test = order[lo..hi].to_vec();
            let mut train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            test.sort_unstable();
            train.sort_unstable();
            out.train = train;
            out.test = test;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wiggle_formula_points() {
        assert!((wiggle_mean(0.0) - 0.2).abs() < 1e-15);
        assert!((wiggle_mean(0.5) - 1.05).abs() < 1e-12);
    }

    #[test]
    fn spirals_are_balanced() {
        let ds = generate_toy("spirals", 200, 3).unwrap();
        let labels = ds.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 100);
        let mean = labels.iter().sum::<usize>() as f64 / 200.0;
        assert_eq!(mean, 0.5);
        assert_eq!(ds.outputs, 2);
    }

    #[test]
    fn spiral_arms_are_point_reflections() {
        for t in [0.01, 0.3, 0.77, 1.0] {
            let (a, b) = spiral_point(t, 0);
            let (c, d) = spiral_point(t, 1);
            assert!((a + c).abs() < 1e-12 && (b + d).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_deterministic_and_named() {
        for name in TOY_NAMES {
            let a = generate_toy(name, 40, 9).unwrap();
            let b = generate_toy(name, 40, 9).unwrap();
            assert_eq!(a, b, "{name}");
            assert_eq!(a.len(), 40);
            assert!(a.x.all_finite());
        }
        let err = generate_toy("nope", 10, 0).unwrap_err().to_string();
        for name in TOY_NAMES {
            assert!(err.contains(name));
        }
        assert!(generate_toy("wiggle", 1, 0).is_err());
    }

    #[test]
    fn standard_split_sizes() {
        let ds = generate_toy("wiggle", 100, 0).unwrap();
        let s = split(&ds, SplitSpec::standard(1)).unwrap();
        assert_eq!(s.test.len(), 10);
        assert_eq!(s.train.len(), 90);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn gap_split_takes_middle_tercile() {
        let x = Matrix::column_vector((0..99).rev().map(|v| v as f64).collect());
        let y = Targets::Regression(Matrix::zeros(99, 1));
        let ds = Dataset::new("line", x, y).unwrap();
        let s = split(&ds, SplitSpec::Gap { feature: 0 }).unwrap();
        let mut vals: Vec<f64> = s.test.iter().map(|&i| ds.x.get(i, 0)).collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, (33..66).map(|v| v as f64).collect::<Vec<_>>());
        let constant = Dataset::new("c", Matrix::filled(5, 1, 2.0), Targets::Regression(Matrix::zeros(5, 1))).unwrap();
        assert!(split(&constant, SplitSpec::Gap { feature: 0 }).is_err());
        assert!(split(&ds, SplitSpec::Gap { feature: 1 }).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let ds = split(&generate_toy("wiggle", 50, 2).unwrap(), SplitSpec::standard(0)).unwrap();
        let n = normalize(&ds).unwrap();
        let tx = n.train_x();
        let (m, s) = column_stats(&tx, &(0..tx.rows()).collect::<Vec<_>>(), "x");
        assert!(m[0].abs() < 1e-9 && (s[0] - 1.0).abs() < 1e-9);
        let back = denormalize(&n).unwrap();
        for (a, b) in back.x.as_slice().iter().zip(ds.x.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize(&n).is_err());
    }
}
