//! Brute-force reference implementations of the evaluation metrics,
//! written without sharing code or structure with the library.

use dun::numerics::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tce(values: &[f64], tau: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let lower = sorted.partition_point(|&v| v < tau) as f64;
    let upper = (sorted.len() - sorted.partition_point(|&v| v < 1.0 - tau)) as f64;
    if lower + upper == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for count in [lower, upper] {
        let weight = count / (lower + upper);
        total += weight * (tau - count / n).abs();
    }
    total
}

pub fn rce(values: &[f64], bins: usize) -> f64 {
    let n = values.len() as f64;
    let mut total = 0.0;
    for s in 0..bins {
        let lo = s as f64 / bins as f64;
        let hi = (s + 1) as f64 / bins as f64;
        let last = s + 1 == bins;
        let count = values
            .iter()
            .filter(|&&v| v >= lo && (v < hi || (last && v <= 1.0)))
            .count() as f64;
        total += count / n * (1.0 / bins as f64 - count / n).abs();
    }
    total
}

pub fn brier(probs: &Matrix<f64>, labels: &[usize]) -> f64 {
    let k = probs.cols();
    let mut total = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let mut one_hot = vec![0.0; k];
        one_hot[label] = 1.0;
        let mut sq = 0.0;
        for c in 0..k {
            sq += (probs.get(n, c) - one_hot[c]).powi(2);
        }
        total += sq / k as f64;
    }
    total / labels.len() as f64
}

fn top(row: &[f64]) -> (usize, f64) {
    let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (row.iter().position(|&v| v == best).unwrap(), best)
}

pub fn ece(probs: &Matrix<f64>, labels: &[usize], bins: usize) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for s in 0..bins {
        let lo = s as f64 / bins as f64;
        let hi = (s + 1) as f64 / bins as f64;
        let last = s + 1 == bins;
        let members: Vec<usize> = (0..labels.len())
            .filter(|&i| {
                let c = top(probs.row(i)).1;
                c >= lo && (c < hi || (last && c <= 1.0))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| top(probs.row(i)).0 == labels[i]).count() as f64 / m;
        let conf = members.iter().map(|&i| top(probs.row(i)).1).sum::<f64>() / m;
        total += m / n * (acc - conf).abs();
    }
    total
}

pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| if p == 0.0 { 0.0 } else { p * (1.0 / p).ln() }).sum()
}

/// Rejects point `i` at fraction `r` iff fewer than `⌈rN⌉` points precede
/// it in the (entropy descending, index ascending) order.
pub fn rejection_curve(entropies: &[f64], correct: &[bool], grid: &[f64]) -> Vec<(f64, f64)> {
    let n = entropies.len();
    grid.iter()
        .map(|&r| {
            let k = (0..=n).find(|&k| k as f64 >= r * n as f64 - 1e-9).unwrap();
            let mut kept = 0usize;
            let mut right = 0usize;
            for i in 0..n {
                let rank = (0..n)
                    .filter(|&j| entropies[j] > entropies[i] || (entropies[j] == entropies[i] && j < i))
                    .count();
                if rank >= k {
                    kept += 1;
                    right += correct[i] as usize;
                }
            }
            (r, if kept == 0 { 1.0 } else { right as f64 / kept as f64 })
        })
        .collect()
}

/// Monte Carlo moments of a Gaussian mixture.
pub struct MixtureEstimate {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
}

pub fn sample_mixture(weights: &[f64], means: &[f64], noise_var: f64, samples: usize, rng: &mut ChaCha8Rng) -> MixtureEstimate {
    let noise = Normal::new(0.0, noise_var.sqrt()).unwrap();
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = weights.len() - 1;
            for (i, &w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            means[pick] + noise.sample(rng)
        })
        .collect();
    let n = samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let m2 = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let m4 = draws.iter().map(|d| (d - mean).powi(4)).sum::<f64>() / n;
    MixtureEstimate {
        mean,
        variance: m2 * n / (n - 1.0),
        mean_se: (m2 / n).sqrt(),
        variance_se: ((m4 - m2 * m2) / n).sqrt(),
    }
}

pub fn random_cdf_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match rng.random_range(0..20) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random(),
        })
        .collect()
}

/// Random probability rows, some of them one-hot or with tied maxima.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Matrix<f64> {
    let mut rows = Vec::with_capacity(n * k);
    for _ in 0..n {
        let kind = rng.random_range(0..10);
        let raw: Vec<f64> = match kind {
            0 => {
                let hot = rng.random_range(0..k);
                (0..k).map(|c| if c == hot { 1.0 } else { 0.0 }).collect()
            }
            1 => vec![1.0; k],
            _ => (0..k).map(|_| rng.random::<f64>().powi(3)).collect(),
        };
        let z: f64 = raw.iter().sum();
        rows.extend(raw.iter().map(|v| v / z));
    }
    Matrix::from_vec(n, k, rows).unwrap()
}
