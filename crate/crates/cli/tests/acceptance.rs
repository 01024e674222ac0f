//! Acceptance criteria 1 to 10. Each test prints one line
//! `criterion N: PASS|FAIL ...` and then asserts on the same outcome.
//!
//! Run with `cargo test -p dun-cli --test acceptance -- --nocapture`.
//! Criteria hold a shared lock so that measured runtimes are not inflated
//! by each other.

use std::fs;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use dun::datasets::{generate_toy, normalize, split, Dataset, SplitSpec, WIGGLE_X_MEAN, WIGGLE_X_VAR};
use dun::metrics::{
    brier, ece, error_rate, moment_match, predictive_entropy, rce, rejection_curve, tce, Prediction, PredictiveGaussian,
};
use dun::model::{exact_posterior, DepthDistribution, DunModel};
use dun::nn::{ArchitectureConfig, Mode};
use dun::numerics::{Matrix, ParamBundle, ParamRole};
use dun::objectives::{elbo, em_e_step, em_m_step, evaluate, loglik_table, mll, Objective, Targets};
use dun::pruning::{predict_truncated, select_depth, PruneStrategy};
use dun::training::{train_dun_mll, train_dun_vi, Data, OptimizerConfig, TrainOptions};
use dun_testkit::dd::{central_differences, widen_matrix, widen_model, widen_objective, widen_targets};
use dun_testkit::{gradient_instance, normal_matrix, oracles, random_instance, Instance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: u32, pass: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let within = elapsed <= limit;
    let ok = pass && within;
    println!(
        "criterion {n}: {} {detail} [runtime {:.1}s, limit {}s]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "criterion {n}: {detail}");
    assert!(within, "criterion {n}: runtime {:.1}s over {}s", elapsed.as_secs_f64(), limit.as_secs());
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

/// Toy-experiment optimiser: full batch, momentum 0.9, lr 1e-3, wd 1e-4.
fn toy_options(epochs: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        optimizer: OptimizerConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        },
        epochs,
        seed,
        ..Default::default()
    }
}

#[test]
fn criterion_01_bound_and_tightness() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (mut worst_bound, mut worst_tight) = (f64::NEG_INFINITY, 0.0f64);
    for seed in 0..200 {
        let inst = random_instance(seed, 5, 16, 32);
        let n = inst.x.rows();
        let table = loglik_table(&inst.model, &inst.x, &inst.y, Mode::Train).unwrap();
        let prior = inst.model.prior();
        let m = mll(&table, prior).unwrap();
        let e = elbo(&table, &inst.q, prior, n).unwrap();
        worst_bound = worst_bound.max(e - m);
        let post = exact_posterior(&table, prior).unwrap();
        worst_tight = worst_tight.max((elbo(&table, &post, prior, n).unwrap() - m).abs());
    }
    let pass = worst_bound <= 1e-9 && worst_tight <= 1e-9;
    verdict(
        1,
        pass,
        start.elapsed(),
        secs(30),
        &format!("200 instances, max(ELBO - MLL) = {worst_bound:.3e}, max |ELBO(posterior) - MLL| = {worst_tight:.3e} (tol 1e-9)"),
    );
}

const FD_EPS: f64 = 1e-7;

/// Worst relative error of analytic gradients against double-double
/// central differences, over all trainable entries.
fn gradient_error(inst: &mut Instance, objective: &Objective<f64>) -> f64 {
    inst.model.zero_grad();
    evaluate(&mut inst.model, &inst.x, &inst.y, objective, Mode::Train, None, true).unwrap();
    let mut analytic = Vec::new();
    inst.model.visit_params(&mut |p| analytic.push(p.grad.as_slice().to_vec()));
    let mut wide = widen_model(&inst.model);
    let (x, y, obj) = (widen_matrix(&inst.x), widen_targets(&inst.y), widen_objective(objective));
    let numeric = central_differences(&mut wide, FD_EPS, |m| {
        evaluate(m, &x, &y, &obj, Mode::Train, None, false).unwrap().loss
    });
    let mut worst = 0.0f64;
    for (a, fd) in analytic.iter().zip(&numeric) {
        let Some(fd) = fd else { continue };
        for (g, n) in a.iter().zip(fd) {
            worst = worst.max((g - n).abs() / (n.abs() + 1e-8));
        }
    }
    worst
}

fn grads(model: &impl ParamBundle<f64>) -> Vec<(ParamRole, f64)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.extend(p.grad.as_slice().iter().map(|&g| (p.role, g))));
    out
}

/// Largest relative deviation between the MLL gradient and the
/// posterior-weighted sum of per-depth log-likelihood gradients.
fn expected_gradient_error(inst: &Instance) -> f64 {
    let n = inst.x.rows();
    let depths = inst.model.max_depth() + 1;
    let mut model = inst.model.clone();
    model.zero_grad();
    let ev = evaluate(&mut model, &inst.x, &inst.y, &Objective::Mll { n_total: n }, Mode::Train, None, true).unwrap();
    let total = grads(&model);
    let post = em_e_step(&ev.table, model.prior()).unwrap();
    let mut combined = vec![0.0; total.len()];
    for i in 0..depths {
        let mut m = inst.model.clone();
        m.zero_grad();
        let obj = Objective::Weighted {
            weights: DepthDistribution::<f64>::delta(depths, i).probs().to_vec(),
            n_total: n,
        };
        evaluate(&mut m, &inst.x, &inst.y, &obj, Mode::Train, None, true).unwrap();
        for (c, (_, g)) in combined.iter_mut().zip(grads(&m)) {
            *c += post.probs()[i] * g;
        }
    }
    let scale = total.iter().map(|(_, g)| g.abs()).fold(0.0, f64::max);
    total
        .iter()
        .zip(&combined)
        .filter(|((role, _), _)| *role != ParamRole::DepthLogits)
        .map(|((_, a), b)| (a - b).abs() / a.abs().max(1e-3 * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_02_gradients() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (mut worst_elbo, mut worst_mll, mut worst_identity) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50 {
        let mut inst = gradient_instance(seed);
        let obj = Objective::Elbo { n_total: inst.x.rows() };
        worst_elbo = worst_elbo.max(gradient_error(&mut inst, &obj));

        let mut inst = gradient_instance(1000 + seed);
        inst.model.variational.frozen = true;
        let obj = Objective::Mll { n_total: inst.x.rows() };
        worst_mll = worst_mll.max(gradient_error(&mut inst, &obj));

        worst_identity = worst_identity.max(expected_gradient_error(&random_instance(2000 + seed, 4, 8, 16)));
    }
    let pass = worst_elbo <= 1e-4 && worst_mll <= 1e-4 && worst_identity <= 1e-6;
    verdict(
        2,
        pass,
        start.elapsed(),
        secs(120),
        &format!(
            "50 instances, ELBO rel err {worst_elbo:.2e}, MLL rel err {worst_mll:.2e} (tol 1e-4), \
             posterior-expected gradient rel err {worst_identity:.2e} (tol 1e-6)"
        ),
    );
}

#[test]
fn criterion_03_single_pass_equivalence() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut mismatches = 0;
    for seed in 0..100 {
        let inst = random_instance(10_000 + seed, 5, 16, 32);
        let all = inst.model.forward_all_depths(&inst.x, Mode::Eval).unwrap();
        for d in 0..=inst.model.max_depth() {
            if all.depth(d).as_slice() != inst.model.subnetwork_forward(&inst.x, d).unwrap().as_slice() {
                mismatches += 1;
            }
        }
    }
    verdict(
        3,
        mismatches == 0,
        start.elapsed(),
        secs(10),
        &format!("100 models, {mismatches} depth slices differ from their subnetwork (exact comparison)"),
    );
}

fn wiggle(n: usize, seed: u64) -> Dataset {
    normalize(&generate_toy("wiggle", n, seed).unwrap()).unwrap()
}

#[test]
fn criterion_04_mll_collapses_vi_spreads() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (mut collapsed, mut spread, mut competitive) = (0, 0, 0);
    let mut rows = Vec::new();
    for seed in 0..5 {
        let ds = wiggle(300, seed);
        let data = Data::new(&ds.x, &ds.y).unwrap();
        let init = DunModel::<f64>::new(ArchitectureConfig::regression(1, 100, 5), seed).unwrap();
        let opts = toy_options(6000, seed);
        let (mut a, mut b) = (init.clone(), init);
        let mll_run = train_dun_mll(&mut a, data, &opts).unwrap();
        let vi_run = train_dun_vi(&mut b, data, &opts).unwrap();
        let (m_last, v_last) = (mll_run.last().unwrap(), vi_run.last().unwrap());

        let max_post = m_last.posterior.iter().cloned().fold(0.0, f64::max);
        let wide = v_last.q.iter().filter(|&&q| q >= 0.05).count();
        let ok_mll = max_post > 0.95;
        let ok_spread = wide >= 2;
        let ok_fit = v_last.mll >= m_last.mll - 0.01 * m_last.mll.abs();
        collapsed += ok_mll as usize;
        spread += ok_spread as usize;
        competitive += ok_fit as usize;
        rows.push(format!(
            "seed {seed}: max posterior {max_post:.4}, depths with q>=0.05: {wide}, MLL(VI) {:.3} vs MLL(MLL) {:.3}",
            v_last.mll, m_last.mll
        ));
    }
    for r in &rows {
        println!("  {r}");
    }
    verdict(
        4,
        collapsed >= 3 && spread >= 3 && competitive >= 3,
        start.elapsed(),
        secs(600),
        &format!(
            "MLL collapse in {collapsed}/5, VI spread in {spread}/5, VI MLL within 1% in {competitive}/5 (need 3/5 each)"
        ),
    );
}

fn regression_gaussians(p: Prediction<f64>) -> Vec<PredictiveGaussian<f64>> {
    match p {
        Prediction::Regression { gaussians, .. } => gaussians,
        Prediction::Classification { .. } => panic!("regression expected"),
    }
}

/// Mean model standard deviation (original target scale) over a grid on
/// `[lo, hi]` in original input units.
fn mean_model_std(model: &DunModel<f64>, ds: &Dataset, q: &DepthDistribution<f64>, lo: f64, hi: f64) -> f64 {
    let stats = ds.normalization.as_ref().unwrap();
    let k = 50;
    let x = Matrix::from_fn(k, 1, |r, _| {
        let raw = lo + (hi - lo) * r as f64 / (k - 1) as f64;
        (raw - stats.x_mean[0]) / stats.x_std[0]
    });
    let pred = model.predict_marginal(&x, q).unwrap().denormalize(&stats.y_mean, &stats.y_std).unwrap();
    regression_gaussians(pred).iter().map(|g| g.model_term.sqrt()).sum::<f64>() / k as f64
}

#[test]
fn criterion_05_error_bars_grow_away_from_data() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (mu, sigma) = (WIGGLE_X_MEAN, WIGGLE_X_VAR.sqrt());
    let mut passed = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let ds = wiggle(300, 100 + seed);
        let mut model = DunModel::<f64>::new(ArchitectureConfig::regression(1, 100, 15), seed).unwrap();
        train_dun_vi(&mut model, Data::new(&ds.x, &ds.y).unwrap(), &toy_options(6000, seed)).unwrap();
        let q = model.variational();
        let stats = ds.normalization.clone().unwrap();

        let fit = model.predict_marginal(&ds.x, &q).unwrap().denormalize(&stats.y_mean, &stats.y_std).unwrap();
        let Targets::Regression(y) = &ds.y else { unreachable!() };
        let sq: f64 = regression_gaussians(fit)
            .iter()
            .zip(y.as_slice())
            .map(|(g, t)| (g.mean - (t * stats.y_std[0] + stats.y_mean[0])).powi(2))
            .sum();
        let rmse = (sq / y.rows() as f64).sqrt();
        let inner = mean_model_std(&model, &ds, &q, mu - sigma, mu + sigma);
        let outer = mean_model_std(&model, &ds, &q, mu + 3.0 * sigma, mu + 4.0 * sigma);
        let ratio = outer / inner;
        let ok = rmse <= 0.65 && ratio >= 2.0;
        passed += ok as usize;
        rows.push(format!("seed {seed}: train RMSE {rmse:.4}, model std ratio {ratio:.3} ({outer:.4} / {inner:.4})"));
    }
    for r in &rows {
        println!("  {r}");
    }
    verdict(
        5,
        passed >= 3,
        start.elapsed(),
        secs(900),
        &format!("{passed}/5 seeds with train RMSE <= 0.65 and model std ratio >= 2 (need 3/5)"),
    );
}

fn accuracy(p: &Prediction<f64>, labels: &[usize]) -> f64 {
    let Prediction::Classification { probs } = p else {
        panic!("classification expected")
    };
    1.0 - error_rate(probs, labels).unwrap()
}

#[test]
fn criterion_06_pruned_spirals_match_full_marginal() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut passed = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let raw = generate_toy("spirals", 2000, 200 + seed).unwrap();
        let parts = split(
            &raw,
            SplitSpec::Standard {
                test_fraction: 0.9,
                seed,
            },
        )
        .unwrap();
        let ds = normalize(&parts).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (200, 1800));
        let config = ArchitectureConfig::classification(2, 20, 30, 2);
        let mut model = DunModel::<f64>::new(config, seed).unwrap();
        let (x, y) = (ds.train_x(), ds.train_y());
        train_dun_vi(&mut model, Data::new(&x, &y).unwrap(), &toy_options(6000, seed)).unwrap();

        let q = model.variational();
        let d_opt = select_depth(&q, PruneStrategy::PERCENTILE95).unwrap();
        let test = ds.test_x();
        let labels = ds.test_y();
        let labels = match &labels {
            Targets::Classification(l) => l.clone(),
            Targets::Regression(_) => unreachable!(),
        };
        let full = accuracy(&model.predict_marginal(&test, &q).unwrap(), &labels);
        let pruned = accuracy(&predict_truncated(&model, &test, &q, d_opt).unwrap(), &labels);
        let ok = (full - pruned).abs() <= 0.02 && d_opt >= 5;
        passed += ok as usize;
        rows.push(format!("seed {seed}: d_opt {d_opt}, full accuracy {full:.4}, pruned accuracy {pruned:.4}"));
    }
    for r in &rows {
        println!("  {r}");
    }
    verdict(
        6,
        passed >= 3,
        start.elapsed(),
        secs(1200),
        &format!("{passed}/5 seeds with |pruned - full| accuracy <= 2 points and d_opt >= 5 (need 3/5)"),
    );
}

#[test]
fn criterion_07_metric_oracles() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let mut worst_exact = 0.0f64;
    let mut worst_z = 0.0f64;
    let mut over = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let values = oracles::random_cdf_values(&mut rng, n);
        let tau = rng.random_range(0.01..0.49);
        let bins = rng.random_range(2..=20);
        let k = rng.random_range(2..=6);
        let probs = oracles::random_probs(&mut rng, n, k);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let entropies: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.25).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();

        let mut diffs = vec![
            tce(&values, tau).unwrap() - oracles::tce(&values, tau),
            rce(&values, bins).unwrap() - oracles::rce(&values, bins),
            brier(&probs, &labels).unwrap() - oracles::brier(&probs, &labels),
            ece(&probs, &labels, bins).unwrap() - oracles::ece(&probs, &labels, bins),
        ];
        diffs.extend((0..n).map(|r| predictive_entropy(probs.row(r)) - oracles::entropy(probs.row(r))));
        let curve = rejection_curve(&entropies, &correct, &grid).unwrap();
        let want = oracles::rejection_curve(&entropies, &correct, &grid);
        diffs.extend(curve.iter().zip(&want).map(|((_, a), (_, b))| a - b));
        worst_exact = diffs.iter().map(|d| d.abs()).fold(worst_exact, f64::max);

        let m = rng.random_range(1..=6);
        let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
        let means: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let noise_var = rng.random_range(0.05..2.0);
        let g = moment_match(&weights, &means, noise_var).unwrap();
        let mc = oracles::sample_mixture(&weights, &means, noise_var, 100_000, &mut rng);
        for z in [(g.mean - mc.mean) / mc.mean_se, (g.variance - mc.variance) / mc.variance_se] {
            worst_z = worst_z.max(z.abs());
            over += (z.abs() > 3.0) as usize;
        }
    }
    verdict(
        7,
        worst_exact <= 1e-12 && over == 0,
        start.elapsed(),
        secs(60),
        &format!(
            "100 instances, combinatorial max |diff| {worst_exact:.2e} (tol 1e-12), \
             moment matching max |z| {worst_z:.2} with {over} beyond 3 SE"
        ),
    );
}

#[test]
fn criterion_08_em_monotonicity() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let config = ArchitectureConfig {
        batchnorm: false,
        ..ArchitectureConfig::regression(1, 2, 1)
    };
    let mut model = DunModel::<f64>::new(config, 5).unwrap();
    let x = normal_matrix(8, 1, &mut ChaCha8Rng::seed_from_u64(1));
    let y = Targets::Regression(x.map(|v| (2.0 * v).sin()));
    let mut trace = Vec::new();
    for _ in 0..50 {
        let t = loglik_table(&model, &x, &y, Mode::Train).unwrap();
        trace.push(mll(&t, model.prior()).unwrap());
        let post = em_e_step(&t, model.prior()).unwrap();
        em_m_step(&mut model, &x, &y, &post, 5, 0.05).unwrap();
    }
    let t = loglik_table(&model, &x, &y, Mode::Train).unwrap();
    trace.push(mll(&t, model.prior()).unwrap());
    let worst_drop = trace.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    verdict(
        8,
        worst_drop <= 1e-10,
        start.elapsed(),
        secs(30),
        &format!(
            "50 E/M iterations, MLL {:.6} -> {:.6}, largest decrease {worst_drop:.2e} (tol 1e-10)",
            trace[0],
            trace[trace.len() - 1]
        ),
    );
}

#[test]
fn criterion_09_train_is_deterministic() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        ("vi", "method = dun_vi\ndataset = wiggle\nn = 120\nwidth = 16\ndepth = 4\ndropout = 0.1\nbatch_size = 32\nepochs = 30\nlr = 5e-3\nseeds = 0, 1, 2\n"),
        ("mll", "method = dun_mll\ndataset = spirals\nn = 150\nsplit = standard\nwidth = 12\ndepth = 3\nepochs = 40\nlr = 1e-2\nseeds = 3\n"),
        ("ens", "method = depth_ensemble\ndataset = matern\nn = 80\nwidth = 8\ndepth = 4\nensemble_size = 3\nbatch_size = 20\nepochs = 20\nseeds = 4\n"),
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, text) in configs {
        let cfg = dir.path().join(format!("{name}.cfg"));
        fs::write(&cfg, text).unwrap();
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("{name}_{rep}"));
            let status = Command::new(env!("CARGO_BIN_EXE_dun"))
                .args(["train"])
                .arg(&cfg)
                .arg("--out")
                .arg(&out)
                .args(["--threads", "1"])
                .status()
                .unwrap();
            assert!(status.success(), "{name} run {rep}");
            let mut traces: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
                .unwrap()
                .map(|e| e.unwrap())
                .filter(|e| e.file_name().to_string_lossy().starts_with("trace_"))
                .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
                .collect();
            traces.sort();
            runs.push(traces);
        }
        assert_eq!(runs[0].len(), runs[1].len());
        for ((a_name, a), (b_name, b)) in runs[0].iter().zip(&runs[1]) {
            assert_eq!(a_name, b_name);
            compared += 1;
            if a != b {
                differing.push(format!("{name}/{a_name}"));
            }
        }
    }
    verdict(
        9,
        differing.is_empty() && compared > 0,
        start.elapsed(),
        secs(120),
        &format!("{compared} trace files compared across repeated runs with --threads 1, differing: {differing:?}"),
    );
}

#[test]
fn criterion_10_out_of_scope_declaration() {
    println!(
        "criterion 10: DECLARED not reproduced: UCI regression benchmark tables, the flights regression table and \
         all image-classification results (they need Bayesian hyperparameter search, large datasets or ResNet-50); \
         the methods behind them are exercised by criteria 1-9"
    );
}
