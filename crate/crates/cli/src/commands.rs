//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use dun::datasets::{generate_toy, write_csv};
use dun::pruning::{select_depth, PruneStrategy};
use dun::training::{sig17, train_dun_mll, train_dun_vi, Data, RunRecord};
use dun::{CalibrationReport, Model, Task};
use log::info;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};
use crate::experiment::{architecture, evaluate, prepare, reports_csv, train_options, PredictOptions, Prepared, Trained};
use crate::svg::{render, Panel, Series};
use crate::{Cli, CliError, Command};

struct Context {
    seed_override: Option<u64>,
    out: Option<PathBuf>,
    pool: rayon::ThreadPool,
}

impl Context {
    fn load(&self, path: &Path) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = self.seed_override {
            cfg.seeds = vec![s];
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }

    /// Runs `f` for every seed on the worker pool. Results keep seed order
    /// and the first failure in that order is returned.
    fn per_seed<T: Send>(
        &self,
        seeds: &[u64],
        f: impl Fn(u64) -> Result<T, CliError> + Sync,
    ) -> Result<Vec<T>, CliError> {
        let results: Vec<Result<T, CliError>> = self.pool.install(|| seeds.par_iter().map(|&s| f(s)).collect());
        results.into_iter().collect()
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("DUN_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("DUN_THREADS must be an integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let ctx = Context {
        seed_override: cli.seed_override,
        out: cli.out,
        pool,
    };
    match cli.command {
        Command::Train { config } => train(&ctx, &config),
        Command::Eval {
            checkpoint,
            config,
            exact_posterior,
            prune,
        } => {
            let prune = prune
                .map(|s| {
                    PruneStrategy::parse(&s).ok_or_else(|| {
                        CliError::usage(format!("unknown prune strategy `{s}`; expected argmax, percentile95 or expected"))
                    })
                })
                .transpose()?;
            eval(&ctx, &checkpoint, &config, PredictOptions { exact_posterior, prune })
        }
        Command::CompareObjectives { config } => compare_objectives(&ctx, &config),
        Command::SweepDepth { config } => sweep_depth(&ctx, &config),
        Command::GenData {
            name,
            n,
            data_seed,
            output,
        } => gen_data(&ctx, &name, n, data_seed, output),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn train(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let cfg = ctx.load(path)?;
    let prep = prepare(&cfg)?;
    fs::create_dir_all(&cfg.out)?;
    ctx.per_seed(&cfg.seeds, |seed| {
        info!("training {} seed {seed}", cfg.method.as_str());
        let (trained, records) = crate::experiment::train_seed(&cfg, &prep, seed)?;
        for (i, r) in records.iter().enumerate() {
            let name = if i == 0 {
                format!("trace_{seed}.csv")
            } else {
                format!("trace_{seed}_member{i}.csv")
            };
            write(&cfg.out.join(name), r.to_csv())?;
        }
        trained.save(&cfg.out.join(format!("model_{seed}.ckpt")))?;
        let report = evaluate(&cfg, &prep, &trained, cfg.method.as_str(), PredictOptions::default())?;
        write(&cfg.out.join(format!("report_{seed}.csv")), reports_csv(&[report]))
    })?;
    Ok(())
}

fn eval(ctx: &Context, checkpoint: &Path, config: &Path, opts: PredictOptions) -> Result<(), CliError> {
    let cfg = ctx.load(config)?;
    let prep = prepare(&cfg)?;
    let trained = Trained::load(checkpoint)?;
    trained.check_compatible(&prep.model)?;
    let report = evaluate(&cfg, &prep, &trained, cfg.method.as_str(), opts)?;
    let text = reports_csv(&[report]);
    print!("{text}");
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out)?;
        write(&out.join(format!("eval_{}.csv", trained.seed())), text)?;
    }
    Ok(())
}

fn train_dun(cfg: &ExperimentConfig, prep: &Prepared, model: &mut Model, seed: u64, mll: bool) -> Result<RunRecord, CliError> {
    let (x, y) = (prep.train_x(), prep.train_y());
    let data = Data::new(&x, &y)?;
    let opts = train_options(cfg, seed);
    Ok(if mll {
        train_dun_mll(model, data, &opts)?
    } else {
        train_dun_vi(model, data, &opts)?
    })
}

/// `q` trajectories of a record, one series per depth.
fn depth_series(record: &RunRecord) -> Vec<Series> {
    let depths = record.rows.first().map_or(0, |r| r.q.len());
    (0..depths)
        .map(|i| {
            Series::line(
                format!("d={i}"),
                record.rows.iter().map(|r| (r.epoch as f64, r.q[i])).collect(),
            )
        })
        .collect()
}

fn compare_objectives(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let cfg = ctx.load(path)?;
    let prep = prepare(&cfg)?;
    fs::create_dir_all(&cfg.out)?;
    ctx.per_seed(&cfg.seeds, |seed| {
        let init = Model::new(architecture(&cfg, &prep.model, cfg.depth), seed)?;
        let (mut mll_model, mut vi_model) = (init.clone(), init);
        info!("compare-objectives seed {seed}: MLL run");
        let mll = train_dun(&cfg, &prep, &mut mll_model, seed, true)?;
        info!("compare-objectives seed {seed}: VI run");
        let vi = train_dun(&cfg, &prep, &mut vi_model, seed, false)?;

        let mut csv = String::new();
        for (name, record) in [("mll", &mll), ("vi", &vi)] {
            let body = record.to_csv();
            let mut lines = body.lines();
            let header = lines.next().unwrap_or_default();
            if csv.is_empty() {
                csv.push_str(&format!("run,{header}\n"));
            }
            for l in lines {
                csv.push_str(&format!("{name},{l}\n"));
            }
        }
        write(&cfg.out.join(format!("compare_{seed}.csv")), csv)?;

        let curve = |r: &RunRecord, f: fn(&dun::training::EpochRecord) -> f64| -> Vec<(f64, f64)> {
            r.rows.iter().map(|row| (row.epoch as f64, f(row))).collect()
        };
        let panels = [
            Panel {
                title: "MLL training".into(),
                x_label: "epoch".into(),
                y_label: "objective".into(),
                series: vec![Series::line("MLL", curve(&mll, |r| r.mll))],
            },
            Panel {
                title: "VI training".into(),
                x_label: "epoch".into(),
                y_label: "objective".into(),
                series: vec![
                    Series::line("MLL", curve(&vi, |r| r.mll)),
                    Series::line("ELBO", curve(&vi, |r| r.elbo)),
                ],
            },
            Panel {
                title: "posterior over depth (MLL)".into(),
                x_label: "epoch".into(),
                y_label: "probability".into(),
                series: depth_series(&mll),
            },
            Panel {
                title: "q over depth (VI)".into(),
                x_label: "epoch".into(),
                y_label: "probability".into(),
                series: depth_series(&vi),
            },
        ];
        write(&cfg.out.join(format!("compare_{seed}.svg")), render(&panels, 2))
    })?;
    Ok(())
}

fn test_err(task: Task, r: &CalibrationReport) -> f64 {
    match task {
        Task::Classification => r.err,
        Task::Regression => r.rmse,
    }
    .unwrap_or(f64::NAN)
}

fn sweep_depth(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let cfg = ctx.load(path)?;
    if !cfg.method.is_dun() {
        return Err(CliError::usage(format!(
            "sweep-depth trains a DUN next to the fixed-depth networks; method must be dun_vi or dun_mll, got {}",
            cfg.method.as_str()
        )));
    }
    let prep = prepare(&cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let task = prep.model.task;
    ctx.per_seed(&cfg.seeds, |seed| {
        let mut reports = Vec::new();
        let mut table = String::from("depth,test_ll,test_err\n");
        let (x, y) = (prep.train_x(), prep.train_y());
        let data = Data::new(&x, &y)?;
        for d in cfg.depth_min..=cfg.depth_max {
            info!("sweep-depth seed {seed}: depth {d}");
            let arch = architecture(&cfg, &prep.model, d);
            let (member, _) = dun::baselines::train_member(arch, seed, data, &train_options(&cfg, seed))?;
            let fixed = ExperimentConfig {
                method: Method::Vanilla,
                ..cfg.clone()
            };
            let report = evaluate(&fixed, &prep, &Trained::Single(member), &format!("ddn_{d}"), PredictOptions::default())?;
            table.push_str(&format!(
                "{d},{},{}\n",
                sig17(report.ll.unwrap_or(f64::NAN)),
                sig17(test_err(task, &report))
            ));
            reports.push(report);
        }

        info!("sweep-depth seed {seed}: DUN");
        let mut model = Model::new(architecture(&cfg, &prep.model, cfg.depth_max), seed)?;
        train_dun(&cfg, &prep, &mut model, seed, cfg.method == Method::DunMll)?;
        let q = model.variational();
        let trained = Trained::Single(model);
        trained.save(&cfg.out.join(format!("sweep_dun_{seed}.ckpt")))?;
        let dun_report = evaluate(&cfg, &prep, &trained, cfg.method.as_str(), PredictOptions::default())?;

        let mut posterior = String::from("depth,q\n");
        for (i, p) in q.probs().iter().enumerate() {
            posterior.push_str(&format!("{i},{}\n", sig17(*p)));
        }
        let mut dopt = String::from("strategy,d_opt\n");
        for s in PruneStrategy::all() {
            dopt.push_str(&format!("{},{}\n", s.name(), select_depth(&q, s)?));
        }

        let ll_points: Vec<(f64, f64)> = reports.iter().zip(cfg.depth_min..).map(|(r, d)| (d as f64, r.ll.unwrap_or(f64::NAN))).collect();
        let dun_ll = dun_report.ll.unwrap_or(f64::NAN);
        let panels = [
            Panel {
                title: "test log-likelihood".into(),
                x_label: "depth".into(),
                y_label: "LL".into(),
                series: vec![
                    Series::line("fixed depth", ll_points),
                    Series::line(
                        "DUN",
                        vec![(cfg.depth_min as f64, dun_ll), (cfg.depth_max as f64, dun_ll)],
                    ),
                ],
            },
            Panel {
                title: "DUN depth posterior".into(),
                x_label: "depth".into(),
                y_label: "probability".into(),
                series: vec![Series::bars(
                    "q",
                    q.probs().iter().enumerate().map(|(i, &p)| (i as f64, p)).collect(),
                )],
            },
        ];
        reports.push(dun_report);

        write(&cfg.out.join(format!("sweep_{seed}.csv")), table)?;
        write(&cfg.out.join(format!("sweep_posterior_{seed}.csv")), posterior)?;
        write(&cfg.out.join(format!("sweep_dopt_{seed}.csv")), dopt)?;
        write(&cfg.out.join(format!("sweep_reports_{seed}.csv")), reports_csv(&reports))?;
        write(&cfg.out.join(format!("sweep_{seed}.svg")), render(&panels, 2))
    })?;
    Ok(())
}

fn gen_data(ctx: &Context, name: &str, n: usize, seed: u64, output: Option<PathBuf>) -> Result<(), CliError> {
    let ds = generate_toy(name, n, seed)?;
    let path = match output {
        Some(p) => p,
        None => {
            let dir = ctx.out.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir)?;
            dir.join(format!("{name}.csv"))
        }
    };
    write_csv(&ds, &path)?;
    info!("wrote {} rows to {}", ds.len(), path.display());
    Ok(())
}
