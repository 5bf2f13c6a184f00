use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use xsdc::balancing::{self, BalancingProblem, KnownEntry, DEFAULT_ROUNDS, MAX_MU_DOUBLINGS};
use xsdc::data::Split;
use xsdc::gradcheck::{self, Sizes};
use xsdc::io::write_atomic;
use xsdc::linalg::{self, DenseMatrix};
use xsdc::trainer::{self, Checkpoint, Mode, SweepGrids, TrainConfig};
use xsdc::ulr;
use xsdc::{Error, Result};

use crate::config::RunConfigFile;
use crate::{progress, Failure};

pub struct Common {
    pub config: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> std::result::Result<RunConfigFile, Failure> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Failure::usage("this command needs --config"))?;
        let mut cfg = RunConfigFile::load(path)?;
        if let Some(seed) = self.seed_override {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&RunConfigFile>) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn train(common: &Common, force_unsupervised: bool) -> std::result::Result<(), Failure> {
    let mut cfg = common.run_config()?;
    if force_unsupervised {
        cfg.mode = Mode::Unsupervised;
        cfg.train.mode = Mode::Unsupervised;
    }
    let out = common.out_dir(Some(&cfg))?;
    let ds = cfg.dataset()?;
    progress(json!({"event": "start", "dataset": ds.name, "rows": ds.n(), "mode": cfg.mode, "seed": cfg.train.seed}));

    let outcome = match trainer::train(&ds, &cfg.train) {
        Ok(o) => o,
        Err(Error::Aborted { reason, partial }) => {
            write_atomic(&out.join("metrics.csv"), partial.to_csv().as_bytes())?;
            return Err(Error::Aborted { reason, partial }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let metrics = &outcome.metrics;
    for e in &metrics.evals {
        progress(json!({"event": "eval", "iteration": e.iteration, "split": e.split, "accuracy": e.accuracy}));
    }

    let state = &outcome.state;
    let checkpoint = state.best_checkpoint.clone().unwrap_or_else(|| {
        Checkpoint::capture(&state.layer, state.classifier.as_ref(), state.iteration, Some(&cfg.train))
    });
    write_atomic(&out.join("metrics.csv"), metrics.to_csv().as_bytes())?;
    checkpoint.save(&out.join("checkpoint.json"))?;
    write_atomic(&out.join("labels.csv"), trainer::labels_csv(&outcome.final_labels).as_bytes())?;
    let summary = json!({
        "dataset": ds.name,
        "mode": cfg.mode,
        "seed": cfg.train.seed,
        "best_val_accuracy": metrics.best_val_accuracy,
        "best_iteration": metrics.best_iteration,
        "test_at_best_val": metrics.test_at_best_val,
        "init_val_accuracy": metrics.init_val_accuracy,
        "init_test_accuracy": metrics.init_test_accuracy,
        "max_test_accuracy": metrics.max_test_accuracy,
        "hungarian_matched": metrics.unsupervised,
        "accuracy_trajectory": {
            "val": metrics.accuracy_trajectory(Split::Val),
            "test": metrics.accuracy_trajectory(Split::Test),
        },
        "lambda": state.lambda,
        "lambda_history": metrics.lambda_history,
        "config": cfg,
    });
    write_json(&out.join("summary.json"), &summary)?;
    progress(json!({"event": "done", "out_dir": out}));
    Ok(())
}

pub fn sweep(common: &Common, grids: Option<&Path>) -> std::result::Result<(), Failure> {
    let cfg = common.run_config()?;
    let grids: SweepGrids = match grids {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(Error::from)?,
        None => SweepGrids::default(),
    };
    let out = common.out_dir(Some(&cfg))?;
    let ds = cfg.dataset()?;
    progress(json!({"event": "start", "dataset": ds.name, "mode": cfg.mode}));
    let report = trainer::sweep(&ds, &grids, &cfg.train)?;
    write_atomic(&out.join("sweep.csv"), report.to_csv().as_bytes())?;
    let best = RunConfigFile {
        train: TrainConfig {
            seed: cfg.train.seed,
            ..report.best.clone()
        },
        ..cfg
    };
    write_json(&out.join("best_config.json"), &best)?;
    progress(json!({"event": "done", "hungarian_matched": report.unsupervised, "out_dir": out}));
    Ok(())
}

fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: line + 1,
            message: e.to_string(),
        })?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Parse {
                line: line + 1,
                message: format!("expected {} fields, found {}", cols.unwrap_or(0), rec.len()),
            });
        }
        for field in rec.iter() {
            values.push(field.parse::<f64>().map_err(|_| Error::Parse {
                line: line + 1,
                message: format!("not a number: {field:?}"),
            })?);
        }
        rows += 1;
    }
    linalg::from_row_major(rows, cols.unwrap_or(0), &values)
}

fn read_constraints(path: &Path) -> Result<Vec<KnownEntry>> {
    let m = read_matrix(path)?;
    if m.nrows() > 0 && m.ncols() != 3 {
        return Err(Error::Parse {
            line: 1,
            message: "constraint rows are `i,j,value`".into(),
        });
    }
    let mut out = Vec::with_capacity(m.nrows());
    for r in 0..m.nrows() {
        let index = |c: usize| {
            let v = m[(r, c)];
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse {
                    line: r + 1,
                    message: format!("index {v} is not a nonnegative integer"),
                })
            }
        };
        out.push(KnownEntry::new(index(0)?, index(1)?, m[(r, 2)]));
    }
    Ok(out)
}

pub struct BalanceArgs {
    pub a: PathBuf,
    pub constraints: Option<PathBuf>,
    pub n_min: f64,
    pub n_max: f64,
    pub mu: Option<f64>,
    pub iters: Option<usize>,
}

pub fn balance(common: &Common, args: &BalanceArgs) -> std::result::Result<(), Failure> {
    let a = read_matrix(&args.a)?;
    let n = a.nrows();
    let mut known = match &args.constraints {
        Some(p) => read_constraints(p)?,
        None => Vec::new(),
    };
    for i in 0..n {
        if !known.iter().any(|e| e.i == i && e.j == i) {
            known.push(KnownEntry::new(i, i, 1.0));
        }
    }
    let mu = args.mu.unwrap_or_else(|| balancing::default_mu(&a).mu);
    let problem = BalancingProblem::new(a, known, args.n_min, args.n_max, mu)?.with_iters(args.iters.unwrap_or(DEFAULT_ROUNDS));
    let outcome = balancing::balance_with_doubling(&problem, MAX_MU_DOUBLINGS)?;
    let r = &outcome.result;
    for (round, dual) in r.dual_trajectory.iter().enumerate() {
        println!("{}", json!({"round": round + 1, "dual": dual}));
    }
    let report = json!({
        "n": n,
        "converged": r.converged,
        "marginal_violation": r.marginal_violation,
        "known_violation": r.known_violation,
        "initial_mu": outcome.initial_mu,
        "mu": r.mu,
        "mu_doublings": outcome.doublings,
        "dual_trajectory": r.dual_trajectory,
    });
    println!("{report}");
    let out = common.out_dir(None)?;
    let mut csv = String::new();
    for i in 0..n {
        let row: Vec<String> = r.m.row(i).iter().map(|v| v.to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_atomic(&out.join("M.csv"), csv.as_bytes())?;
    write_json(&out.join("balance_report.json"), &report)?;
    Ok(())
}

pub fn gradcheck(common: &Common, seed: u64, sizes: Sizes, flip_sign: bool) -> std::result::Result<(), Failure> {
    let seed = common.seed_override.unwrap_or(seed);
    let results = gradcheck::run_all(seed, sizes, flip_sign)?;
    for r in &results {
        println!("{}", serde_json::to_string(r).map_err(Error::from)?);
    }
    let failing: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    if failing.is_empty() {
        return Ok(());
    }
    let detail: Vec<_> = failing
        .iter()
        .map(|r| json!({"suite": r.name, "coordinate": [r.worst.0, r.worst.1], "relative_error": r.max_rel_error, "tolerance": r.tolerance}))
        .collect();
    Err(Failure::verification("gradient check failed", json!(detail)))
}

pub struct SmoothnessArgs {
    pub b: f64,
    pub n: usize,
    pub n_max: usize,
    pub lambda: f64,
    pub samples: usize,
    pub d: usize,
    pub seed: u64,
}

pub fn smoothness(common: &Common, args: &SmoothnessArgs) -> std::result::Result<(), Failure> {
    let seed = common.seed_override.unwrap_or(args.seed);
    let r = ulr::smoothness_check(args.b, args.n, args.n_max, args.lambda, args.d, args.samples, seed)?;
    let report = json!({
        "L_f": r.bounds.l_f,
        "L_r": r.bounds.l_r,
        "ell_f": r.bounds.ell_f,
        "ell_r": r.bounds.ell_r,
        "objective_crossover_lambda": r.bounds.objective_crossover,
        "gradient_crossover_lambda": r.bounds.gradient_crossover,
        "samples": r.samples,
        "observed_B": r.observed_b,
        "max_grad_f": r.max_grad_f,
        "max_grad_r": r.max_grad_r,
        "max_ratio_f": r.max_ratio_f,
        "max_ratio_r": r.max_ratio_r,
        "passed": r.passed,
    });
    println!("{report}");
    if r.passed {
        Ok(())
    } else {
        Err(Failure::verification("empirical smoothness exceeds a bound", report))
    }
}
