use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use xsdc::balancing::{self, BalancingProblem};
use xsdc::data::{self, BlobSpec, Dataset, Split};
use xsdc::features;
use xsdc::gradcheck::{self, Sizes};
use xsdc::labeling::{self, one_hot};
use xsdc::linalg::{self, DenseMatrix};
use xsdc::stats::mean;
use xsdc::trainer::{self, BalanceSettings, BatchSampler, Mode, PairConstraint, TrainConfig, TrainState};
use xsdc::ulr::{self, UlrConfig};

fn report(id: u32, passed: bool, elapsed: Duration, limit: Option<Duration>, detail: String) {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let verdict = if passed && in_time { "PASS" } else { "FAIL" };
    let budget = limit.map(|l| format!(" / {}s", l.as_secs())).unwrap_or_default();
    println!(
        "criterion {id}: {verdict} | {detail} | {:.2}s{budget}",
        elapsed.as_secs_f64()
    );
    assert!(passed, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} exceeded its runtime budget");
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn centering(n: usize) -> DenseMatrix {
    DenseMatrix::identity(n, n) - DenseMatrix::from_element(n, n, 1.0 / n as f64)
}

/// Primal ridge objective and `λ·tr[YYᵀA]`, both by explicit inverses.
fn ridge_and_dual(phi: &DenseMatrix, y: &DenseMatrix, lambda: f64) -> (f64, f64) {
    let n = phi.nrows();
    let nf = n as f64;
    let pi = centering(n);
    let pc = &pi * phi;
    let yc = &pi * y;
    let gram = pc.transpose() * &pc + DenseMatrix::identity(phi.ncols(), phi.ncols()) * (nf * lambda);
    let w = gram.try_inverse().unwrap() * pc.transpose() * &yc;
    let primal = (&yc - &pc * &w).norm_squared() / nf + lambda * w.norm_squared();
    let inner = (&pc * pc.transpose() + DenseMatrix::identity(n, n) * (nf * lambda))
        .try_inverse()
        .unwrap();
    let a = &pi * inner * &pi;
    let dual = lambda * (y * y.transpose() * a).trace();
    (primal, dual)
}

#[test]
fn criterion_01_duality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=12);
        let k = rng.random_range(2..=5usize.min(n));
        let lambda = 10f64.powf(rng.random_range(-4.0..=1.0));
        let phi = normal(n, d, &mut rng);
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let y = one_hot(&labels, k);
        let (primal, dual) = ridge_and_dual(&phi, &y, lambda);
        let lib_primal = linalg::ridge_solve(&phi, &y, lambda).unwrap().objective;
        let lib_dual = ulr::forward_objective(&phi, &(&y * y.transpose()), lambda).unwrap();
        for (p, q) in [(primal, dual), (lib_primal, lib_dual), (primal, lib_dual), (lib_primal, dual)] {
            worst = worst.max((p - q).abs() / p);
        }
    }
    report(
        1,
        worst <= 1e-8,
        start.elapsed(),
        Some(Duration::from_secs(10)),
        format!("max relative gap {worst:.3e} over 200 instances (tol 1e-8)"),
    );
}

#[test]
fn criterion_02_gradients() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_phi: f64 = 0.0;
    let mut worst_param: f64 = 0.0;
    for seed in 0..20 {
        for r in gradcheck::run_all(seed, Sizes::default(), false).unwrap() {
            let tol = if r.tolerance <= gradcheck::PHI_TOLERANCE { 1e-6 } else { 1e-4 };
            if tol == 1e-6 {
                worst_phi = worst_phi.max(r.max_rel_error);
            } else {
                worst_param = worst_param.max(r.max_rel_error);
            }
            if r.max_rel_error.is_nan() || r.max_rel_error > tol || r.checked == 0 {
                failures.push(format!("seed {seed} {} {:.2e} at {:?}", r.name, r.max_rel_error, r.worst));
            }
        }
    }
    report(
        2,
        failures.is_empty(),
        start.elapsed(),
        Some(Duration::from_secs(60)),
        format!(
            "worst Phi-level {worst_phi:.2e} (tol 1e-6), worst parameter-level {worst_param:.2e} (tol 1e-4), failures {failures:?}"
        ),
    );
}

#[test]
fn criterion_03_lipschitz() {
    let start = Instant::now();
    let mut ok = true;
    let mut details = Vec::new();
    let cases = [(2.0, 20, 8, 0.05, 4), (5.0, 30, 10, 1.0, 6), (1.0, 12, 3, 0.01, 3), (10.0, 40, 20, 3.0, 8)];
    for (c, &(b, n, n_max, lambda, d)) in cases.iter().enumerate() {
        let r = ulr::smoothness_check(b, n, n_max, lambda, d, 250, 300 + c as u64).unwrap();
        ok &= r.passed;
        details.push(format!(
            "grad_f {:.3}, grad_r {:.3}, ratio_f {:.3}, ratio_r {:.3}",
            r.max_grad_f / r.bounds.l_f,
            r.max_grad_r / r.bounds.l_r,
            r.max_ratio_f / r.bounds.ell_f,
            r.max_ratio_r / r.bounds.ell_r
        ));
    }

    let mut worst_cross: f64 = 0.0;
    let mut worst_closed: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..100 {
        let b: f64 = rng.random_range(0.1..10.0);
        let n: f64 = rng.random_range(4..200) as f64;
        let n_max: f64 = rng.random_range(1.0..=n).floor();
        let lambda_l = n_max / n;
        let lambda_ell = n_max / (2.0 * n) + (n_max * n_max + 16.0 * b * b * n_max).sqrt() / (2.0 * n);
        let at_l = ulr::lipschitz_bounds(b, n, n_max, lambda_l).unwrap();
        let at_ell = ulr::lipschitz_bounds(b, n, n_max, lambda_ell).unwrap();
        worst_cross = worst_cross
            .max((at_l.l_f - at_l.l_r).abs() / at_l.l_r)
            .max((at_ell.ell_f - at_ell.ell_r).abs() / at_ell.ell_r);
        let expect_ell_f = 8.0 * b * b * n_max / (n.powi(3) * lambda_ell.powi(2)) + 2.0 * n_max / (n * n * lambda_ell);
        worst_closed = worst_closed
            .max((at_ell.ell_f - expect_ell_f).abs() / expect_ell_f)
            .max((at_l.l_f - 2.0 * n_max * b / (lambda_l * n * n)).abs() / at_l.l_f)
            .max((at_ell.gradient_crossover - lambda_ell).abs() / lambda_ell)
            .max((at_l.objective_crossover - lambda_l).abs() / lambda_l);
    }
    ok &= worst_cross <= 1e-10 && worst_closed <= 1e-10;
    report(
        3,
        ok,
        start.elapsed(),
        Some(Duration::from_secs(60)),
        format!(
            "1000 draws, empirical/bound ratios {details:?}; crossover gap {worst_cross:.2e}, closed-form gap {worst_closed:.2e} (tol 1e-10)"
        ),
    );
}

#[test]
fn criterion_04_balancing_marginals() {
    let start = Instant::now();
    let (n, k) = (64, 4);
    let target = (n / k) as f64;
    let mut worst_marg: f64 = 0.0;
    let mut worst_known: f64 = 0.0;
    let mut worst_rise = f64::NEG_INFINITY;
    let mut rounds = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..5 {
        let phi = normal(n, 6, &mut rng);
        let a = linalg::compute_a(&phi, 0.1).unwrap();
        let mu = balancing::default_mu(&a).mu;
        let problem = BalancingProblem::new(a, balancing::diagonal_entries(n), target, target, mu)
            .unwrap()
            .with_iters(50);
        let out = balancing::balance(&problem).unwrap();
        rounds = rounds.max(out.dual_trajectory.len());
        for i in 0..n {
            worst_marg = worst_marg
                .max((out.m.row(i).sum() - target).abs())
                .max((out.m.column(i).sum() - target).abs());
            worst_known = worst_known.max((out.m[(i, i)] - 1.0).abs());
        }
        for w in out.dual_trajectory.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    }
    report(
        4,
        worst_marg <= 1e-6 && worst_known <= 1e-6 && worst_rise <= 1e-10 && rounds <= 50,
        start.elapsed(),
        Some(Duration::from_secs(5)),
        format!(
            "marginal dev {worst_marg:.2e}, known dev {worst_known:.2e}, largest dual rise {worst_rise:.2e}, rounds {rounds}"
        ),
    );
}

#[test]
fn criterion_05_brute_force_proximity() {
    let start = Instant::now();
    let (n, k) = (8, 2);
    let mut recovered = 0;
    let mut bounded = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for inst in 0..20 {
        let first = rng.random_range(3..=5);
        let mut truth: Vec<usize> = (0..n).map(|i| usize::from(i >= first)).collect();
        truth.shuffle(&mut rng);
        let centers = normal(k, 3, &mut rng) * 4.0;
        let noise = normal(n, 3, &mut rng) * 0.3;
        let phi = DenseMatrix::from_fn(n, 3, |i, j| centers[(truth[i], j)] + noise[(i, j)]);
        let a = linalg::compute_a(&phi, 0.1).unwrap();

        let opt = balancing::brute_force_assign(&a, k, &[], Some((3, 5))).unwrap();
        let mu = balancing::default_mu(&a).mu;
        let problem = BalancingProblem::new(a.clone(), balancing::diagonal_entries(n), 3.0, 5.0, mu)
            .unwrap()
            .with_iters(50);
        let out = balancing::balance_with_doubling(&problem, balancing::MAX_MU_DOUBLINGS).unwrap();
        let rounded = labeling::spectral_cluster(&out.result.m, k, inst).unwrap();
        if labeling::hungarian_match(&rounded.labels, &opt.labels, k).unwrap().accuracy == 1.0 {
            recovered += 1;
        }
        let relaxed = (&out.result.m * &a).trace();
        if relaxed <= opt.objective + out.result.mu * n as f64 * (k as f64).ln() {
            bounded += 1;
        }
    }
    report(
        5,
        recovered >= 18 && bounded == 20,
        start.elapsed(),
        Some(Duration::from_secs(30)),
        format!("spectral rounding recovers optimum {recovered}/20 (need 18), relaxed bound holds {bounded}/20"),
    );
}

#[test]
fn criterion_06_sinkhorn_jacobian() {
    let start = Instant::now();
    let n = 6;
    let ones = vec![1.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut below = 0;
    let mut radii = Vec::new();
    let mut transverse: f64 = 0.0;
    for _ in 0..20 {
        let q = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(0.1..2.0));
        let jac = balancing::sinkhorn_jacobian(&q, &ones, &ones).unwrap();
        if jac.spectral_radius < 1.0 {
            below += 1;
        }
        radii.push(jac.spectral_radius);
        transverse = transverse.max(jac.transverse_radius);
    }
    let lo = radii.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = radii.iter().copied().fold(0.0, f64::max);
    report(
        6,
        below == 20,
        start.elapsed(),
        Some(Duration::from_secs(10)),
        format!(
            "spectral radius < 1 in {below}/20; radii in [{lo:.15}, {hi:.15}]; largest radius off the unit eigenspace {transverse:.4}"
        ),
    );
}

fn blobs(n: usize, d: usize, k: usize, separation: f64, label_fraction: f64, seed: u64) -> Dataset {
    let ds = data::make_blobs(&BlobSpec {
        n,
        d,
        k,
        separation,
        label_fraction,
        seed,
    })
    .unwrap();
    data::standardize(&ds).unwrap()
}

fn semi_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        labeled_batch_fraction: Some(0.3125),
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_07_end_to_end() {
    let start = Instant::now();
    let mut init = Vec::new();
    let mut xsdc = Vec::new();
    for seed in 0..10 {
        let ds = blobs(400, 10, 4, 3.5, 5.0 / 60.0, seed);
        assert_eq!(ds.labeled_train().len(), 20);
        let out = trainer::train(&ds, &semi_config(seed)).unwrap();
        init.push(out.metrics.init_test_accuracy.unwrap());
        xsdc.push(out.metrics.test_at_best_val.unwrap());
    }
    let mut clustered = Vec::new();
    for seed in 0..10 {
        let ds = blobs(400, 10, 4, 10.0, 0.0, seed);
        let cfg = TrainConfig {
            mode: Mode::Unsupervised,
            seed,
            ..TrainConfig::default()
        };
        let out = trainer::train(&ds, &cfg).unwrap();
        assert!(out.metrics.unsupervised);
        clustered.push(out.metrics.test_at_best_val.unwrap());
    }
    let (b, x, u) = (mean(&init), mean(&xsdc), mean(&clustered));
    report(
        7,
        (0.75..=0.90).contains(&b) && x >= b && u >= 0.90,
        start.elapsed(),
        Some(Duration::from_secs(300)),
        format!("baseline {b:.4} (band 0.75-0.90), XSDC {x:.4}, unsupervised matched {u:.4} (need 0.90)"),
    );
}

/// Four blobs with class 1 pulled halfway onto class 0.
fn overlapping(seed: u64) -> Dataset {
    let mut ds = data::make_blobs(&BlobSpec {
        n: 400,
        d: 10,
        k: 4,
        separation: 6.0,
        label_fraction: 5.0 / 60.0,
        seed,
    })
    .unwrap();
    let truth = ds.truth.clone().unwrap();
    let centroid = |c: usize| {
        let rows: Vec<usize> = (0..ds.n()).filter(|&i| truth[i] == c).collect();
        linalg::column_means(&ds.x.select_rows(rows.iter()))
    };
    let shift = (centroid(0) - centroid(1)) * 0.5;
    for (i, _) in truth.iter().enumerate().filter(|(_, &c)| c == 1) {
        let mut row = ds.x.row_mut(i);
        row += shift.transpose();
    }
    data::standardize(&ds).unwrap()
}

#[test]
fn criterion_08_constraints() {
    let start = Instant::now();
    let mut plain = Vec::new();
    let mut constrained = Vec::new();
    let mut worst: f64 = 0.0;
    let mut constrained_steps = 0;
    for seed in 0..10 {
        let ds = overlapping(seed);
        let truth = ds.truth.clone().unwrap();
        let train = ds.rows_in(Split::Train);
        let mut pairs = Vec::new();
        for &i in train.iter().filter(|&&i| truth[i] == 0) {
            for &j in train.iter().filter(|&&j| truth[j] == 1) {
                pairs.push(PairConstraint { i, j, must_link: false });
            }
        }
        let base = semi_config(seed);
        plain.push(trainer::train(&ds, &base).unwrap().metrics.test_at_best_val.unwrap());
        let cfg = TrainConfig {
            constraints: pairs,
            ..base
        };
        let out = trainer::train(&ds, &cfg).unwrap();
        for rec in &out.metrics.iterations {
            if let Some(v) = rec.constraint_violation {
                constrained_steps += 1;
                worst = worst.max(v);
            }
        }
        constrained.push(out.metrics.test_at_best_val.unwrap());
    }
    let (p, c) = (mean(&plain), mean(&constrained));
    report(
        8,
        c >= p && worst <= 1e-6 && constrained_steps > 0,
        start.elapsed(),
        None,
        format!(
            "unconstrained {p:.4}, constrained {c:.4}, worst constrained-entry deviation {worst:.2e} over {constrained_steps} steps"
        ),
    );
}

#[test]
fn criterion_09_regime_reduction() {
    let start = Instant::now();
    let ds = blobs(200, 5, 3, 4.0, 1.0, 9);
    let cfg = TrainConfig {
        seed: 9,
        supervised_init_iters: 30,
        main_iters: 40,
        batch_size: 32,
        record_trajectory: true,
        ..TrainConfig::default()
    };
    let out = trainer::train(&ds, &cfg).unwrap();

    let layer = trainer::initial_layer(&ds, &cfg).unwrap();
    let mut state = TrainState::seeded(layer, cfg.seed, cfg.lambda);
    let labeled = ds.labeled_train();
    let mut expected = Vec::new();
    let mut run = |state: &mut TrainState, iters: usize, lr: f64| {
        let mut sampler = BatchSampler::new(labeled.clone());
        let m = cfg.batch_size.min(labeled.len());
        for _ in 0..iters {
            let rows = sampler.draw(m, &mut state.rng);
            let x = ds.x.select_rows(rows.iter());
            let y = one_hot(&rows.iter().map(|&i| ds.labels[i].unwrap()).collect::<Vec<_>>(), ds.k);
            let batch = features::forward(&state.layer, &x, cfg.normalize).unwrap();
            let ucfg = UlrConfig {
                lambda: cfg.lambda,
                alpha: cfg.alpha,
                rho: cfg.rho,
                learning_rate: lr,
            };
            ulr::ulr_step(state, &x, &batch, &(&y * y.transpose()), &ucfg).unwrap();
            expected.push(state.layer.landmarks.clone());
        }
    };
    run(&mut state, cfg.supervised_init_iters, cfg.init_learning_rate);
    run(&mut state, cfg.main_iters, cfg.learning_rate);

    let same_len = out.trajectory.len() == expected.len();
    let identical = same_len
        && out
            .trajectory
            .iter()
            .zip(&expected)
            .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let balanced = out.metrics.iterations.iter().any(|r| r.mu.is_some());
    report(
        9,
        identical && !balanced,
        start.elapsed(),
        None,
        format!(
            "{} recorded steps vs {} reference steps, bitwise identical: {identical}, balancing invoked: {balanced}",
            out.trajectory.len(),
            expected.len()
        ),
    );
}

#[test]
fn criterion_10_imbalance() {
    let start = Instant::now();
    let mut baseline = Vec::new();
    let mut xsdc = Vec::new();
    for seed in 0..10 {
        let ds = blobs(400, 10, 2, 2.0, 5.0 / 120.0, seed);
        let ds = data::imbalance(&ds, &[0.8, 0.2], seed).unwrap();
        let cfg = TrainConfig {
            balance: BalanceSettings {
                n_min_frac: Some(0.2),
                n_max_frac: Some(0.8),
                ..BalanceSettings::default()
            },
            ..semi_config(seed)
        };
        let out = trainer::train(&ds, &cfg).unwrap();
        baseline.push(out.metrics.init_test_accuracy.unwrap());
        xsdc.push(out.metrics.test_at_best_val.unwrap());
    }
    let (b, x) = (mean(&baseline), mean(&xsdc));
    report(
        10,
        x >= b,
        start.elapsed(),
        None,
        format!("labeled-only baseline {b:.4}, XSDC {x:.4} with 80/20 unlabeled classes"),
    );
}
