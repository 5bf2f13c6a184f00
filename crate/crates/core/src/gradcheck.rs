//! Central finite-difference checks of every analytic gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::{self, NystromLayer};
use crate::labeling::one_hot;
use crate::linalg::DenseMatrix;
use crate::ulr::{self, UlrConfig};

pub const FD_STEP: f64 = 1e-3;
/// Step for the landmark suites, which pass through the Nyström map.
pub const PARAM_FD_STEP: f64 = 1e-4;
/// Coordinates whose finite difference is at most this are not scored.
pub const FD_FLOOR: f64 = 1e-8;
pub const PHI_TOLERANCE: f64 = 1e-6;
pub const PARAM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub k: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self { n: 8, d: 3, p: 4, k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_error: f64,
    /// `(row, col)` of the worst coordinate.
    pub worst: (usize, usize),
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Largest `|analytic − fd| / |fd|` over coordinates with `|fd| > FD_FLOOR`.
pub fn compare(name: &str, analytic: &DenseMatrix, fd: &DenseMatrix, tolerance: f64) -> SuiteResult {
    let mut worst = (0, 0);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for r in 0..fd.nrows() {
        for c in 0..fd.ncols() {
            let f = fd[(r, c)];
            if f.abs() <= FD_FLOOR {
                continue;
            }
            checked += 1;
            let rel = (analytic[(r, c)] - f).abs() / f.abs();
            if !(rel <= max_rel) {
                max_rel = rel;
                worst = (r, c);
            }
        }
    }
    SuiteResult {
        name: name.to_string(),
        max_rel_error: max_rel,
        worst,
        tolerance,
        checked,
        passed: max_rel <= tolerance,
    }
}

/// Fourth-order central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference(x: &DenseMatrix, step: f64, mut f: impl FnMut(&DenseMatrix) -> Result<f64>) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(x.nrows(), x.ncols());
    let mut probe = x.clone();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let orig = probe[(r, c)];
            let mut at = |offset: f64| {
                probe[(r, c)] = orig + offset * step;
                f(&probe)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            probe[(r, c)] = orig;
            out[(r, c)] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        }
    }
    Ok(out)
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

struct Instance {
    x: DenseMatrix,
    layer: NystromLayer,
    phi: DenseMatrix,
    m: DenseMatrix,
    y: DenseMatrix,
    cfg: UlrConfig,
}

fn instance(seed: u64, sizes: Sizes) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Sizes { n, d, p, k } = sizes;
    let x = normal(n, d, &mut rng);
    let layer = features::init_landmarks(&x, p, seed)?;
    let phi = normal(n, p, &mut rng);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let raw = DenseMatrix::from_fn(n, n, |_, _| unit.sample(&mut rng));
    let m = (&raw + raw.transpose()) * 0.5;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let cfg = UlrConfig {
        lambda: 0.1 + unit.sample(&mut rng),
        alpha: 0.05 + 0.1 * unit.sample(&mut rng),
        rho: 0.05 + 0.1 * unit.sample(&mut rng),
        learning_rate: 0.0,
    };
    Ok(Instance {
        x,
        layer,
        phi,
        m,
        y: one_hot(&labels, k),
        cfg,
    })
}

/// Runs every suite on one random instance. `flip_sign` negates the
/// assembled landmark gradient, which the end-to-end suite must catch.
pub fn run_all(seed: u64, sizes: Sizes, flip_sign: bool) -> Result<Vec<SuiteResult>> {
    let inst = instance(seed, sizes)?;
    let Instance {
        x,
        layer,
        phi,
        m,
        y,
        cfg,
    } = &inst;
    let mut out = Vec::new();

    let analytic = ulr::grad_phi(phi, m, cfg.lambda)?;
    let fd = finite_difference(phi, FD_STEP, |p| ulr::forward_objective(p, m, cfg.lambda))?;
    out.push(compare("grad_phi", &analytic, &fd, PHI_TOLERANCE));

    let reg = ulr::regularizer(&layer.landmarks, phi, cfg.alpha, cfg.rho)?;
    let fd = finite_difference(phi, FD_STEP, |p| Ok(ulr::regularizer(&layer.landmarks, p, cfg.alpha, cfg.rho)?.value))?;
    out.push(compare("regularizer_phi", &reg.grad_phi, &fd, PHI_TOLERANCE));
    let fd = finite_difference(&layer.landmarks, FD_STEP, |v| Ok(ulr::regularizer(v, phi, cfg.alpha, cfg.rho)?.value))?;
    out.push(compare("regularizer_v", &reg.grad_v, &fd, PHI_TOLERANCE));

    let (_, grad_r) = ulr::reverse_objective(phi, y)?;
    let fd = finite_difference(phi, FD_STEP, |p| Ok(ulr::reverse_objective(p, y)?.0))?;
    out.push(compare("reverse_objective", &grad_r, &fd, PHI_TOLERANCE));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let cot = normal(sizes.n, sizes.p, &mut rng);
    let batch = features::forward(layer, x, true)?;
    let analytic = features::backward(&batch, layer, x, &cot)?;
    let fd = finite_difference(&layer.landmarks, PARAM_FD_STEP, |v| {
        let probe = NystromLayer {
            landmarks: v.clone(),
            ..layer.clone()
        };
        Ok(features::forward(&probe, x, true)?.phi.dot(&cot))
    })?;
    out.push(compare("feature_backward", &analytic, &fd, PARAM_TOLERANCE));

    let mut analytic = ulr::objective_and_gradient(layer, x, &batch, m, cfg)?.grad_v;
    if flip_sign {
        analytic = -analytic;
    }
    let fd = finite_difference(&layer.landmarks, PARAM_FD_STEP, |v| {
        let probe = NystromLayer {
            landmarks: v.clone(),
            ..layer.clone()
        };
        ulr::total_objective(&probe, x, m, cfg, true)
    })?;
    out.push(compare("ulr_step_gradient", &analytic, &fd, PARAM_TOLERANCE));
    Ok(out)
}
