//! The ridge-eliminated training objective
//! `F(V) = λ·tr[M·A(Φ(V))] + α‖V‖²_F − ρ‖Π_nΦ(V)‖²_F`, its gradients, one
//! gradient step, and the smoothness constants comparing forward (ridge) and
//! reverse (k-means style) prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, FeatureBatch, NystromLayer};
use crate::linalg::{self, DenseMatrix};
use crate::trainer::TrainState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UlrConfig {
    /// Classifier ridge penalty.
    pub lambda: f64,
    /// Landmark penalty.
    pub alpha: f64,
    /// Anti-collapse penalty on the spread of the features.
    pub rho: f64,
    pub learning_rate: f64,
}

impl UlrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) || !(self.rho >= 0.0) {
            return Err(Error::invalid("alpha and rho must be nonnegative"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

fn check_pair(phi: &DenseMatrix, m: &DenseMatrix) -> Result<()> {
    let n = phi.nrows();
    if m.shape() != (n, n) {
        return Err(Error::invalid(format!(
            "equivalence matrix is {:?}, expected {n}x{n}",
            m.shape()
        )));
    }
    Ok(())
}

/// `λ·tr[M·A(Φ)]`.
pub fn forward_objective(phi: &DenseMatrix, m: &DenseMatrix, lambda: f64) -> Result<f64> {
    check_pair(phi, m)?;
    let a = linalg::compute_a(phi, lambda)?;
    Ok(lambda * m.dot(&a.transpose()))
}

/// Gradient of [`forward_objective`] with respect to `Φ`:
/// `−λ·A(M + Mᵀ)A·Φ`, which is `−2λ·A M A Φ` for symmetric `M`.
pub fn grad_phi(phi: &DenseMatrix, m: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    check_pair(phi, m)?;
    let a = linalg::compute_a(phi, lambda)?;
    let m_sym = m + m.transpose();
    Ok(&a * m_sym * (&a * phi) * (-lambda))
}

#[derive(Debug, Clone)]
pub struct RegularizerTerms {
    pub value: f64,
    /// Contribution to the gradient with respect to `Φ`: `−2ρΠΦ`.
    pub grad_phi: DenseMatrix,
    /// Direct contribution with respect to `V`: `2αV`.
    pub grad_v: DenseMatrix,
}

/// `α‖V‖²_F − ρ‖Π_nΦ‖²_F` and its partial gradients.
pub fn regularizer(v: &DenseMatrix, phi: &DenseMatrix, alpha: f64, rho: f64) -> Result<RegularizerTerms> {
    if !(alpha >= 0.0) || !(rho >= 0.0) {
        return Err(Error::invalid("alpha and rho must be nonnegative"));
    }
    let centered = linalg::center_rows(phi)?;
    Ok(RegularizerTerms {
        value: alpha * v.norm_squared() - rho * centered.norm_squared(),
        grad_phi: centered * (-2.0 * rho),
        grad_v: v * (2.0 * alpha),
    })
}

/// Full objective and its gradient with respect to the landmarks for one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveGradient {
    pub objective: f64,
    pub grad_v: DenseMatrix,
}

pub fn objective_and_gradient(
    layer: &NystromLayer,
    x: &DenseMatrix,
    batch: &FeatureBatch,
    m: &DenseMatrix,
    cfg: &UlrConfig,
) -> Result<ObjectiveGradient> {
    let phi = &batch.phi;
    let fit = forward_objective(phi, m, cfg.lambda)?;
    let reg = regularizer(&layer.landmarks, phi, cfg.alpha, cfg.rho)?;
    let cot = grad_phi(phi, m, cfg.lambda)? + &reg.grad_phi;
    let grad_v = features::backward(batch, layer, x, &cot)? + &reg.grad_v;
    Ok(ObjectiveGradient {
        objective: fit + reg.value,
        grad_v,
    })
}

/// Scalar objective evaluated from scratch; used by the finite-difference oracles.
pub fn total_objective(
    layer: &NystromLayer,
    x: &DenseMatrix,
    m: &DenseMatrix,
    cfg: &UlrConfig,
    normalize: bool,
) -> Result<f64> {
    let batch = features::forward(layer, x, normalize)?;
    let fit = forward_objective(&batch.phi, m, cfg.lambda)?;
    let reg = regularizer(&layer.landmarks, &batch.phi, cfg.alpha, cfg.rho)?;
    Ok(fit + reg.value)
}

/// One fixed-rate gradient step on the landmarks. Returns the objective at the
/// pre-step parameters.
pub fn ulr_step(
    state: &mut TrainState,
    x: &DenseMatrix,
    batch: &FeatureBatch,
    m: &DenseMatrix,
    cfg: &UlrConfig,
) -> Result<f64> {
    cfg.validate()?;
    let og = objective_and_gradient(&state.layer, x, batch, m, cfg)?;
    if !og.objective.is_finite() || og.grad_v.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            iteration: state.iteration,
            reason: "non-finite objective or gradient".into(),
        });
    }
    if cfg.learning_rate != 0.0 {
        state.layer.landmarks -= og.grad_v * cfg.learning_rate;
        if state.layer.landmarks.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: state.iteration,
                reason: "landmarks became non-finite".into(),
            });
        }
    }
    state.iteration += 1;
    Ok(og.objective)
}

/// Reverse prediction `(1/n)·tr[(I − P_Y)ΦΦᵀ]` and its gradient `(2/n)(I − P_Y)Φ`.
pub fn reverse_objective(phi: &DenseMatrix, y: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let n = phi.nrows();
    if y.nrows() != n {
        return Err(Error::invalid("label and feature row counts differ"));
    }
    let yty = y.transpose() * y;
    if (0..yty.nrows()).any(|c| yty[(c, c)] == 0.0) {
        return Err(Error::invalid("reverse prediction needs every cluster to be nonempty"));
    }
    let chol = yty
        .cholesky()
        .ok_or_else(|| Error::invalid("label Gram matrix is singular"))?;
    let proj_phi = y * chol.solve(&(y.transpose() * phi));
    let resid = phi - proj_phi;
    let nf = n as f64;
    Ok((resid.norm_squared() / nf, resid * (2.0 / nf)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimates {
    pub b: f64,
    pub n: f64,
    pub n_max: f64,
    pub lambda: f64,
    /// Lipschitz constant of the forward objective.
    pub l_f: f64,
    /// Lipschitz constant of the reverse objective.
    pub l_r: f64,
    /// Lipschitz constant of the forward gradient.
    pub ell_f: f64,
    /// Lipschitz constant of the reverse gradient.
    pub ell_r: f64,
    /// `λ` above which `l_f ≤ l_r`.
    pub objective_crossover: f64,
    /// `λ` above which `ell_f ≤ ell_r`.
    pub gradient_crossover: f64,
}

pub fn lipschitz_bounds(b: f64, n: f64, n_max: f64, lambda: f64) -> Result<LipschitzEstimates> {
    for (name, v) in [("B", b), ("n", n), ("n_max", n_max), ("lambda", lambda)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(LipschitzEstimates {
        b,
        n,
        n_max,
        lambda,
        l_f: 2.0 * n_max * b / (lambda * n * n),
        l_r: 2.0 * b / n,
        ell_f: 8.0 * b * b * n_max / (n.powi(3) * lambda * lambda) + 2.0 * n_max / (n * n * lambda),
        ell_r: 2.0 / n,
        objective_crossover: n_max / n,
        gradient_crossover: n_max / (2.0 * n) + (n_max * n_max + 16.0 * b * b * n_max).sqrt() / (2.0 * n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub bounds: LipschitzEstimates,
    pub samples: usize,
    /// Largest `‖Φ‖₂` actually drawn.
    pub observed_b: f64,
    pub max_grad_f: f64,
    pub max_grad_r: f64,
    pub max_ratio_f: f64,
    pub max_ratio_r: f64,
    pub passed: bool,
}

/// Random spectral-norm scaling of a Gaussian matrix into `(0, b]`.
fn bounded_features(n: usize, d: usize, b: f64, rng: &mut impl rand::Rng) -> DenseMatrix {
    let raw = DenseMatrix::from_fn(n, d, |_, _| rng.sample(rand_distr::StandardNormal));
    let norm = linalg::spectral_norm(&raw);
    let scale: f64 = rng.random_range(0.05..=1.0);
    raw * (scale * b / norm)
}

/// One-hot labels with at least two classes where possible, every class nonempty
/// and no class above `n_max`.
fn capped_labels(n: usize, n_max: usize, rng: &mut impl rand::Rng) -> DenseMatrix {
    use rand::seq::SliceRandom;
    let lo = n.div_ceil(n_max).max(2).min(n);
    let k = rng.random_range(lo..=n.min(lo + 4));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut y = DenseMatrix::zeros(n, k);
    for (pos, &row) in order.iter().enumerate() {
        y[(row, pos % k)] = 1.0;
    }
    y
}

/// Samples `Φ` with `‖Φ‖₂ ≤ b` and one-hot `Y` with clusters no larger than
/// `n_max`, then compares gradient norms and gradient-difference ratios of the
/// forward and reverse objectives against [`lipschitz_bounds`].
pub fn smoothness_check(
    b: f64,
    n: usize,
    n_max: usize,
    lambda: f64,
    d: usize,
    samples: usize,
    seed: u64,
) -> Result<SmoothnessReport> {
    use rand::SeedableRng;
    if n < 2 || d == 0 || n_max == 0 || n_max > n {
        return Err(Error::invalid(format!(
            "need n >= 2, d >= 1 and 1 <= n_max <= n (n = {n}, d = {d}, n_max = {n_max})"
        )));
    }
    let bounds = lipschitz_bounds(b, n as f64, n_max as f64, lambda)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = SmoothnessReport {
        bounds,
        samples,
        observed_b: 0.0,
        max_grad_f: 0.0,
        max_grad_r: 0.0,
        max_ratio_f: 0.0,
        max_ratio_r: 0.0,
        passed: false,
    };
    for _ in 0..samples {
        let y = capped_labels(n, n_max, &mut rng);
        let m = &y * y.transpose();
        let p1 = bounded_features(n, d, b, &mut rng);
        let p2 = bounded_features(n, d, b, &mut rng);
        report.observed_b = report.observed_b.max(linalg::spectral_norm(&p1)).max(linalg::spectral_norm(&p2));

        let gf1 = grad_phi(&p1, &m, lambda)?;
        let gf2 = grad_phi(&p2, &m, lambda)?;
        let (_, gr1) = reverse_objective(&p1, &y)?;
        let (_, gr2) = reverse_objective(&p2, &y)?;
        report.max_grad_f = report.max_grad_f.max(linalg::spectral_norm(&gf1));
        report.max_grad_r = report.max_grad_r.max(linalg::spectral_norm(&gr1));

        let gap = linalg::spectral_norm(&(&p1 - &p2));
        if gap > 0.0 {
            report.max_ratio_f = report.max_ratio_f.max(linalg::spectral_norm(&(gf1 - gf2)) / gap);
            report.max_ratio_r = report.max_ratio_r.max(linalg::spectral_norm(&(gr1 - gr2)) / gap);
        }
    }
    let slack = 1.0 + 1e-12;
    report.passed = report.max_grad_f <= bounds.l_f * slack
        && report.max_grad_r <= bounds.l_r * slack
        && report.max_ratio_f <= bounds.ell_f * slack
        && report.max_ratio_r <= bounds.ell_r * slack;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn one_hot(labels: &[usize], k: usize) -> DenseMatrix {
        DenseMatrix::from_fn(labels.len(), k, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_m_gives_zero() {
        let phi = normal(7, 3, 1);
        let m = DenseMatrix::zeros(7, 7);
        assert_eq!(forward_objective(&phi, &m, 0.1).unwrap(), 0.0);
        assert_eq!(grad_phi(&phi, &m, 0.1).unwrap(), DenseMatrix::zeros(7, 3));
    }

    #[test]
    fn zero_features_closed_form() {
        let n = 5;
        let y = one_hot(&[0, 1, 1, 0, 2], 3);
        let m = &y * y.transpose();
        let val = forward_objective(&DenseMatrix::zeros(n, 2), &m, 0.37).unwrap();
        let centered = linalg::center_rows(&m).unwrap();
        let trace_m_pi = centered.trace();
        assert!((val - trace_m_pi / n as f64).abs() < 1e-14);
    }

    #[test]
    fn duality_with_ridge() {
        let phi = normal(20, 4, 3);
        let labels: Vec<usize> = (0..20).map(|i| (i * 7) % 3).collect();
        let y = one_hot(&labels, 3);
        let m = &y * y.transpose();
        let ridge = linalg::ridge_solve(&phi, &y, 0.05).unwrap();
        let dual = forward_objective(&phi, &m, 0.05).unwrap();
        assert!(((ridge.objective - dual) / ridge.objective).abs() < 1e-8);
    }

    #[test]
    fn regularizer_trivial_cases() {
        let v = normal(3, 4, 4);
        let phi = normal(6, 4, 5);
        let r = regularizer(&v, &phi, 0.0, 0.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad_v, DenseMatrix::zeros(3, 4));
        assert_eq!(r.grad_phi, DenseMatrix::zeros(6, 4));

        let constant = DenseMatrix::from_fn(6, 4, |_, j| j as f64);
        let r = regularizer(&DenseMatrix::zeros(3, 4), &constant, 1.0, 2.0).unwrap();
        assert!(r.value.abs() < 1e-14);
        assert!(regularizer(&v, &phi, -1.0, 0.0).is_err());
    }

    #[test]
    fn reverse_objective_absorbs_label_span() {
        let y = one_hot(&[0, 0, 1, 1, 2], 3);
        let phi = &y * normal(3, 4, 6);
        let (val, grad) = reverse_objective(&phi, &y).unwrap();
        assert!(val.abs() < 1e-14);
        assert!(grad.abs().max() < 1e-14);
        let empty = one_hot(&[0, 0, 1, 1, 1], 3);
        assert!(reverse_objective(&phi, &empty).is_err());
    }

    #[test]
    fn lipschitz_closed_forms() {
        let est = lipschitz_bounds(1.0, 10.0, 5.0, 1.0).unwrap();
        assert!((est.l_f - 0.1).abs() < 1e-15);
        assert!((est.l_r - 0.2).abs() < 1e-15);
        let at = lipschitz_bounds(2.0, 10.0, 5.0, 0.5).unwrap();
        assert!((at.l_f - at.l_r).abs() < 1e-15);
        assert!(lipschitz_bounds(0.0, 10.0, 5.0, 1.0).is_err());
    }

    #[test]
    fn sampled_smoothness_within_bounds() {
        let r = smoothness_check(3.0, 12, 4, 0.2, 3, 50, 9).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.observed_b <= 3.0 + 1e-12);
        assert!(r.max_grad_f > 0.0 && r.max_ratio_r > 0.0);
        assert!(smoothness_check(1.0, 5, 6, 0.1, 2, 1, 0).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_landmarks() {
        let x = normal(10, 3, 7);
        let layer = features::init_landmarks(&x, 4, 1).unwrap();
        let mut state = TrainState::new(layer.clone());
        let batch = features::forward(&layer, &x, true).unwrap();
        let y = one_hot(&(0..10).map(|i| i % 2).collect::<Vec<_>>(), 2);
        let cfg = UlrConfig {
            lambda: 0.1,
            alpha: 0.01,
            rho: 0.01,
            learning_rate: 0.0,
        };
        ulr_step(&mut state, &x, &batch, &(&y * y.transpose()), &cfg).unwrap();
        assert_eq!(state.layer, layer);
        assert_eq!(state.iteration, 1);
    }
}
