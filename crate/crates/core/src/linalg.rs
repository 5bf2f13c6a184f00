//! Dense linear-algebra primitives: centering, ridge regression, the
//! ridge-eliminated kernel `A(Φ)` and a differentiable Newton–Schulz
//! inverse square root.
//!
//! All matrices are `f64` and dense. The centering projector
//! `Π_n = I − 𝟙𝟙ᵀ/n` is never materialized; [`center_rows`] subtracts column
//! means instead.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DenseMatrix> {
    if data.len() != rows * cols {
        return Err(Error::invalid(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            data.len()
        )));
    }
    let m = DenseMatrix::from_row_slice(rows, cols, data);
    ensure_finite(&m, "matrix")?;
    Ok(m)
}

/// Row-major copy of the entries.
pub fn to_row_major(m: &DenseMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter().copied());
    }
    out
}

pub fn ensure_finite(m: &DenseMatrix, what: &str) -> Result<()> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let (i, j) = (pos % m.nrows().max(1), pos / m.nrows().max(1));
        return Err(Error::invalid(format!("{what} has a non-finite entry at ({i}, {j})")));
    }
    Ok(())
}

pub fn column_means(x: &DenseMatrix) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Returns `Π_n X`: `X` with its column means subtracted from every row.
pub fn center_rows(x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::invalid("cannot center an empty matrix"));
    }
    let means = column_means(x);
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    Ok(out)
}

/// Largest singular value.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Closed-form minimizer of `(1/n)‖Y − ΦW − 𝟙bᵀ‖²_F + λ‖W‖²_F`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeSolution {
    pub weights: DenseMatrix,
    pub bias: DVector<f64>,
    pub objective: f64,
}

impl RidgeSolution {
    /// Scores `ΦW + 𝟙bᵀ`, one row per observation.
    pub fn scores(&self, phi: &DenseMatrix) -> DenseMatrix {
        let mut s = phi * &self.weights;
        for mut row in s.row_iter_mut() {
            row += self.bias.transpose();
        }
        s
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, phi: &DenseMatrix) -> Vec<usize> {
        let s = self.scores(phi);
        s.row_iter()
            .map(|row| {
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn ridge_solve(phi: &DenseMatrix, y: &DenseMatrix, lambda: f64) -> Result<RidgeSolution> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("ridge penalty must be positive, got {lambda}")));
    }
    if phi.nrows() != y.nrows() {
        return Err(Error::invalid(format!(
            "feature rows ({}) and target rows ({}) differ",
            phi.nrows(),
            y.nrows()
        )));
    }
    let n = phi.nrows();
    let phi_c = center_rows(phi)?;
    let y_c = center_rows(y)?;
    let d = phi.ncols();

    let mut gram = phi_c.transpose() * &phi_c;
    for i in 0..d {
        gram[(i, i)] += n as f64 * lambda;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("ridge normal equations are not positive definite"))?;
    let weights = chol.solve(&(phi_c.transpose() * &y_c));

    let bias = column_means(y) - weights.transpose() * column_means(phi);
    let resid = &y_c - &phi_c * &weights;
    let objective = resid.norm_squared() / n as f64 + lambda * weights.norm_squared();

    Ok(RidgeSolution {
        weights,
        bias,
        objective,
    })
}

/// `A(Φ) = Π_n (Π_nΦΦᵀΠ_n + nλI)⁻¹ Π_n`, via a Cholesky solve against the
/// columns of `Π_n`, symmetrized afterwards.
pub fn compute_a(phi: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    let n = phi.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("A(Phi) needs at least 2 rows, got {n}")));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("ridge penalty must be positive, got {lambda}")));
    }
    let phi_c = center_rows(phi)?;
    let mut k = &phi_c * phi_c.transpose();
    for i in 0..n {
        k[(i, i)] += n as f64 * lambda;
    }
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::invalid("centered Gram matrix plus ridge is not positive definite"))?;

    let inv_n = 1.0 / n as f64;
    let pi = DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - inv_n } else { -inv_n });
    let solved = chol.solve(&pi);
    let a = center_rows(&solved)?;
    Ok((&a + a.transpose()) * 0.5)
}

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

/// Recorded forward pass of the coupled Newton–Schulz iteration, enough to
/// run reverse-mode differentiation through the unrolled loop.
#[derive(Debug, Clone)]
pub struct NewtonSchulzTrace {
    shifted: DenseMatrix,
    scale: f64,
    /// `Y_t, Z_t` before iteration `t`, plus the final pair.
    ys: Vec<DenseMatrix>,
    zs: Vec<DenseMatrix>,
    /// `T_t = (3I − Z_t Y_t)/2`.
    ts: Vec<DenseMatrix>,
}

fn check_symmetric_psd(k: &DenseMatrix) -> Result<()> {
    if k.nrows() != k.ncols() || k.nrows() == 0 {
        return Err(Error::invalid(format!(
            "expected a nonempty square matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    ensure_finite(k, "matrix")?;
    let asym = (k - k.transpose()).abs().max();
    let scale = k.abs().max().max(1.0);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::invalid(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    let sym = (k + k.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    if min_eig < -PSD_TOL * scale {
        return Err(Error::invalid(format!("matrix is indefinite (min eigenvalue {min_eig:e})")));
    }
    Ok(())
}

/// `(K + εI)^{-1/2}` by `iters` coupled Newton–Schulz steps on `(K + εI)/tr(K + εI)`.
pub fn newton_inv_sqrt(k: &DenseMatrix, epsilon: f64, iters: usize) -> Result<DenseMatrix> {
    Ok(newton_inv_sqrt_traced(k, epsilon, iters)?.0)
}

pub fn newton_inv_sqrt_traced(
    k: &DenseMatrix,
    epsilon: f64,
    iters: usize,
) -> Result<(DenseMatrix, NewtonSchulzTrace)> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("regularization must be nonnegative, got {epsilon}")));
    }
    check_symmetric_psd(k)?;
    let p = k.nrows();
    let eye = DenseMatrix::identity(p, p);
    let shifted = k + &eye * epsilon;
    let scale = shifted.trace();
    if !(scale > 0.0) {
        return Err(Error::invalid("K + eps*I has zero trace"));
    }

    let mut y = &shifted / scale;
    let mut z = eye.clone();
    let mut ys = Vec::with_capacity(iters + 1);
    let mut zs = Vec::with_capacity(iters + 1);
    let mut ts = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = (&eye * 3.0 - &z * &y) * 0.5;
        let y_next = &y * &t;
        let z_next = &t * &z;
        ys.push(std::mem::replace(&mut y, y_next));
        zs.push(std::mem::replace(&mut z, z_next));
        ts.push(t);
    }
    let s = &z / scale.sqrt();
    ys.push(y);
    zs.push(z);
    Ok((
        s,
        NewtonSchulzTrace {
            shifted,
            scale,
            ys,
            zs,
            ts,
        },
    ))
}

impl NewtonSchulzTrace {
    /// Pulls a cotangent on the output `S` back to a cotangent on the input `K`.
    pub fn backward(&self, s_bar: &DenseMatrix) -> DenseMatrix {
        let iters = self.ts.len();
        let root = self.scale.sqrt();
        let z_final = &self.zs[iters];

        let mut z_bar = s_bar / root;
        let mut y_bar = DenseMatrix::zeros(s_bar.nrows(), s_bar.ncols());
        // S = Z / sqrt(c)
        let mut c_bar = -0.5 * s_bar.dot(z_final) / (self.scale * root);

        for t in (0..iters).rev() {
            let (y, z, tm) = (&self.ys[t], &self.zs[t], &self.ts[t]);
            // Y' = Y T, Z' = T Z
            let t_bar = y.transpose() * &y_bar + &z_bar * z.transpose();
            let mut y_prev_bar = &y_bar * tm.transpose();
            let mut z_prev_bar = tm.transpose() * &z_bar;
            // T = (3I - Z Y) / 2
            z_prev_bar -= &t_bar * y.transpose() * 0.5;
            y_prev_bar -= z.transpose() * &t_bar * 0.5;
            y_bar = y_prev_bar;
            z_bar = z_prev_bar;
        }

        // Y_0 = A / c, c = tr(A), A = K + eps I
        let mut a_bar = &y_bar / self.scale;
        c_bar -= y_bar.dot(&self.shifted) / (self.scale * self.scale);
        for i in 0..a_bar.nrows() {
            a_bar[(i, i)] += c_bar;
        }
        a_bar
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn centering_small_cases() {
        let x = DenseMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(center_rows(&x).unwrap(), DenseMatrix::zeros(3, 2));
        let x = DenseMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        assert_eq!(center_rows(&x).unwrap(), DenseMatrix::from_row_slice(2, 1, &[-1.0, 1.0]));
        assert!(center_rows(&DenseMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn centering_matches_explicit_projector() {
        let x = random(20, 5, 3);
        let n = 20.0;
        let pi = DenseMatrix::identity(20, 20) - DenseMatrix::from_element(20, 20, 1.0 / n);
        let diff = (center_rows(&x).unwrap() - pi * &x).abs().max();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn ridge_perfect_fit_and_constant_target() {
        let phi = random(10, 1, 5);
        let sol = ridge_solve(&phi, &phi, 1e-12).unwrap();
        assert!((sol.weights[(0, 0)] - 1.0).abs() < 1e-8);
        assert!(sol.objective < 1e-10);

        let y = DenseMatrix::from_element(10, 2, 1.0);
        let sol = ridge_solve(&random(10, 3, 6), &y, 0.3).unwrap();
        assert!(sol.weights.abs().max() < 1e-14);
        assert!(sol.objective.abs() < 1e-14);
        assert!((sol.bias[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_rejects_bad_inputs() {
        let phi = random(5, 2, 1);
        assert!(ridge_solve(&phi, &random(4, 2, 2), 1.0).is_err());
        assert!(ridge_solve(&phi, &random(5, 2, 2), 0.0).is_err());
        assert!(ridge_solve(&phi, &random(5, 2, 2), -1.0).is_err());
    }

    #[test]
    fn a_of_zero_features_is_scaled_projector() {
        let n = 6;
        let lambda = 0.7;
        let a = compute_a(&DenseMatrix::zeros(n, 3), lambda).unwrap();
        let pi = DenseMatrix::identity(n, n) - DenseMatrix::from_element(n, n, 1.0 / n as f64);
        let expected = pi / (n as f64 * lambda);
        assert!((a - expected).abs().max() < 1e-14);
        assert!(compute_a(&DenseMatrix::zeros(1, 3), lambda).is_err());
    }

    #[test]
    fn a_spectral_bound_and_symmetry() {
        for seed in 0..5 {
            let phi = random(12, 4, seed) * 3.0;
            let lambda = 0.05;
            let a = compute_a(&phi, lambda).unwrap();
            assert!(spectral_norm(&a) <= 1.0 / (12.0 * lambda) * (1.0 + 1e-12));
            assert!((&a - a.transpose()).norm() <= 1e-12);
            assert!(a.clone().symmetric_eigenvalues().min() >= -1e-10);
        }
    }

    #[test]
    fn newton_schulz_trivial_cases() {
        let s = newton_inv_sqrt(&DenseMatrix::identity(3, 3), 0.0, 20).unwrap();
        assert!((s - DenseMatrix::identity(3, 3)).abs().max() < 1e-14);

        let k = DenseMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 8.0]));
        let s = newton_inv_sqrt(&k, 1.0, 20).unwrap();
        let expected = DenseMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0 / 3.0]));
        assert!((s - expected).abs().max() < 1e-12);
    }

    #[test]
    fn newton_schulz_rejects_bad_input() {
        let asym = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(newton_inv_sqrt(&asym, 0.1, 10).is_err());
        let indefinite = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(newton_inv_sqrt(&indefinite, 0.1, 10).is_err());
    }

    #[test]
    fn newton_schulz_matches_spectral_oracle() {
        let b = random(16, 16, 11);
        let k = &b * b.transpose();
        let eps = 0.5;
        let s = newton_inv_sqrt(&k, eps, 30).unwrap();

        let eig = (&k + DenseMatrix::identity(16, 16) * eps).symmetric_eigen();
        let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
        let oracle = &eig.eigenvectors * DenseMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
        assert!((&s - &oracle).norm() < 1e-6);

        let shifted = &k + DenseMatrix::identity(16, 16) * eps;
        let resid = (&s * shifted * &s - DenseMatrix::identity(16, 16)).norm() / 4.0;
        assert!(resid < 1e-6);
        assert!((&s * &k - &k * &s).norm() < 1e-8);
    }

    #[test]
    fn newton_schulz_backward_matches_finite_differences() {
        let b = random(4, 4, 21);
        let k = &b * b.transpose();
        let w = random(4, 4, 22);
        let eps = 0.2;
        let (_, trace) = newton_inv_sqrt_traced(&k, eps, 12).unwrap();
        let grad = trace.backward(&w);
        let f = |m: &DenseMatrix| newton_inv_sqrt(m, eps, 12).unwrap().dot(&w);
        let h = 1e-6;
        for i in 0..4 {
            for j in i..4 {
                // symmetric perturbation keeps the input admissible
                let mut e = DenseMatrix::zeros(4, 4);
                e[(i, j)] += h;
                if i != j {
                    e[(j, i)] += h;
                }
                let fd = (f(&(&k + &e)) - f(&(&k - &e))) / (2.0 * h);
                let an = if i == j { grad[(i, i)] } else { grad[(i, j)] + grad[(j, i)] };
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "({i},{j}): {fd} vs {an}");
            }
        }
    }

    #[test]
    fn row_major_round_trip() {
        let m = random(3, 4, 9);
        let back = from_row_major(3, 4, &to_row_major(&m)).unwrap();
        assert_eq!(m, back);
        assert!(from_row_major(2, 2, &[1.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(from_row_major(2, 2, &[1.0]).is_err());
    }
}
