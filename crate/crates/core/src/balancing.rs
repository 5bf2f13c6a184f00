//! Entropic matrix balancing with box-constrained marginals and frozen
//! known entries.
//!
//! Solves
//!
//! ```text
//! min_M  tr(MA) + μ·D_h(M; M₀)
//! s.t.   M_ij = m_ij for (i, j) ∈ K
//!        n_min ≤ M𝟙 ≤ n_max,  n_min ≤ Mᵀ𝟙 ≤ n_max
//! ```
//!
//! by alternating exact minimization of the dual in the known-entry
//! multipliers, the row scalings `u` and the column scalings `v`. With no
//! known entries and `n_min = n_max` the iteration is Sinkhorn–Knopp.
//!
//! Also here: an exhaustive solver for the discrete assignment problem (for
//! toy sizes) and the Jacobian of one Sinkhorn sweep at a fixed point.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};

pub const DEFAULT_ROUNDS: usize = 10;
pub const MAX_MU_DOUBLINGS: usize = 20;
const KNOWN_TOL: f64 = 1e-6;
const MARGINAL_TOL_PER_ROW: f64 = 1e-6;
const DUAL_INCREASE_TOL: f64 = 1e-6;
const DUAL_INCREASE_STRIKES: usize = 3;

/// A frozen entry `M_ij = value` of the equivalence matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownEntry {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

impl KnownEntry {
    pub fn new(i: usize, j: usize, value: f64) -> Self {
        Self { i, j, value }
    }
}

/// `(i, i, 1)` for every index.
pub fn diagonal_entries(n: usize) -> Vec<KnownEntry> {
    (0..n).map(|i| KnownEntry::new(i, i, 1.0)).collect()
}

/// Known entries implied by partially observed labels: the diagonal plus
/// every labeled pair (1 for equal labels, 0 otherwise).
pub fn entries_from_labels(labels: &[Option<usize>]) -> Vec<KnownEntry> {
    let mut out = diagonal_entries(labels.len());
    for (i, li) in labels.iter().enumerate() {
        let Some(li) = li else { continue };
        for (j, lj) in labels.iter().enumerate() {
            if i == j {
                continue;
            }
            if let Some(lj) = lj {
                out.push(KnownEntry::new(i, j, if li == lj { 1.0 } else { 0.0 }));
            }
        }
    }
    out
}

/// Initial guess `M₀` in the Bregman proximity term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// Every entry `1/k`, for a known number of clusters.
    Uniform { k: usize },
    /// Every entry equal to the given value (`n_Σ/n` when `k` is unknown).
    Constant(f64),
    Matrix(DenseMatrix),
}

impl Prior {
    fn log_at(&self, i: usize, j: usize) -> f64 {
        match self {
            Prior::Uniform { k } => -(*k as f64).ln(),
            Prior::Constant(c) => c.ln(),
            Prior::Matrix(m) => m[(i, j)].ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Relaxed `YYᵀ`: the unit diagonal must be among the known entries.
    Equivalence,
    /// Plain marginal scaling with no diagonal requirement.
    Transport,
}

#[derive(Debug, Clone)]
pub struct BalancingProblem {
    pub a: DenseMatrix,
    pub known: Vec<KnownEntry>,
    pub n_min: f64,
    pub n_max: f64,
    pub mu: f64,
    pub iters: usize,
    pub prior: Prior,
    pub kind: ProblemKind,
}

impl BalancingProblem {
    /// Equivalence-matrix problem with the default round count and a constant
    /// `n_Σ/n` prior; use [`with_prior`](Self::with_prior) when `k` is known.
    pub fn new(a: DenseMatrix, known: Vec<KnownEntry>, n_min: f64, n_max: f64, mu: f64) -> Result<Self> {
        let n = a.nrows().max(1) as f64;
        let problem = Self {
            a,
            known,
            n_min,
            n_max,
            mu,
            iters: DEFAULT_ROUNDS,
            prior: Prior::Constant(0.5 * (n_min + n_max) / n),
            kind: ProblemKind::Equivalence,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Plain entropic transport with every row and column sum equal to
    /// `marginal` and no frozen entries.
    pub fn new_transport(a: DenseMatrix, marginal: f64, mu: f64) -> Result<Self> {
        let n = a.nrows().max(1) as f64;
        let problem = Self {
            a,
            known: Vec::new(),
            n_min: marginal,
            n_max: marginal,
            mu,
            iters: DEFAULT_ROUNDS,
            prior: Prior::Constant(marginal / n),
            kind: ProblemKind::Transport,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_prior(mut self, prior: Prior) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn transport(mut self) -> Self {
        self.kind = ProblemKind::Transport;
        self
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if n == 0 || self.a.ncols() != n {
            return Err(Error::invalid(format!(
                "similarity matrix must be square and nonempty, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        linalg::ensure_finite(&self.a, "similarity matrix")?;
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::invalid(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.n_min >= 0.0) || !(self.n_max >= self.n_min) || !self.n_max.is_finite() {
            return Err(Error::invalid(format!(
                "need 0 <= n_min <= n_max, got n_min = {}, n_max = {}",
                self.n_min, self.n_max
            )));
        }
        match &self.prior {
            Prior::Uniform { k } if *k == 0 => return Err(Error::invalid("prior needs k >= 1")),
            Prior::Constant(c) if !(*c > 0.0) || !c.is_finite() => {
                return Err(Error::invalid(format!("constant prior must be positive, got {c}")))
            }
            Prior::Matrix(m) if m.shape() != (n, n) || m.iter().any(|v| !(*v > 0.0) || !v.is_finite()) => {
                return Err(Error::invalid("prior matrix must be n x n and entrywise positive"))
            }
            _ => {}
        }

        let mut map = BTreeMap::new();
        for e in &self.known {
            if e.i >= n || e.j >= n {
                return Err(Error::invalid(format!("known entry ({}, {}) out of range for n = {n}", e.i, e.j)));
            }
            if e.value != 0.0 && e.value != 1.0 {
                return Err(Error::invalid(format!(
                    "known entry ({}, {}) must be 0 or 1, got {}",
                    e.i, e.j, e.value
                )));
            }
            if let Some(prev) = map.insert((e.i, e.j), e.value) {
                if prev != e.value {
                    return Err(Error::invalid(format!("conflicting values for known entry ({}, {})", e.i, e.j)));
                }
            }
        }
        for (&(i, j), &val) in &map {
            match map.get(&(j, i)) {
                Some(&other) if other == val => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "known entries are not symmetric: ({i}, {j}, {val}) has no matching ({j}, {i}, {val})"
                    )))
                }
            }
        }
        if self.kind == ProblemKind::Equivalence {
            for i in 0..n {
                if map.get(&(i, i)) != Some(&1.0) {
                    return Err(Error::invalid(format!("diagonal entry ({i}, {i}) must be known and equal to 1")));
                }
            }
        }
        Ok(())
    }

    fn known_grid(&self) -> Vec<Option<f64>> {
        let n = self.n();
        let mut grid = vec![None; n * n];
        for e in &self.known {
            grid[e.i * n + e.j] = Some(e.value);
        }
        grid
    }
}

/// Median of `|A_ij|`, the default entropic weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuEstimate {
    pub mu: f64,
    /// Set when `A` is identically zero and `mu` fell back to 1.
    pub fallback: bool,
}

pub fn default_mu(a: &DenseMatrix) -> MuEstimate {
    let mut abs: Vec<f64> = a.iter().map(|v| v.abs()).collect();
    let med = crate::stats::median(&mut abs);
    if med > 0.0 && med.is_finite() {
        MuEstimate { mu: med, fallback: false }
    } else {
        MuEstimate { mu: 1.0, fallback: true }
    }
}

/// Entrywise clamp onto `[n_Σ − n_Δ, n_Σ + n_Δ]`.
pub fn project_box(x: &[f64], n_sigma: f64, n_delta: f64) -> Vec<f64> {
    let (lo, hi) = (n_sigma - n_delta, n_sigma + n_delta);
    x.iter().map(|v| v.clamp(lo, hi)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceMatrix {
    pub m: DenseMatrix,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub converged: bool,
    /// Largest distance of a row or column sum from `[n_min, n_max]`.
    pub marginal_violation: f64,
    /// Largest `|M_ij − m_ij|` over the known entries.
    pub known_violation: f64,
    /// Dual objective after each round.
    pub dual_trajectory: Vec<f64>,
    pub mu: f64,
}

struct Workspace<'a> {
    problem: &'a BalancingProblem,
    n: usize,
    known: Vec<Option<f64>>,
    q_tilde: Vec<f64>,
    free: Vec<f64>,
    n_sigma: f64,
    n_delta: f64,
}

impl<'a> Workspace<'a> {
    fn new(problem: &'a BalancingProblem) -> Self {
        let n = problem.n();
        let mut q_tilde = vec![0.0; n * n];
        let mut free = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let q = problem.a[(i, j)] / problem.mu - problem.prior.log_at(i, j);
                q_tilde[i * n + j] = q;
                free[i * n + j] = (-q).exp();
            }
        }
        Self {
            problem,
            n,
            known: problem.known_grid(),
            q_tilde,
            free,
            n_sigma: 0.5 * (problem.n_max + problem.n_min),
            n_delta: 0.5 * (problem.n_max - problem.n_min),
        }
    }

    fn fill_n(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                out[idx] = match self.known[idx] {
                    Some(m) => m / (u[i] * v[j]),
                    None => self.free[idx],
                };
            }
        }
    }

    fn dual(&self, u: &[f64], v: &[f64], nm: &[f64]) -> f64 {
        let n = self.n;
        let mut val = 0.0;
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                val += u[i] * nm[idx] * v[j];
                if let Some(m) = self.known[idx] {
                    if m > 0.0 {
                        // λ_ij = −Q̃_ij − log N_ij
                        val += m * (-self.q_tilde[idx] - nm[idx].ln());
                    }
                }
            }
        }
        for s in u.iter().chain(v.iter()) {
            let a = -s.ln();
            val += self.n_delta * a.abs() + self.n_sigma * a;
        }
        val
    }

    fn finish(&self, u: Vec<f64>, v: Vec<f64>, nm: &[f64], dual_trajectory: Vec<f64>) -> EquivalenceMatrix {
        let n = self.n;
        let m = DenseMatrix::from_fn(n, n, |i, j| u[i] * nm[i * n + j] * v[j]);
        let (lo, hi) = (self.problem.n_min, self.problem.n_max);
        let dist = |s: f64| if s < lo { lo - s } else if s > hi { s - hi } else { 0.0 };
        let mut marginal_violation: f64 = 0.0;
        for i in 0..n {
            marginal_violation = marginal_violation.max(dist(m.row(i).sum()));
            marginal_violation = marginal_violation.max(dist(m.column(i).sum()));
        }
        let mut known_violation: f64 = 0.0;
        for e in &self.problem.known {
            known_violation = known_violation.max((m[(e.i, e.j)] - e.value).abs());
        }
        let converged = marginal_violation <= MARGINAL_TOL_PER_ROW * n as f64 && known_violation <= KNOWN_TOL;
        EquivalenceMatrix {
            m,
            u,
            v,
            converged,
            marginal_violation,
            known_violation,
            dual_trajectory,
            mu: self.problem.mu,
        }
    }
}

/// Runs `problem.iters` alternating rounds from `u = v = 𝟙`.
pub fn balance(problem: &BalancingProblem) -> Result<EquivalenceMatrix> {
    problem.validate()?;
    let ws = Workspace::new(problem);
    let n = ws.n;
    let diverged = |round: usize, reason: &str| Error::BalanceDiverged {
        rounds: round,
        mu: problem.mu,
        reason: reason.to_string(),
    };

    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    let mut nm = vec![0.0; n * n];
    ws.fill_n(&u, &v, &mut nm);
    let mut trajectory = Vec::with_capacity(problem.iters);
    let mut strikes = 0;
    let mut sums = vec![0.0; n];

    for round in 1..=problem.iters {
        ws.fill_n(&u, &v, &mut nm);
        if nm.iter().any(|x| !x.is_finite()) {
            return Err(diverged(round, "non-finite entry in N"));
        }

        for i in 0..n {
            sums[i] = (0..n).map(|j| nm[i * n + j] * v[j]).sum();
        }
        let proj = project_box(&sums, ws.n_sigma, ws.n_delta);
        for i in 0..n {
            u[i] = proj[i] / sums[i];
        }
        for j in 0..n {
            sums[j] = (0..n).map(|i| nm[i * n + j] * u[i]).sum();
        }
        let proj = project_box(&sums, ws.n_sigma, ws.n_delta);
        for j in 0..n {
            v[j] = proj[j] / sums[j];
        }
        if u.iter().chain(v.iter()).any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(diverged(round, "non-finite or nonpositive scaling"));
        }

        let d = ws.dual(&u, &v, &nm);
        if !d.is_finite() {
            return Err(diverged(round, "non-finite dual objective"));
        }
        if let Some(&prev) = trajectory.last() {
            if d - prev > DUAL_INCREASE_TOL * f64::max(1.0, f64::abs(prev)) {
                strikes += 1;
                if strikes >= DUAL_INCREASE_STRIKES {
                    return Err(diverged(round, "dual objective increased for 3 consecutive rounds"));
                }
            } else {
                strikes = 0;
            }
        }
        trajectory.push(d);
    }
    Ok(ws.finish(u, v, &nm, trajectory))
}

#[derive(Debug, Clone)]
pub struct BalanceOutcome {
    pub result: EquivalenceMatrix,
    pub initial_mu: f64,
    pub doublings: usize,
}

/// [`balance`], doubling `mu` after each divergence, at most `max_doublings` times.
pub fn balance_with_doubling(problem: &BalancingProblem, max_doublings: usize) -> Result<BalanceOutcome> {
    let initial_mu = problem.mu;
    let mut attempt = problem.clone();
    let mut doublings = 0;
    loop {
        match balance(&attempt) {
            Ok(result) => {
                return Ok(BalanceOutcome {
                    result,
                    initial_mu,
                    doublings,
                })
            }
            Err(err @ Error::BalanceDiverged { .. }) => {
                if doublings >= max_doublings {
                    return Err(err);
                }
                doublings += 1;
                attempt.mu *= 2.0;
            }
            Err(other) => return Err(other),
        }
    }
}

/// Exact discrete minimizer of `tr(YYᵀA)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceAssignment {
    pub labels: Vec<usize>,
    pub y: DenseMatrix,
    pub objective: f64,
}

pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Enumerates every labeling in lexicographic order of the label vector,
/// keeping the first global minimizer that satisfies the pairwise constraints
/// and the optional cluster-size bounds `(min, max)`.
pub fn brute_force_assign(
    a: &DenseMatrix,
    k: usize,
    constraints: &[KnownEntry],
    size_bounds: Option<(usize, usize)>,
) -> Result<BruteForceAssignment> {
    let n = a.nrows();
    if a.ncols() != n || n == 0 || k == 0 {
        return Err(Error::invalid("brute force needs a nonempty square matrix and k >= 1"));
    }
    if (k as f64).powi(n as i32) > BRUTE_FORCE_LIMIT {
        return Err(Error::Refused(format!("{k}^{n} labelings exceed the enumeration limit")));
    }
    for c in constraints {
        if c.i >= n || c.j >= n {
            return Err(Error::invalid(format!("constraint ({}, {}) out of range", c.i, c.j)));
        }
    }

    let mut labels = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut counts = vec![0usize; k];
    loop {
        let feasible = constraints
            .iter()
            .all(|c| (labels[c.i] == labels[c.j]) == (c.value != 0.0))
            && match size_bounds {
                Some((lo, hi)) => {
                    counts.iter_mut().for_each(|c| *c = 0);
                    labels.iter().for_each(|&l| counts[l] += 1);
                    counts.iter().all(|&c| c >= lo && c <= hi)
                }
                None => true,
            };
        if feasible {
            let mut obj = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == labels[j] {
                        obj += a[(i, j)];
                    }
                }
            }
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, labels.clone()));
            }
        }
        // odometer, last index fastest
        let mut pos = n;
        loop {
            if pos == 0 {
                let (objective, labels) =
                    best.ok_or_else(|| Error::invalid("no labeling satisfies the constraints"))?;
                let y = DenseMatrix::from_fn(n, k, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
                return Ok(BruteForceAssignment { labels, y, objective });
            }
            pos -= 1;
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
        }
    }
}

/// Alternating row/column scaling of a positive `Q` to marginals `alpha`
/// (rows) and `beta` (columns).
pub fn sinkhorn_fixed_point(q: &DenseMatrix, alpha: &[f64], beta: &[f64], tol: f64, max_iter: usize) -> Result<DenseMatrix> {
    let n = q.nrows();
    check_jacobian_inputs(q, alpha, beta)?;
    let mut cur = q.clone();
    for _ in 0..max_iter {
        for i in 0..n {
            let s = alpha[i] / cur.row(i).sum();
            cur.row_mut(i).scale_mut(s);
        }
        for j in 0..n {
            let s = beta[j] / cur.column(j).sum();
            cur.column_mut(j).scale_mut(s);
        }
        let row_err = (0..n).map(|i| (cur.row(i).sum() - alpha[i]).abs()).fold(0.0, f64::max);
        if row_err <= tol {
            return Ok(cur);
        }
    }
    Err(Error::invalid("Sinkhorn scaling did not reach a fixed point"))
}

fn check_jacobian_inputs(q: &DenseMatrix, alpha: &[f64], beta: &[f64]) -> Result<()> {
    let n = q.nrows();
    if q.ncols() != n || n == 0 {
        return Err(Error::invalid("Q must be square and nonempty"));
    }
    if q.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("Q must be entrywise positive"));
    }
    if alpha.len() != n || beta.len() != n {
        return Err(Error::invalid("marginals must have length n"));
    }
    if alpha.iter().chain(beta).any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("marginals must be positive"));
    }
    let (sa, sb): (f64, f64) = (alpha.iter().sum(), beta.iter().sum());
    if (sa - sb).abs() > 1e-12 * sa.max(sb) {
        return Err(Error::invalid("row and column marginals have different totals"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SinkhornJacobian {
    /// `n² × n²`, acting on column-stacked matrices.
    pub jacobian: DenseMatrix,
    pub spectral_radius: f64,
    /// Largest modulus after removing the `(n−1)²` eigenvalues closest to 1,
    /// which belong to perturbations with zero row and column sums.
    pub transverse_radius: f64,
    pub fixed_point: DenseMatrix,
}

pub const MAX_JACOBIAN_N: usize = 12;

/// Jacobian of one row-then-column scaling sweep at its fixed point:
/// `Σ_ij (e_j e_jᵀ − 𝟙 u_iᵀ e_j e_jᵀ) ⊗ (e_i e_iᵀ − e_i e_iᵀ 𝟙 v_jᵀ)` with
/// `u_i = Qᵀe_i/(Q𝟙)_i` and `v_j = Qe_j/(Qᵀ𝟙)_j`, written in gradient
/// (transposed) layout.
pub fn sinkhorn_jacobian(q: &DenseMatrix, alpha: &[f64], beta: &[f64]) -> Result<SinkhornJacobian> {
    let n = q.nrows();
    if n > MAX_JACOBIAN_N {
        return Err(Error::invalid(format!("dense Jacobian limited to n <= {MAX_JACOBIAN_N}")));
    }
    let fixed = sinkhorn_fixed_point(q, alpha, beta, 1e-14 * alpha.iter().sum::<f64>().max(1.0), 100_000)?;

    let row_sums: Vec<f64> = (0..n).map(|i| fixed.row(i).sum()).collect();
    let col_sums: Vec<f64> = (0..n).map(|j| fixed.column(j).sum()).collect();
    // u_i[j] = Q[i, j] / (Q𝟙)_i,  v_j[d] = Q[d, j] / (Qᵀ𝟙)_j
    let u = |i: usize, j: usize| fixed[(i, j)] / row_sums[i];
    let v = |j: usize, d: usize| fixed[(d, j)] / col_sums[j];
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };

    let nn = n * n;
    let mut jac = DenseMatrix::zeros(nn, nn);
    for i in 0..n {
        for j in 0..n {
            // left factor lives in column j, right factor in row i
            for a in 0..n {
                let left = delta(a, j) - u(i, j);
                if left == 0.0 {
                    continue;
                }
                for d in 0..n {
                    jac[(a * n + i, j * n + d)] += left * (delta(i, d) - v(j, d));
                }
            }
        }
    }

    let mut moduli: Vec<(f64, f64)> = eigenvalues(&jac)?
        .into_iter()
        .map(|z| (z.norm(), (z - nalgebra::Complex::new(1.0, 0.0)).norm()))
        .collect();
    let spectral_radius = moduli.iter().map(|m| m.0).fold(0.0, f64::max);
    moduli.sort_by(|x, y| x.1.total_cmp(&y.1));
    let tangent = (n - 1) * (n - 1);
    let transverse_radius = moduli[tangent.min(moduli.len())..]
        .iter()
        .map(|m| m.0)
        .fold(0.0, f64::max);

    Ok(SinkhornJacobian {
        jacobian: jac,
        spectral_radius,
        transverse_radius,
        fixed_point: fixed,
    })
}

fn eigenvalues(m: &DenseMatrix) -> Result<Vec<nalgebra::Complex<f64>>> {
    use nalgebra::linalg::Schur;
    let n = m.nrows();
    if (m - m.transpose()).abs().max() <= 1e-14 * m.abs().max().max(1.0) {
        let sym = (m + m.transpose()) * 0.5;
        return Ok(nalgebra::SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .map(|&x| nalgebra::Complex::new(x, 0.0))
            .collect());
    }
    // deflation is relative to the diagonal, so clusters of zero eigenvalues stall it
    let shift = 2.0 * m.abs().max().max(1.0);
    let shifted = m + DenseMatrix::identity(n, n) * shift;
    let unshift = |s: Schur<f64, nalgebra::Dyn>| -> Vec<nalgebra::Complex<f64>> {
        s.complex_eigenvalues()
            .iter()
            .map(|z| z - nalgebra::Complex::new(shift, 0.0))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
    let rotated = q.transpose() * &shifted * q;
    for eps in [f64::EPSILON, 1e-14, 1e-13, 1e-12] {
        for cand in [&shifted, &rotated] {
            if let Some(schur) = Schur::try_new(cand.clone(), eps, 10_000) {
                return Ok(unshift(schur));
            }
        }
    }
    Err(Error::invalid("eigenvalue iteration for the Jacobian did not converge"))
}
