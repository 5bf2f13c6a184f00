//! Turning features and equivalence matrices into hard labels: nearest-neighbor
//! propagation, spectral clustering, Hungarian matching and the final ridge
//! classifier.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, RidgeSolution};

pub const KMEANS_RESTARTS: usize = 20;
pub const KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    NearestNeighbor,
    Spectral,
    GroundTruth,
    /// Prediction of the final ridge classifier.
    Classifier,
}

impl LabelSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelSource::NearestNeighbor => "nearest_neighbor",
            LabelSource::Spectral => "spectral",
            LabelSource::GroundTruth => "ground_truth",
            LabelSource::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub labels: Vec<usize>,
    pub source: LabelSource,
    pub matched_accuracy: Option<f64>,
}

/// `n × k` indicator matrix.
pub fn one_hot(labels: &[usize], k: usize) -> DenseMatrix {
    DenseMatrix::from_fn(labels.len(), k, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}

/// Fraction of positions where `pred` and `truth` agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

fn sq_dist(a: &DenseMatrix, i: usize, b: &DenseMatrix, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
}

/// Labels every row of `features` by majority vote over its `k_neighbors`
/// nearest labeled rows (Euclidean). Labeled rows keep their own label.
/// Distance ties go to the lower row index, vote ties to the lower class.
pub fn nn_propagate(
    features: &DenseMatrix,
    labeled_idx: &[usize],
    labels_s: &[usize],
    k_neighbors: usize,
) -> Result<LabelAssignment> {
    if labeled_idx.is_empty() {
        return Err(Error::invalid("nearest-neighbor propagation needs labeled data"));
    }
    if labeled_idx.len() != labels_s.len() {
        return Err(Error::invalid("labeled indices and labels differ in length"));
    }
    if k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be at least 1"));
    }
    let n = features.nrows();
    if let Some(&bad) = labeled_idx.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("labeled index {bad} out of range for {n} rows")));
    }
    let k_classes = labels_s.iter().max().map_or(0, |m| m + 1);
    let mut own = vec![None; n];
    for (&i, &l) in labeled_idx.iter().zip(labels_s) {
        own[i] = Some(l);
    }

    let mut order: Vec<(f64, usize)> = Vec::with_capacity(labeled_idx.len());
    let mut votes = vec![0usize; k_classes];
    let labels = (0..n)
        .map(|i| {
            if let Some(l) = own[i] {
                return l;
            }
            order.clear();
            order.extend(labeled_idx.iter().enumerate().map(|(pos, &j)| (sq_dist(features, i, features, j), pos)));
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(labeled_idx[a.1].cmp(&labeled_idx[b.1])));
            votes.iter_mut().for_each(|v| *v = 0);
            for &(_, pos) in order.iter().take(k_neighbors) {
                votes[labels_s[pos]] += 1;
            }
            let best = *votes.iter().max().unwrap();
            votes.iter().position(|&v| v == best).unwrap()
        })
        .collect();
    Ok(LabelAssignment {
        labels,
        source: LabelSource::NearestNeighbor,
        matched_accuracy: None,
    })
}

/// Seeded Lloyd iterations with k-means++ seeding; returns the labels and
/// inertia of the best of `restarts` runs.
pub fn kmeans(points: &DenseMatrix, k: usize, seed: u64, restarts: usize, max_iter: usize) -> Result<(Vec<usize>, f64)> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k-means needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let (labels, inertia) = lloyd(points, k, max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    Ok(best.unwrap())
}

fn lloyd(points: &DenseMatrix, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.nrows();
    let dim = points.ncols();

    let mut centers = DenseMatrix::zeros(k, dim);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &centers, c));
        }
    }

    let mut labels = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for iter in 0..max_iter.max(1) {
        let mut changed = false;
        inertia = 0.0;
        for i in 0..n {
            let (mut best_c, mut best_d) = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(points, i, &centers, c);
                if d < best_d {
                    best_c = c;
                    best_d = d;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
            inertia += best_d;
        }
        if iter > 0 && !changed {
            break;
        }
        let mut sums = DenseMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for c in 0..dim {
                sums[(labels[i], c)] += points[(i, c)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
    }
    (labels, inertia)
}

/// Top-`k` eigenvectors of `(M + Mᵀ)/2` by algebraic eigenvalue, rows
/// clustered by seeded k-means.
pub fn spectral_cluster(m: &DenseMatrix, k: usize, seed: u64) -> Result<LabelAssignment> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::invalid("spectral clustering needs a square matrix"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    linalg::ensure_finite(m, "equivalence matrix")?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let embedding = DenseMatrix::from_fn(n, k, |i, c| eig.eigenvectors[(i, order[c])]);
    let (labels, _) = kmeans(&embedding, k, seed, KMEANS_RESTARTS, KMEANS_ITERS)?;
    Ok(LabelAssignment {
        labels,
        source: LabelSource::Spectral,
        matched_accuracy: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `permutation[p]` is the true class matched to predicted label `p`.
    pub permutation: Vec<usize>,
    pub accuracy: f64,
}

/// Label permutation maximizing agreement with `truth`.
pub fn hungarian_match(pred: &[usize], truth: &[usize], k: usize) -> Result<Matching> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("prediction and truth differ in length"));
    }
    if pred.iter().chain(truth).any(|&l| l >= k) {
        return Err(Error::invalid(format!("labels must lie in [0, {k})")));
    }
    let mut counts = vec![vec![0.0; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|row| row.iter().map(|c| -c).collect()).collect();
    let permutation = min_cost_assignment(&cost);
    let hits: f64 = (0..k).map(|p| counts[p][permutation[p]]).sum();
    let accuracy = if pred.is_empty() { 0.0 } else { hits / pred.len() as f64 };
    Ok(Matching { permutation, accuracy })
}

/// Kuhn–Munkres with potentials on a square cost matrix; returns the column
/// assigned to each row.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Ridge regression of one-hot `labels` on `features`.
pub fn fit_final_classifier(features: &DenseMatrix, labels: &[usize], k: usize, lambda: f64) -> Result<RidgeSolution> {
    if labels.len() != features.nrows() {
        return Err(Error::invalid("labels and features differ in length"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for k = {k}")));
    }
    linalg::ridge_solve(features, &one_hot(labels, k), lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn nn_trivial_cases() {
        let f = DenseMatrix::from_row_slice(4, 1, &[0.0, 0.0, 10.0, 0.1]);
        let r = nn_propagate(&f, &[0, 2], &[1, 0], 1).unwrap();
        assert_eq!(r.labels, vec![1, 1, 0, 1]);
        assert!(nn_propagate(&f, &[], &[], 1).is_err());
    }

    #[test]
    fn nn_matches_exhaustive_scan() {
        let f = normal(50, 3, 1);
        let idx: Vec<usize> = (0..50).step_by(7).collect();
        let labs: Vec<usize> = idx.iter().map(|i| i % 3).collect();
        let r = nn_propagate(&f, &idx, &labs, 1).unwrap();
        for i in 0..50 {
            let mut best = (f64::INFINITY, 0);
            for (pos, &j) in idx.iter().enumerate() {
                let d = (f.row(i) - f.row(j)).norm();
                if d < best.0 {
                    best = (d, labs[pos]);
                }
            }
            assert_eq!(r.labels[i], best.1);
        }
    }

    #[test]
    fn spectral_recovers_blocks() {
        let truth = [0, 0, 1, 1, 1, 2, 2, 0];
        let m = DenseMatrix::from_fn(8, 8, |i, j| if truth[i] == truth[j] { 1.0 } else { 0.0 });
        let r = spectral_cluster(&m, 3, 4).unwrap();
        assert_eq!(hungarian_match(&r.labels, &truth, 3).unwrap().accuracy, 1.0);
        let r = spectral_cluster(&DenseMatrix::identity(6, 6), 3, 4).unwrap();
        assert!(r.labels.iter().all(|&l| l < 3));
        assert!(spectral_cluster(&m, 9, 0).is_err());
    }

    #[test]
    fn hungarian_trivial_and_swap() {
        let t = [0, 1, 1, 0, 2];
        let r = hungarian_match(&t, &t, 3).unwrap();
        assert_eq!(r.permutation, vec![0, 1, 2]);
        assert_eq!(r.accuracy, 1.0);
        let swapped = [1, 0, 0, 1, 2];
        let r = hungarian_match(&swapped, &t, 3).unwrap();
        assert_eq!(r.permutation, vec![1, 0, 2]);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn hungarian_matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pred: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
            let truth: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let best = perms
                .iter()
                .map(|p| pred.iter().zip(&truth).filter(|(a, b)| p[**a] == **b).count())
                .max()
                .unwrap();
            let r = hungarian_match(&pred, &truth, 3).unwrap();
            assert_eq!(r.accuracy, best as f64 / 30.0);
        }
    }

    #[test]
    fn classifier_cases() {
        let f = DenseMatrix::from_row_slice(4, 1, &[-2.0, -1.0, 1.0, 2.0]);
        let labels = [0, 0, 1, 1];
        let sol = fit_final_classifier(&f, &labels, 2, 1e-6).unwrap();
        assert_eq!(sol.predict(&f), labels.to_vec());
        let sol = fit_final_classifier(&f, &[1, 1, 1, 1], 2, 1e-3).unwrap();
        assert_eq!(sol.predict(&normal(5, 1, 2)), vec![1; 5]);
    }

    #[test]
    fn classifier_matches_explicit_solve() {
        let f = normal(20, 4, 3);
        let labels: Vec<usize> = (0..20).map(|i| (i * 7) % 3).collect();
        let lambda = 0.05;
        let sol = fit_final_classifier(&f, &labels, 3, lambda).unwrap();
        // augmented least squares with unpenalized bias, solved directly
        let n = 20.0;
        let mut aug = DenseMatrix::from_element(20, 5, 1.0);
        aug.view_mut((0, 0), (20, 4)).copy_from(&f);
        let mut reg = DenseMatrix::identity(5, 5) * (n * lambda);
        reg[(4, 4)] = 0.0;
        let lhs = aug.transpose() * &aug + reg;
        let coef = lhs.lu().solve(&(aug.transpose() * one_hot(&labels, 3))).unwrap();
        let scores = &aug * &coef;
        let oracle: Vec<usize> = (0..20)
            .map(|i| {
                let row = scores.row(i);
                (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b })
            })
            .collect();
        assert_eq!(sol.predict(&f), oracle);
        assert!((coef.view((0, 0), (4, 3)) - &sol.weights).abs().max() < 1e-10);
    }
}
