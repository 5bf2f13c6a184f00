//! Single-layer Nyström approximation of the Gaussian RBF kernel with
//! learnable landmarks.
//!
//! `φ(x) = (k(VᵀV) + εI)^{-1/2} k(Vᵀx)`, optionally centered over the batch
//! and scaled so rows have unit mean squared norm. [`backward`] is exact
//! reverse-mode differentiation through the whole graph, including the
//! unrolled Newton–Schulz iterations and the normalization scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, NewtonSchulzTrace};

pub const DEFAULT_NYSTROM_EPSILON: f64 = 1e-3;
pub const DEFAULT_NEWTON_ITERS: usize = 20;
pub const DEFAULT_BANDWIDTH_POINTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NystromLayer {
    /// `d × p`, one landmark per column.
    pub landmarks: DenseMatrix,
    pub sigma: f64,
    pub epsilon: f64,
    pub newton_iters: usize,
}

impl NystromLayer {
    pub fn new(landmarks: DenseMatrix, sigma: f64, epsilon: f64, newton_iters: usize) -> Result<Self> {
        let layer = Self {
            landmarks,
            sigma,
            epsilon,
            newton_iters,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.landmarks.nrows() == 0 || self.landmarks.ncols() == 0 {
            return Err(Error::invalid("landmark matrix must be at least 1x1"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("bandwidth must be positive, got {}", self.sigma)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "Nystrom regularization must be positive, got {}",
                self.epsilon
            )));
        }
        linalg::ensure_finite(&self.landmarks, "landmarks")
    }

    pub fn input_dim(&self) -> usize {
        self.landmarks.nrows()
    }

    pub fn num_filters(&self) -> usize {
        self.landmarks.ncols()
    }
}

/// Gaussian kernel between the rows of `xa` and the rows of `xb`.
pub fn rbf_kernel(xa: &DenseMatrix, xb: &DenseMatrix, sigma: f64) -> Result<DenseMatrix> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("bandwidth must be positive, got {sigma}")));
    }
    if xa.ncols() != xb.ncols() {
        return Err(Error::invalid(format!(
            "kernel inputs have {} and {} columns",
            xa.ncols(),
            xb.ncols()
        )));
    }
    let denom = 2.0 * sigma * sigma;
    Ok(DenseMatrix::from_fn(xa.nrows(), xb.nrows(), |i, j| {
        let sq: f64 = xa
            .row(i)
            .iter()
            .zip(xb.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-sq / denom).exp()
    }))
}

fn row_distance(x: &DenseMatrix, i: usize, j: usize) -> f64 {
    (x.row(i) - x.row(j)).norm()
}

/// Median pairwise Euclidean distance among the first `max_points` rows.
pub fn median_bandwidth(x: &DenseMatrix, max_points: usize) -> Result<f64> {
    let m = x.nrows().min(max_points);
    if m < 2 {
        return Err(Error::invalid("median bandwidth needs at least 2 rows"));
    }
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            dists.push(row_distance(x, i, j));
        }
    }
    let med = crate::stats::median(&mut dists);
    if !(med > 0.0) {
        return Err(Error::invalid("median pairwise distance is zero"));
    }
    Ok(med)
}

/// Picks `p` distinct rows of `x` as landmarks and sets the bandwidth by the median heuristic.
pub fn init_landmarks(x: &DenseMatrix, p: usize, seed: u64) -> Result<NystromLayer> {
    let n = x.nrows();
    if p == 0 || p > n {
        return Err(Error::invalid(format!("cannot draw {p} landmarks from {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, n, p).into_vec();
    let landmarks = DenseMatrix::from_fn(x.ncols(), p, |r, c| x[(picked[c], r)]);
    let sigma = median_bandwidth(x, DEFAULT_BANDWIDTH_POINTS)?;
    NystromLayer::new(landmarks, sigma, DEFAULT_NYSTROM_EPSILON, DEFAULT_NEWTON_ITERS)
}

#[derive(Debug, Clone)]
struct ForwardCache {
    x: DenseMatrix,
    landmarks: DenseMatrix,
    sigma: f64,
    epsilon: f64,
    k_xv: DenseMatrix,
    k_vv: DenseMatrix,
    inv_sqrt: DenseMatrix,
    trace: NewtonSchulzTrace,
    /// Centered raw features, kept only when normalizing.
    centered: Option<DenseMatrix>,
}

/// Features for one batch plus what [`backward`] needs.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub phi: DenseMatrix,
    /// `s` in `Φ = s·Π Φ_raw`; 1 when normalization is off.
    pub normalization_scale: f64,
    cache: ForwardCache,
}

impl FeatureBatch {
    pub fn normalized(&self) -> bool {
        self.cache.centered.is_some()
    }
}

pub fn forward(layer: &NystromLayer, x: &DenseMatrix, normalize: bool) -> Result<FeatureBatch> {
    layer.validate()?;
    if x.ncols() != layer.input_dim() {
        return Err(Error::invalid(format!(
            "inputs have {} columns but the layer expects {}",
            x.ncols(),
            layer.input_dim()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::invalid("empty input batch"));
    }
    if normalize && x.nrows() < 2 {
        return Err(Error::invalid("normalized features need at least 2 rows"));
    }
    let vt = layer.landmarks.transpose();
    let k_xv = rbf_kernel(x, &vt, layer.sigma)?;
    let k_vv = rbf_kernel(&vt, &vt, layer.sigma)?;
    let (inv_sqrt, trace) = linalg::newton_inv_sqrt_traced(&k_vv, layer.epsilon, layer.newton_iters)?;
    let raw = &k_xv * &inv_sqrt;

    let (phi, scale, centered) = if normalize {
        let centered = linalg::center_rows(&raw)?;
        let norm = centered.norm();
        if !(norm > 1e-12 * raw.norm()) {
            return Err(Error::ScaleUndefined);
        }
        let scale = (x.nrows() as f64).sqrt() / norm;
        (&centered * scale, scale, Some(centered))
    } else {
        (raw, 1.0, None)
    };

    Ok(FeatureBatch {
        phi,
        normalization_scale: scale,
        cache: ForwardCache {
            x: x.clone(),
            landmarks: layer.landmarks.clone(),
            sigma: layer.sigma,
            epsilon: layer.epsilon,
            k_xv,
            k_vv,
            inv_sqrt,
            trace,
            centered,
        },
    })
}

/// Gradient with respect to the landmarks `V` (`d × p`) of a scalar whose
/// gradient with respect to `Φ` is `dl_dphi`.
pub fn backward(
    batch: &FeatureBatch,
    layer: &NystromLayer,
    x: &DenseMatrix,
    dl_dphi: &DenseMatrix,
) -> Result<DenseMatrix> {
    let c = &batch.cache;
    if c.landmarks != layer.landmarks || c.sigma != layer.sigma || c.epsilon != layer.epsilon {
        return Err(Error::ContractViolation(
            "layer parameters changed since the forward pass".into(),
        ));
    }
    if &c.x != x {
        return Err(Error::ContractViolation("inputs changed since the forward pass".into()));
    }
    if dl_dphi.shape() != batch.phi.shape() {
        return Err(Error::invalid(format!(
            "cotangent has shape {:?}, features have {:?}",
            dl_dphi.shape(),
            batch.phi.shape()
        )));
    }

    let raw_bar = match &c.centered {
        Some(centered) => {
            // Φ = s·C with s = √n / ‖C‖_F
            let s = batch.normalization_scale;
            let s_bar = dl_dphi.dot(centered);
            let norm_sq = centered.norm_squared();
            let c_bar = dl_dphi * s - centered * (s_bar * s / norm_sq);
            linalg::center_rows(&c_bar)?
        }
        None => dl_dphi.clone(),
    };

    // Φ_raw = K_XV S
    let k_xv_bar = &raw_bar * c.inv_sqrt.transpose();
    let s_bar = c.k_xv.transpose() * &raw_bar;
    let k_vv_bar = c.trace.backward(&s_bar);

    let v = &c.landmarks;
    let (d, p) = v.shape();
    let inv_var = 1.0 / (c.sigma * c.sigma);
    let mut grad = DenseMatrix::zeros(d, p);

    // ∂K_XV[i,j]/∂v_j = K_XV[i,j] (x_i − v_j)/σ²
    for j in 0..p {
        for i in 0..x.nrows() {
            let w = k_xv_bar[(i, j)] * c.k_xv[(i, j)] * inv_var;
            if w != 0.0 {
                for r in 0..d {
                    grad[(r, j)] += w * (x[(i, r)] - v[(r, j)]);
                }
            }
        }
    }
    // ∂K_VV[a,b]/∂v_a = K_VV[a,b] (v_b − v_a)/σ², and symmetrically for v_b
    for a in 0..p {
        for b in 0..p {
            if a == b {
                continue;
            }
            let w = (k_vv_bar[(a, b)] + k_vv_bar[(b, a)]) * c.k_vv[(a, b)] * inv_var;
            if w != 0.0 {
                for r in 0..d {
                    grad[(r, a)] += w * (v[(r, b)] - v[(r, a)]);
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn kernel_unit_diagonal_and_unit_exponent() {
        let x = normal(4, 3, 1);
        let k = rbf_kernel(&x, &x, 0.7).unwrap();
        for i in 0..4 {
            assert_eq!(k[(i, i)], 1.0);
        }
        let sigma = 1.3;
        let a = DenseMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DenseMatrix::from_row_slice(1, 2, &[sigma * 2f64.sqrt(), 0.0]);
        let k = rbf_kernel(&a, &b, sigma).unwrap();
        assert!((k[(0, 0)] - (-1f64).exp()).abs() < 1e-15);
        assert!(rbf_kernel(&a, &b, 0.0).is_err());
        assert!(rbf_kernel(&a, &normal(1, 3, 2), 1.0).is_err());
    }

    #[test]
    fn kernel_matches_scalar_loop() {
        let xa = normal(5, 3, 2);
        let xb = normal(4, 3, 3);
        let k = rbf_kernel(&xa, &xb, 0.9).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut sq = 0.0;
                for r in 0..3 {
                    sq += (xa[(i, r)] - xb[(j, r)]).powi(2);
                }
                let expected = (-sq / (2.0 * 0.81)).exp();
                assert!((k[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn median_bandwidth_small_cases() {
        let two = DenseMatrix::from_row_slice(2, 1, &[0.0, 3.0]);
        assert_eq!(median_bandwidth(&two, 1000).unwrap(), 3.0);
        let three = DenseMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        assert_eq!(median_bandwidth(&three, 1000).unwrap(), 2.0);
        assert!(median_bandwidth(&DenseMatrix::zeros(1, 2), 1000).is_err());
        // only the first rows count
        let four = DenseMatrix::from_row_slice(4, 1, &[0.0, 3.0, 100.0, 200.0]);
        assert_eq!(median_bandwidth(&four, 2).unwrap(), 3.0);
    }

    #[test]
    fn median_bandwidth_matches_sorted_oracle() {
        let x = normal(50, 4, 7);
        let mut d = Vec::new();
        for i in 0..50 {
            for j in (i + 1)..50 {
                let mut sq = 0.0;
                for r in 0..4 {
                    sq += (x[(i, r)] - x[(j, r)]).powi(2);
                }
                d.push(sq.sqrt());
            }
        }
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = d.len();
        let expected = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
        assert!((median_bandwidth(&x, 1000).unwrap() - expected).abs() < 1e-15);
    }

    fn is_row_of(x: &DenseMatrix, col: &[f64]) -> bool {
        (0..x.nrows()).any(|i| x.row(i).iter().zip(col).all(|(a, b)| a == b))
    }

    #[test]
    fn landmarks_are_distinct_rows_and_deterministic() {
        let x = normal(100, 5, 8);
        let a = init_landmarks(&x, 32, 42).unwrap();
        let b = init_landmarks(&x, 32, 42).unwrap();
        assert_eq!(a, b);
        for j in 0..32 {
            let col: Vec<f64> = a.landmarks.column(j).iter().copied().collect();
            assert!(is_row_of(&x, &col));
        }
        let small = normal(6, 2, 9);
        let all = init_landmarks(&small, 6, 1).unwrap();
        let mut seen = [false; 6];
        for j in 0..6 {
            let i = (0..6)
                .find(|&i| small.row(i).iter().zip(all.landmarks.column(j).iter()).all(|(a, b)| a == b))
                .unwrap();
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(init_landmarks(&small, 7, 1).is_err());
    }

    #[test]
    fn normalization_gives_unit_mean_square_norm() {
        let x = normal(30, 4, 10);
        let layer = init_landmarks(&x, 8, 3).unwrap();
        let batch = forward(&layer, &x, true).unwrap();
        let msn = batch.phi.norm_squared() / 30.0;
        assert!((msn - 1.0).abs() < 1e-8);
        let means = linalg::column_means(&batch.phi);
        assert!(means.amax() < 1e-12);
    }

    #[test]
    fn forward_rejects_degenerate_batches() {
        let x = normal(10, 3, 11);
        let layer = init_landmarks(&x, 4, 3).unwrap();
        assert!(matches!(forward(&layer, &x.rows(0, 1).into_owned(), true), Err(Error::InvalidInput(_))));
        assert!(forward(&layer, &x.rows(0, 1).into_owned(), false).is_ok());
        let same = DenseMatrix::from_fn(3, 3, |_, j| x[(0, j)]);
        assert!(matches!(forward(&layer, &same, true), Err(Error::ScaleUndefined)));
        assert!(forward(&layer, &normal(3, 2, 1), false).is_err());
    }

    #[test]
    fn duplicate_rows_give_identical_features() {
        let mut x = normal(6, 3, 12);
        let row = x.row(1).into_owned();
        x.set_row(4, &row);
        let layer = init_landmarks(&x, 3, 5).unwrap();
        let batch = forward(&layer, &x, true).unwrap();
        assert_eq!(batch.phi.row(1), batch.phi.row(4));
    }

    #[test]
    fn raw_gram_matches_nystrom_kernel() {
        let x = normal(20, 3, 13);
        let mut layer = init_landmarks(&x, 6, 4).unwrap();
        layer.newton_iters = 40;
        let batch = forward(&layer, &x, false).unwrap();
        let vt = layer.landmarks.transpose();
        let kxv = rbf_kernel(&x, &vt, layer.sigma).unwrap();
        let kvv = rbf_kernel(&vt, &vt, layer.sigma).unwrap() + DenseMatrix::identity(6, 6) * layer.epsilon;
        let approx = &kxv * kvv.try_inverse().unwrap() * kxv.transpose();
        let gram = &batch.phi * batch.phi.transpose();
        assert!((gram - approx).norm() < 1e-6);
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let x = normal(8, 3, 14);
        let mut layer = init_landmarks(&x, 3, 2).unwrap();
        let batch = forward(&layer, &x, true).unwrap();
        let cot = DenseMatrix::zeros(8, 3);
        assert_eq!(backward(&batch, &layer, &x, &cot).unwrap(), DenseMatrix::zeros(3, 3));
        let mut x2 = x.clone();
        x2[(0, 0)] += 1.0;
        assert!(matches!(backward(&batch, &layer, &x2, &cot), Err(Error::ContractViolation(_))));
        layer.landmarks[(0, 0)] += 1e-3;
        assert!(matches!(backward(&batch, &layer, &x, &cot), Err(Error::ContractViolation(_))));
        assert!(backward(&batch, &init_landmarks(&x, 3, 2).unwrap(), &x, &DenseMatrix::zeros(8, 2)).is_err());
    }
}
