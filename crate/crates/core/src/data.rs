//! Datasets: CSV and libsvm loaders, standardization, stratified splits,
//! synthetic Gaussian blobs and class-imbalance subsampling.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const DEFAULT_SPLIT: (f64, f64) = (0.6, 0.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    /// Labels visible to the learner; `None` marks an unlabeled row.
    pub labels: Vec<Option<usize>>,
    /// Complete ground truth for scoring, when known (synthetic data).
    pub truth: Option<Vec<usize>>,
    pub k: usize,
    pub split: Vec<Split>,
    pub name: String,
    /// Original label value for each class index, when labels were remapped.
    pub label_values: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: DenseMatrix, labels: Vec<Option<usize>>, k: usize, name: impl Into<String>) -> Result<Self> {
        let n = x.nrows();
        let ds = Self {
            x,
            labels,
            truth: None,
            k,
            split: vec![Split::Train; n],
            name: name.into(),
            label_values: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.labels.len() != n || self.split.len() != n {
            return Err(Error::invalid("labels and split tags must have one entry per row"));
        }
        crate::linalg::ensure_finite(&self.x, "observations")?;
        if let Some(bad) = self.labels.iter().flatten().find(|&&l| l >= self.k) {
            return Err(Error::invalid(format!("label {bad} out of range for k = {}", self.k)));
        }
        if let Some(t) = &self.truth {
            if t.len() != n || t.iter().any(|&l| l >= self.k) {
                return Err(Error::invalid("ground truth must cover every row with labels in [0, k)"));
            }
        }
        Ok(())
    }

    /// The label used for scoring row `i`: ground truth if known, else the
    /// visible label.
    pub fn eval_label(&self, i: usize) -> Option<usize> {
        match &self.truth {
            Some(t) => Some(t[i]),
            None => self.labels[i],
        }
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == split).collect()
    }

    /// Labeled rows of the training split.
    pub fn labeled_train(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.split[i] == Split::Train && self.labels[i].is_some())
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows.iter()),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            truth: self.truth.as_ref().map(|t| rows.iter().map(|&i| t[i]).collect()),
            k: self.k,
            split: rows.iter().map(|&i| self.split[i]).collect(),
            name: self.name.clone(),
            label_values: self.label_values.clone(),
        }
    }

    /// Reassigns split tags, stratified by label (unlabeled rows form their
    /// own stratum). Per stratum of size `m`, `round(train·m)` rows go to
    /// train, `round(val·m)` to validation and the rest to test.
    pub fn assign_splits(&mut self, train: f64, val: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 + 1e-12 {
            return Err(Error::invalid(format!("invalid split fractions {train}, {val}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strata: Vec<Option<usize>> = (0..self.n()).map(|i| self.eval_label(i)).collect();
        let mut keys: Vec<Option<usize>> = strata.clone();
        keys.sort();
        keys.dedup();
        for key in keys {
            let mut rows: Vec<usize> = (0..self.n()).filter(|&i| strata[i] == key).collect();
            rows.shuffle(&mut rng);
            let m = rows.len() as f64;
            let n_train = (train * m).round() as usize;
            let n_val = ((val * m).round() as usize).min(rows.len() - n_train);
            for (pos, &i) in rows.iter().enumerate() {
                self.split[i] = if pos < n_train {
                    Split::Train
                } else if pos < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        Ok(())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_label(cell: &str, line: usize) -> Result<Option<usize>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(line, format!("label '{cell}' is not a number")))?;
    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
        return Err(parse_err(line, format!("label '{cell}' is not a nonnegative integer")));
    }
    Ok(Some(v as usize))
}

fn name_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads a rectangular numeric CSV. Empty cells in the label column mark
/// unlabeled rows. `k` is the largest label plus one unless overridden.
pub fn load_csv(path: &Path, label_column: Option<usize>, header: bool, k_override: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let mut width = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(line, format!("expected {w} fields, found {}", record.len())));
            }
            _ => {}
        }
        if let Some(c) = label_column {
            if c >= record.len() {
                return Err(parse_err(line, format!("label column {c} missing")));
            }
        }
        let mut label = None;
        for (c, cell) in record.iter().enumerate() {
            if Some(c) == label_column {
                label = parse_label(cell, line)?;
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(line, format!("field {c} ('{cell}') is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("field {c} is not finite")));
                }
                values.push(v);
            }
        }
        labels.push(label);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid(format!("{} contains no data rows", path.display())));
    }
    let d = values.len() / n;
    let x = DenseMatrix::from_row_slice(n, d, &values);
    let inferred = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let k = match k_override {
        Some(k) if k < inferred => {
            return Err(Error::invalid(format!("k = {k} is smaller than the largest label + 1 ({inferred})")))
        }
        Some(k) => k,
        None => inferred,
    };
    Dataset::new(x, labels, k, name_of(path))
}

/// Reads `label idx:val ...` lines with 1-based indices. Distinct label
/// values are mapped to class indices in increasing numeric order.
pub fn load_libsvm(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut dim = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split_whitespace();
        let label_tok = parts.next().unwrap();
        let label: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("label '{label_tok}' is not a number")))?;
        let mut entries = Vec::new();
        for tok in parts {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("malformed pair '{tok}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(lineno, format!("malformed index in '{tok}'")))?;
            if idx == 0 {
                return Err(parse_err(lineno, format!("indices are 1-based, found '{tok}'")));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(lineno, format!("malformed value in '{tok}'")))?;
            if !val.is_finite() {
                return Err(parse_err(lineno, format!("value in '{tok}' is not finite")));
            }
            dim = dim.max(idx);
            entries.push((idx - 1, val));
        }
        rows.push((label, entries));
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} contains no data rows", path.display())));
    }
    let mut values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut x = DenseMatrix::zeros(rows.len(), dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (label, entries)) in rows.iter().enumerate() {
        for &(j, v) in entries {
            x[(i, j)] = v;
        }
        labels.push(Some(values.iter().position(|v| v == label).unwrap()));
    }
    let mut ds = Dataset::new(x, labels, values.len(), name_of(path))?;
    ds.label_values = Some(values);
    Ok(ds)
}

/// Writes features followed by a label column (empty when unlabeled).
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for i in 0..ds.n() {
        let mut fields: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        fields.push(ds.labels[i].map(|l| l.to_string()).unwrap_or_default());
        writeln!(out, "{}", fields.join(","))?;
    }
    crate::io::write_atomic(path, &out)
}

/// Per-feature mean and standard deviation from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let rows = ds.rows_in(Split::Train);
        if rows.is_empty() {
            return Err(Error::invalid("standardization needs a nonempty training split"));
        }
        let m = rows.len() as f64;
        let d = ds.d();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            mean[j] = rows.iter().map(|&i| ds.x[(i, j)]).sum::<f64>() / m;
            let var = rows.iter().map(|&i| (ds.x[(i, j)] - mean[j]).powi(2)).sum::<f64>() / m;
            std[j] = var.sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let c = x[(i, j)] - self.mean[j];
            if self.std[j] > 0.0 {
                c / self.std[j]
            } else {
                c
            }
        })
    }
}

/// Zero mean, unit variance per feature on the training split, applied to
/// every row. Constant features are only centered.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let s = Standardizer::fit(ds)?;
    let mut out = ds.clone();
    out.x = s.apply(&ds.x);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub separation: f64,
    /// Fraction of each class's training rows whose labels stay visible.
    pub label_fraction: f64,
    pub seed: u64,
}

/// `k` unit-covariance Gaussian clusters with centers at pairwise distance at
/// least `separation`, balanced classes and a stratified 60/20/20 split.
/// Validation and test labels stay visible for scoring; in the training
/// split each class keeps `max(1, round(label_fraction·m))` labels when
/// `label_fraction > 0`.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let BlobSpec {
        n,
        d,
        k,
        separation,
        label_fraction,
        seed,
    } = *spec;
    if k == 0 || n < k || d == 0 {
        return Err(Error::invalid(format!("need n >= k >= 1 and d >= 1, got n = {n}, k = {k}, d = {d}")));
    }
    if !(0.0..=1.0).contains(&label_fraction) {
        return Err(Error::invalid(format!("label_fraction must lie in [0, 1], got {label_fraction}")));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::invalid(format!("separation must be nonnegative, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(d, k, separation, &mut rng)?;

    let mut truth: Vec<usize> = (0..n).map(|i| i % k).collect();
    truth.shuffle(&mut rng);
    let x = DenseMatrix::from_fn(n, d, |i, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        centers[(truth[i], j)] + z
    });

    let mut ds = Dataset {
        x,
        labels: truth.iter().map(|&l| Some(l)).collect(),
        truth: Some(truth.clone()),
        k,
        split: vec![Split::Train; n],
        name: "blobs".into(),
        label_values: None,
    };
    ds.assign_splits(DEFAULT_SPLIT.0, DEFAULT_SPLIT.1, seed.wrapping_add(1))?;
    hide_train_labels(&mut ds, label_fraction, &mut rng);
    Ok(ds)
}

fn hide_train_labels(ds: &mut Dataset, label_fraction: f64, rng: &mut ChaCha8Rng) {
    let truth = ds.truth.clone().expect("synthetic data has ground truth");
    for c in 0..ds.k {
        let mut rows: Vec<usize> = (0..ds.n())
            .filter(|&i| ds.split[i] == Split::Train && truth[i] == c)
            .collect();
        rows.shuffle(rng);
        let keep = if label_fraction > 0.0 {
            ((label_fraction * rows.len() as f64).round() as usize).max(1).min(rows.len())
        } else {
            0
        };
        for &i in &rows[keep..] {
            ds.labels[i] = None;
        }
    }
}

fn blob_centers(d: usize, k: usize, separation: f64, rng: &mut ChaCha8Rng) -> Result<DenseMatrix> {
    if k <= d {
        let scale = separation / std::f64::consts::SQRT_2;
        return Ok(DenseMatrix::from_fn(k, d, |c, j| if c == j { scale } else { 0.0 }));
    }
    let side = separation * k as f64;
    let mut centers = DenseMatrix::zeros(k, d);
    let mut placed = 0;
    for _ in 0..100_000 {
        let cand: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..=side)).collect();
        let ok = (0..placed).all(|c| {
            let dist: f64 = (0..d).map(|j| (centers[(c, j)] - cand[j]).powi(2)).sum::<f64>().sqrt();
            dist >= separation
        });
        if ok {
            for j in 0..d {
                centers[(placed, j)] = cand[j];
            }
            placed += 1;
            if placed == k {
                return Ok(centers);
            }
        }
    }
    Err(Error::invalid("could not place blob centers at the requested separation"))
}

/// Subsamples unlabeled training rows so their classes follow
/// `class_fractions`, keeping as many rows as possible. Labeled rows and
/// other splits are untouched.
pub fn imbalance(ds: &Dataset, class_fractions: &[f64], seed: u64) -> Result<Dataset> {
    if class_fractions.len() != ds.k {
        return Err(Error::invalid(format!(
            "expected {} class fractions, got {}",
            ds.k,
            class_fractions.len()
        )));
    }
    if class_fractions.iter().any(|f| !(*f >= 0.0)) || (class_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("class fractions must be nonnegative and sum to 1"));
    }
    let truth = ds
        .truth
        .as_ref()
        .ok_or_else(|| Error::invalid("imbalancing unlabeled rows needs ground truth"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.k];
    for i in 0..ds.n() {
        if ds.split[i] == Split::Train && ds.labels[i].is_none() {
            pools[truth[i]].push(i);
        }
    }
    let mut total = f64::INFINITY;
    for (c, &f) in class_fractions.iter().enumerate() {
        if f > 0.0 {
            if pools[c].is_empty() {
                return Err(Error::invalid(format!("class {c} has no unlabeled training rows")));
            }
            total = total.min(pools[c].len() as f64 / f);
        }
    }
    let total = total.floor();
    let mut drop = vec![false; ds.n()];
    for (c, pool) in pools.iter_mut().enumerate() {
        let target = ((class_fractions[c] * total).round() as usize).min(pool.len());
        pool.shuffle(&mut rng);
        for &i in &pool[target..] {
            drop[i] = true;
        }
    }
    let keep: Vec<usize> = (0..ds.n()).filter(|&i| !drop[i]).collect();
    Ok(ds.subset(&keep))
}
