//! The training loop: supervised initialization on labeled data, then
//! mini-batches that alternate matrix balancing with a gradient step on the
//! landmarks, with periodic evaluation, best-checkpoint tracking and a
//! sequential hyperparameter sweep.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balancing::{self, BalancingProblem, KnownEntry, Prior};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::features::{self, NystromLayer};
use crate::labeling::{self, LabelSource};
use crate::linalg::{self, DenseMatrix, RidgeSolution};
use crate::ulr::{self, UlrConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const SAMPLER_STREAM: u64 = 1;
const EVAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const MAX_OBJECTIVE_INCREASES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Use every visible label and every unlabeled row.
    #[default]
    Semi,
    /// Ignore all labels.
    Unsupervised,
    /// Train on labeled rows only; unlabeled rows are labeled at the end.
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceSettings {
    pub iters: usize,
    /// Entropic weight; the median of `|A|` when absent.
    pub mu: Option<f64>,
    /// Cluster-size bounds as fractions of the batch; `1/k` when absent.
    pub n_min_frac: Option<f64>,
    pub n_max_frac: Option<f64>,
}

impl Default for BalanceSettings {
    fn default() -> Self {
        Self {
            iters: balancing::DEFAULT_ROUNDS,
            mu: None,
            n_min_frac: None,
            n_max_frac: None,
        }
    }
}

/// Must-link (`must_link = true`) or must-not-link pair of dataset rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConstraint {
    pub i: usize,
    pub j: usize,
    pub must_link: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub supervised_init_iters: usize,
    pub main_iters: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    /// Share of each mixed batch drawn from labeled rows.
    pub labeled_batch_fraction: Option<f64>,
    pub num_filters: usize,
    pub epsilon: f64,
    pub newton_iters: usize,
    pub normalize: bool,
    pub lambda: f64,
    pub alpha: f64,
    pub rho: f64,
    pub init_learning_rate: f64,
    pub learning_rate: f64,
    pub balance: BalanceSettings,
    pub seed: u64,
    pub constraints: Vec<PairConstraint>,
    pub k_neighbors: usize,
    /// Rows clustered per evaluation when there are no labels.
    pub eval_batch_size: usize,
    /// When set, `lambda` is re-selected from `lambda_grid` on validation
    /// accuracy every this many main iterations.
    pub revalidate_lambda_every: Option<usize>,
    pub lambda_grid: Vec<f64>,
    /// Keep the landmarks after every gradient step.
    pub record_trajectory: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Semi,
            supervised_init_iters: 100,
            main_iters: 400,
            eval_every: 10,
            batch_size: 64,
            labeled_batch_fraction: None,
            num_filters: 32,
            epsilon: features::DEFAULT_NYSTROM_EPSILON,
            newton_iters: features::DEFAULT_NEWTON_ITERS,
            normalize: true,
            lambda: 2f64.powi(-4),
            alpha: 2f64.powi(-10),
            rho: 2f64.powi(-4),
            init_learning_rate: 2f64.powi(3),
            learning_rate: 2f64.powi(3),
            balance: BalanceSettings::default(),
            seed: 0,
            constraints: Vec::new(),
            k_neighbors: 1,
            eval_batch_size: 200,
            revalidate_lambda_every: None,
            lambda_grid: Vec::new(),
            record_trajectory: false,
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if self.num_filters == 0 {
            return Err(Error::invalid("num_filters must be at least 1"));
        }
        if self.k_neighbors == 0 {
            return Err(Error::invalid("k_neighbors must be at least 1"));
        }
        if self.eval_batch_size < 2 {
            return Err(Error::invalid("eval_batch_size must be at least 2"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if let Some(f) = self.labeled_batch_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("labeled_batch_fraction must lie in (0, 1], got {f}")));
            }
        }
        for lr in [self.init_learning_rate, self.learning_rate] {
            self.ulr(lr).validate()?;
        }
        if let Some(f) = self.balance.n_min_frac {
            check_fraction("n_min_frac", f)?;
        }
        if let Some(f) = self.balance.n_max_frac {
            check_fraction("n_max_frac", f)?;
        }
        if let (Some(lo), Some(hi)) = (self.balance.n_min_frac, self.balance.n_max_frac) {
            if lo > hi {
                return Err(Error::invalid(format!("n_min_frac {lo} exceeds n_max_frac {hi}")));
            }
        }
        if let Some(mu) = self.balance.mu {
            if !(mu > 0.0) {
                return Err(Error::invalid(format!("mu must be positive, got {mu}")));
            }
        }
        if let Some(every) = self.revalidate_lambda_every {
            if every == 0 || self.lambda_grid.is_empty() {
                return Err(Error::invalid("lambda revalidation needs a positive period and a nonempty grid"));
            }
            if self.lambda_grid.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::invalid("lambda grid values must be positive"));
            }
        }
        for c in &self.constraints {
            if c.i == c.j {
                return Err(Error::invalid(format!("constraint pairs a row with itself ({})", c.i)));
            }
        }
        Ok(())
    }

    pub fn ulr(&self, learning_rate: f64) -> UlrConfig {
        UlrConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            rho: self.rho,
            learning_rate,
        }
    }

    fn size_fracs(&self, k: usize) -> (f64, f64) {
        let even = 1.0 / k as f64;
        (
            self.balance.n_min_frac.unwrap_or(even),
            self.balance.n_max_frac.unwrap_or(even),
        )
    }
}

/// Model snapshot in a format-versioned JSON document. Matrices are stored
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub d: usize,
    pub p: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub newton_iters: usize,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    pub k: Option<usize>,
    #[serde(rename = "W")]
    pub w: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
    pub iteration: usize,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn capture(layer: &NystromLayer, classifier: Option<&RidgeSolution>, iteration: usize, config: Option<&TrainConfig>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            d: layer.input_dim(),
            p: layer.num_filters(),
            sigma: layer.sigma,
            epsilon: layer.epsilon,
            newton_iters: layer.newton_iters,
            v: linalg::to_row_major(&layer.landmarks),
            k: classifier.map(|c| c.weights.ncols()),
            w: classifier.map(|c| linalg::to_row_major(&c.weights)),
            b: classifier.map(|c| c.bias.iter().copied().collect()),
            iteration,
            config: config.cloned(),
        }
    }

    pub fn layer(&self) -> Result<NystromLayer> {
        let v = linalg::from_row_major(self.d, self.p, &self.v)?;
        NystromLayer::new(v, self.sigma, self.epsilon, self.newton_iters)
    }

    pub fn classifier(&self) -> Result<Option<RidgeSolution>> {
        match (&self.w, &self.b, self.k) {
            (Some(w), Some(b), Some(k)) => {
                if b.len() != k {
                    return Err(Error::invalid("checkpoint bias length differs from k"));
                }
                Ok(Some(RidgeSolution {
                    weights: linalg::from_row_major(self.p, k, w)?,
                    bias: nalgebra::DVector::from_column_slice(b),
                    objective: f64::NAN,
                }))
            }
            (None, None, None) => Ok(None),
            _ => Err(Error::invalid("checkpoint classifier fields W, b and k must appear together")),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint format_version {}", cp.format_version)));
        }
        cp.layer()?;
        cp.classifier()?;
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub layer: NystromLayer,
    pub classifier: Option<RidgeSolution>,
    /// Gradient steps taken so far, both phases.
    pub iteration: usize,
    pub best_val_accuracy: f64,
    pub best_iteration: Option<usize>,
    pub best_checkpoint: Option<Checkpoint>,
    /// Classifier penalty currently in use.
    pub lambda: f64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(layer: NystromLayer) -> Self {
        Self::seeded(layer, 0, TrainConfig::default().lambda)
    }

    pub fn seeded(layer: NystromLayer, seed: u64, lambda: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SAMPLER_STREAM);
        Self {
            layer,
            classifier: None,
            iteration: 0,
            best_val_accuracy: 0.0,
            best_iteration: None,
            best_checkpoint: None,
            lambda,
            rng,
        }
    }
}

/// Draws batches without replacement within an epoch; leftovers too few for
/// a batch are dropped and a new shuffled epoch begins.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>) -> Self {
        let pos = pool.len();
        Self { order: pool, pos }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn draw(&mut self, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        assert!(m <= self.order.len(), "batch larger than pool");
        if self.pos + m > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + m].to_vec();
        self.pos += m;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub objective: f64,
    pub marginal_violation: Option<f64>,
    pub known_violation: Option<f64>,
    /// Largest deviation of `M` from the in-batch pair constraints.
    pub constraint_violation: Option<f64>,
    pub mu: Option<f64>,
    pub mu_doublings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub split: Split,
    pub accuracy: f64,
    pub objective: Option<f64>,
    pub marginal_violation: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub iterations: Vec<IterationRecord>,
    pub evals: Vec<EvalRecord>,
    pub init_val_accuracy: Option<f64>,
    pub init_test_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub best_iteration: Option<usize>,
    pub test_at_best_val: Option<f64>,
    pub max_test_accuracy: Option<f64>,
    /// `(main iteration, lambda)` after each revalidation.
    pub lambda_history: Vec<(usize, f64)>,
    /// Set when accuracies come from Hungarian-matched clusters, which peek
    /// at ground truth through the matching.
    pub unsupervised: bool,
}

impl RunMetrics {
    /// `iteration,split,accuracy,objective,marginal_violation,mu`, one row per
    /// evaluation; absent values are empty cells.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("iteration,split,accuracy,objective,marginal_violation,mu\n");
        for r in &self.evals {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration,
                r.split.as_str(),
                r.accuracy,
                opt(r.objective),
                opt(r.marginal_violation),
                opt(r.mu)
            ));
        }
        out
    }

    pub fn accuracy_trajectory(&self, split: Split) -> Vec<(usize, f64)> {
        self.evals
            .iter()
            .filter(|r| r.split == split)
            .map(|r| (r.iteration, r.accuracy))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLabel {
    pub row: usize,
    pub label: usize,
    pub source: LabelSource,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: RunMetrics,
    pub final_labels: Vec<FinalLabel>,
    /// Landmarks after each gradient step, when requested.
    pub trajectory: Vec<DenseMatrix>,
}

/// Which rows and labels the learner may use under the configured mode.
#[derive(Debug, Clone)]
struct View {
    train: Vec<usize>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    labels: Vec<Option<usize>>,
}

impl View {
    fn new(ds: &Dataset, mode: Mode) -> Self {
        let train = ds.rows_in(Split::Train);
        let labels: Vec<Option<usize>> = match mode {
            Mode::Unsupervised => vec![None; ds.n()],
            _ => (0..ds.n())
                .map(|i| if ds.split[i] == Split::Train { ds.labels[i] } else { None })
                .collect(),
        };
        let labeled: Vec<usize> = train.iter().copied().filter(|&i| labels[i].is_some()).collect();
        let unlabeled: Vec<usize> = match mode {
            Mode::Supervised => Vec::new(),
            _ => train.iter().copied().filter(|&i| labels[i].is_none()).collect(),
        };
        Self {
            train,
            labeled,
            unlabeled,
            labels,
        }
    }

    fn label_of(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }
}

fn validate_inputs(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    ds.validate()?;
    cfg.validate()?;
    if ds.k == 0 {
        return Err(Error::invalid("dataset must declare at least one class"));
    }
    let n_train = ds.rows_in(Split::Train).len();
    if n_train < 2 {
        return Err(Error::invalid("training split needs at least 2 rows"));
    }
    if cfg.num_filters > n_train {
        return Err(Error::invalid(format!(
            "num_filters = {} exceeds the {n_train} training rows",
            cfg.num_filters
        )));
    }
    for c in &cfg.constraints {
        if c.i >= ds.n() || c.j >= ds.n() {
            return Err(Error::invalid(format!("constraint ({}, {}) out of range", c.i, c.j)));
        }
    }
    Ok(())
}

/// Landmarks drawn from the training rows with the run seed.
pub fn initial_layer(ds: &Dataset, cfg: &TrainConfig) -> Result<NystromLayer> {
    let x_train = ds.x.select_rows(ds.rows_in(Split::Train).iter());
    let mut layer = features::init_landmarks(&x_train, cfg.num_filters, cfg.seed)?;
    layer.epsilon = cfg.epsilon;
    layer.newton_iters = cfg.newton_iters;
    layer.validate()?;
    Ok(layer)
}

fn labels_matrix(rows: &[usize], view: &View, k: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), k, |a, c| {
        if view.label_of(rows[a]) == Some(c) {
            1.0
        } else {
            0.0
        }
    })
}

struct Loop<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    view: View,
    metrics: RunMetrics,
    trajectory: Vec<DenseMatrix>,
    increases: usize,
    last_objective: Option<f64>,
}

impl<'a> Loop<'a> {
    fn step(&mut self, state: &mut TrainState, rows: &[usize], phase: Phase, lr: f64) -> Result<()> {
        let x = self.ds.x.select_rows(rows.iter());
        let batch = features::forward(&state.layer, &x, self.cfg.normalize)?;
        let fully_labeled = rows.iter().all(|&i| self.view.label_of(i).is_some());
        let mut record = IterationRecord {
            iteration: state.iteration + 1,
            phase,
            objective: f64::NAN,
            marginal_violation: None,
            known_violation: None,
            constraint_violation: None,
            mu: None,
            mu_doublings: 0,
        };
        let m = if fully_labeled {
            let y = labels_matrix(rows, &self.view, self.ds.k);
            &y * y.transpose()
        } else {
            let a = linalg::compute_a(&batch.phi, state.lambda)?;
            let batch_labels: Vec<Option<usize>> = rows.iter().map(|&i| self.view.label_of(i)).collect();
            let mut known = balancing::entries_from_labels(&batch_labels);
            let pairs = self.in_batch_constraints(rows);
            known.extend(pairs.iter().copied());
            let nb = rows.len() as f64;
            let (lo, hi) = self.cfg.size_fracs(self.ds.k);
            let mu = self.cfg.balance.mu.unwrap_or_else(|| balancing::default_mu(&a).mu);
            let problem = BalancingProblem::new(a, known, lo * nb, hi * nb, mu)?
                .with_prior(Prior::Uniform { k: self.ds.k })
                .with_iters(self.cfg.balance.iters);
            let out = balancing::balance_with_doubling(&problem, balancing::MAX_MU_DOUBLINGS)?;
            record.marginal_violation = Some(out.result.marginal_violation);
            record.known_violation = Some(out.result.known_violation);
            record.mu = Some(out.result.mu);
            record.mu_doublings = out.doublings;
            if !pairs.is_empty() {
                let worst = pairs
                    .iter()
                    .map(|e| (out.result.m[(e.i, e.j)] - e.value).abs())
                    .fold(0.0, f64::max);
                record.constraint_violation = Some(worst);
            }
            out.result.m
        };
        let cfg = UlrConfig {
            lambda: state.lambda,
            ..self.cfg.ulr(lr)
        };
        let objective = ulr::ulr_step(state, &x, &batch, &m, &cfg)?;
        record.objective = objective;
        self.metrics.iterations.push(record);
        if self.cfg.record_trajectory {
            self.trajectory.push(state.layer.landmarks.clone());
        }
        match self.last_objective {
            Some(prev) if objective > prev => {
                self.increases += 1;
                if self.increases >= MAX_OBJECTIVE_INCREASES {
                    return Err(Error::Diverged {
                        iteration: state.iteration,
                        reason: format!("objective increased {MAX_OBJECTIVE_INCREASES} times in a row"),
                    });
                }
            }
            _ => self.increases = 0,
        }
        self.last_objective = Some(objective);
        Ok(())
    }

    /// Global pair constraints with both rows in the batch, re-indexed to
    /// batch positions, in both orientations.
    fn in_batch_constraints(&self, rows: &[usize]) -> Vec<KnownEntry> {
        if self.cfg.constraints.is_empty() {
            return Vec::new();
        }
        let pos_of = |r: usize| rows.iter().position(|&x| x == r);
        let mut out = Vec::new();
        for c in &self.cfg.constraints {
            if let (Some(a), Some(b)) = (pos_of(c.i), pos_of(c.j)) {
                let v = if c.must_link { 1.0 } else { 0.0 };
                out.push(KnownEntry::new(a, b, v));
                out.push(KnownEntry::new(b, a, v));
            }
        }
        out.sort_by_key(|e| (e.i, e.j));
        out.dedup();
        out
    }

    fn record_eval(&mut self, state: &mut TrainState, main_iter: usize) -> Result<()> {
        let eval = evaluate_view(state, self.ds, &self.view, self.cfg)?;
        let last = self.metrics.iterations.last();
        let (objective, mv, mu) = match last {
            Some(r) => (Some(r.objective), r.marginal_violation, r.mu),
            None => (None, None, None),
        };
        for (split, acc) in [(Split::Val, eval.val), (Split::Test, eval.test)] {
            if let Some(accuracy) = acc {
                self.metrics.evals.push(EvalRecord {
                    iteration: main_iter,
                    split,
                    accuracy,
                    objective,
                    marginal_violation: mv,
                    mu,
                });
            }
        }
        if main_iter == 0 {
            self.metrics.init_val_accuracy = eval.val;
            self.metrics.init_test_accuracy = eval.test;
        }
        if let Some(t) = eval.test {
            self.metrics.max_test_accuracy = Some(self.metrics.max_test_accuracy.map_or(t, |m| m.max(t)));
        }
        let score = eval.val.or(eval.test);
        if let Some(v) = score {
            if state.best_iteration.is_none() || v > state.best_val_accuracy {
                state.best_val_accuracy = v;
                state.best_iteration = Some(main_iter);
                state.best_checkpoint = Some(Checkpoint::capture(
                    &state.layer,
                    eval.classifier.as_ref(),
                    state.iteration,
                    Some(self.cfg),
                ));
                self.metrics.best_val_accuracy = eval.val;
                self.metrics.best_iteration = Some(main_iter);
                self.metrics.test_at_best_val = eval.test;
            }
        }
        Ok(())
    }

    fn revalidate_lambda(&mut self, state: &mut TrainState, main_iter: usize) -> Result<()> {
        if self.view.labeled.is_empty() {
            return Ok(());
        }
        let mut best: Option<(f64, f64)> = None;
        for &lambda in &self.cfg.lambda_grid {
            let mut trial = state.clone();
            trial.lambda = lambda;
            let acc = evaluate_view(&trial, self.ds, &self.view, self.cfg)?.val.unwrap_or(0.0);
            if best.is_none_or(|(b, _)| acc > b) {
                best = Some((acc, lambda));
            }
        }
        if let Some((_, lambda)) = best {
            state.lambda = lambda;
            self.metrics.lambda_history.push((main_iter, lambda));
        }
        Ok(())
    }
}

fn batch_plan(view: &View, cfg: &TrainConfig) -> (usize, usize) {
    let n_s = view.labeled.len();
    let n_u = view.unlabeled.len();
    let nb = cfg.batch_size.min(n_s + n_u);
    if n_u == 0 {
        return (nb.min(n_s), 0);
    }
    if n_s == 0 {
        return (0, nb.min(n_u));
    }
    let frac = cfg
        .labeled_batch_fraction
        .unwrap_or_else(|| (2.0 * n_s as f64 / view.train.len() as f64).min(1.0));
    let mut n_l = (frac * nb as f64).ceil() as usize;
    if n_s >= 2 {
        n_l = n_l.max(2);
    }
    n_l = n_l.min(n_s).min(nb);
    (n_l, (nb - n_l).min(n_u))
}

fn abort(err: Error, metrics: &RunMetrics) -> Error {
    if err.is_numeric() && !matches!(err, Error::Aborted { .. }) {
        Error::Aborted {
            reason: err.to_string(),
            partial: Box::new(metrics.clone()),
        }
    } else {
        err
    }
}

/// Gradient steps on labeled batches with `M = YYᵀ` and no balancing.
/// Skipped when fewer than two labeled rows are available.
pub fn supervised_init(state: &mut TrainState, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    validate_inputs(ds, cfg)?;
    let mut lp = Loop {
        ds,
        cfg,
        view: View::new(ds, cfg.mode),
        metrics: RunMetrics::default(),
        trajectory: Vec::new(),
        increases: 0,
        last_objective: None,
    };
    run_init(state, &mut lp)
}

fn run_init(state: &mut TrainState, lp: &mut Loop) -> Result<()> {
    if lp.view.labeled.len() < 2 {
        return Ok(());
    }
    let mut sampler = BatchSampler::new(lp.view.labeled.clone());
    let m = lp.cfg.batch_size.min(sampler.len());
    for _ in 0..lp.cfg.supervised_init_iters {
        let rows = sampler.draw(m, &mut state.rng);
        lp.step(state, &rows, Phase::Init, lp.cfg.init_learning_rate)?;
    }
    Ok(())
}

/// Runs supervised initialization (when labels exist) and the main loop,
/// then labels every row.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    validate_inputs(ds, cfg)?;
    let layer = initial_layer(ds, cfg)?;
    let mut state = TrainState::seeded(layer, cfg.seed, cfg.lambda);
    let mut lp = Loop {
        ds,
        cfg,
        view: View::new(ds, cfg.mode),
        metrics: RunMetrics::default(),
        trajectory: Vec::new(),
        increases: 0,
        last_objective: None,
    };
    lp.metrics.unsupervised = lp.view.labeled.is_empty();

    let result = run_all(&mut state, &mut lp);
    if let Err(e) = result {
        return Err(abort(e, &lp.metrics));
    }
    let final_labels = match final_labeling(&mut state, ds, &lp.view, cfg) {
        Ok(l) => l,
        Err(e) => return Err(abort(e, &lp.metrics)),
    };
    Ok(TrainOutcome {
        state,
        metrics: lp.metrics,
        final_labels,
        trajectory: lp.trajectory,
    })
}

fn run_all(state: &mut TrainState, lp: &mut Loop) -> Result<()> {
    run_init(state, lp)?;
    lp.increases = 0;
    lp.last_objective = None;
    if lp.cfg.revalidate_lambda_every.is_some() {
        lp.revalidate_lambda(state, 0)?;
    }
    lp.record_eval(state, 0)?;

    let (n_l, n_u) = batch_plan(&lp.view, lp.cfg);
    let mut labeled = BatchSampler::new(lp.view.labeled.clone());
    let mut unlabeled = BatchSampler::new(lp.view.unlabeled.clone());
    for t in 1..=lp.cfg.main_iters {
        let mut rows = labeled.draw(n_l, &mut state.rng);
        rows.extend(unlabeled.draw(n_u, &mut state.rng));
        lp.step(state, &rows, Phase::Main, lp.cfg.learning_rate)?;
        if let Some(every) = lp.cfg.revalidate_lambda_every {
            if t % every == 0 {
                lp.revalidate_lambda(state, t)?;
            }
        }
        if t % lp.cfg.eval_every == 0 || t == lp.cfg.main_iters {
            lp.record_eval(state, t)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Evaluation {
    val: Option<f64>,
    test: Option<f64>,
    classifier: Option<RidgeSolution>,
}

fn all_features(state: &TrainState, ds: &Dataset, cfg: &TrainConfig) -> Result<DenseMatrix> {
    Ok(features::forward(&state.layer, &ds.x, cfg.normalize)?.phi)
}

fn scored_accuracy(pred: &[usize], rows: &[usize], ds: &Dataset) -> Option<f64> {
    let pairs: Vec<(usize, usize)> = rows
        .iter()
        .zip(pred)
        .filter_map(|(&i, &p)| ds.eval_label(i).map(|t| (p, t)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().filter(|(p, t)| p == t).count() as f64 / pairs.len() as f64)
}

/// Propagated training labels and the classifier fit on them.
fn semi_classifier(phi: &DenseMatrix, view: &View, ds: &Dataset, state: &TrainState, cfg: &TrainConfig) -> Result<(Vec<usize>, RidgeSolution)> {
    let phi_train = phi.select_rows(view.train.iter());
    let positions: Vec<usize> = (0..view.train.len())
        .filter(|&a| view.label_of(view.train[a]).is_some())
        .collect();
    let labels_s: Vec<usize> = positions.iter().map(|&a| view.label_of(view.train[a]).unwrap()).collect();
    let prop = labeling::nn_propagate(&phi_train, &positions, &labels_s, cfg.k_neighbors)?;
    let classifier = labeling::fit_final_classifier(&phi_train, &prop.labels, ds.k, state.lambda)?;
    Ok((prop.labels, classifier))
}

/// Balances the similarity of `rows` with diagonal-only constraints and
/// equal size bounds, then clusters the result.
fn cluster_rows(phi: &DenseMatrix, rows: &[usize], state: &TrainState, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let sub = phi.select_rows(rows.iter());
    let a = linalg::compute_a(&sub, state.lambda)?;
    let n = rows.len() as f64;
    let (lo, hi) = cfg.size_fracs(ds.k);
    let mu = cfg.balance.mu.unwrap_or_else(|| balancing::default_mu(&a).mu);
    let problem = BalancingProblem::new(a, balancing::diagonal_entries(rows.len()), lo * n, hi * n, mu)?
        .with_prior(Prior::Uniform { k: ds.k })
        .with_iters(cfg.balance.iters);
    let out = balancing::balance_with_doubling(&problem, balancing::MAX_MU_DOUBLINGS)?;
    Ok(labeling::spectral_cluster(&out.result.m, ds.k.min(rows.len()), cfg.seed ^ EVAL_SEED_SALT)?.labels)
}

fn eval_sample(rows: &[usize], cfg: &TrainConfig, salt: u64) -> Vec<usize> {
    let mut rows = rows.to_vec();
    if rows.len() > cfg.eval_batch_size {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_SEED_SALT ^ salt);
        rows.shuffle(&mut rng);
        rows.truncate(cfg.eval_batch_size);
        rows.sort_unstable();
    }
    rows
}

fn matched_accuracy(pred: &[usize], rows: &[usize], ds: &Dataset) -> Result<Option<f64>> {
    let pairs: Vec<(usize, usize)> = rows
        .iter()
        .zip(pred)
        .filter_map(|(&i, &p)| ds.eval_label(i).map(|t| (p, t)))
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    Ok(Some(labeling::hungarian_match(&p, &t, ds.k)?.accuracy))
}

fn split_accuracy(phi: &DenseMatrix, state: &TrainState, ds: &Dataset, view: &View, cfg: &TrainConfig, split: Split, classifier: Option<&RidgeSolution>) -> Result<Option<f64>> {
    let rows = ds.rows_in(split);
    if rows.is_empty() {
        return Ok(None);
    }
    match classifier {
        Some(c) => {
            let pred = c.predict(&phi.select_rows(rows.iter()));
            Ok(scored_accuracy(&pred, &rows, ds))
        }
        None => {
            let salt = match split {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            let sample = eval_sample(&rows, cfg, salt);
            if sample.len() < 2 {
                return Ok(None);
            }
            let _ = view;
            let pred = cluster_rows(phi, &sample, state, ds, cfg)?;
            matched_accuracy(&pred, &sample, ds)
        }
    }
}

fn evaluate_view(state: &TrainState, ds: &Dataset, view: &View, cfg: &TrainConfig) -> Result<Evaluation> {
    let phi = all_features(state, ds, cfg)?;
    let classifier = if view.labeled.is_empty() {
        None
    } else {
        Some(semi_classifier(&phi, view, ds, state, cfg)?.1)
    };
    Ok(Evaluation {
        val: split_accuracy(&phi, state, ds, view, cfg, Split::Val, classifier.as_ref())?,
        test: split_accuracy(&phi, state, ds, view, cfg, Split::Test, classifier.as_ref())?,
        classifier,
    })
}

/// Accuracy on one split. With labels: nearest-neighbor propagation over the
/// training rows, a ridge classifier on the result, scored on the split.
/// Without: balanced spectral clustering of (a sample of) the split, scored
/// after Hungarian matching.
pub fn evaluate(state: &TrainState, ds: &Dataset, split: &str, cfg: &TrainConfig) -> Result<f64> {
    let split = Split::parse(split)?;
    let view = View::new(ds, cfg.mode);
    let phi = all_features(state, ds, cfg)?;
    let classifier = if view.labeled.is_empty() {
        None
    } else {
        Some(semi_classifier(&phi, &view, ds, state, cfg)?.1)
    };
    split_accuracy(&phi, state, ds, &view, cfg, split, classifier.as_ref())?
        .ok_or_else(|| Error::invalid(format!("split '{}' has no rows with known labels", split.as_str())))
}

fn final_labeling(state: &mut TrainState, ds: &Dataset, view: &View, cfg: &TrainConfig) -> Result<Vec<FinalLabel>> {
    let phi = all_features(state, ds, cfg)?;
    let mut out: Vec<Option<FinalLabel>> = vec![None; ds.n()];
    let classifier = if view.labeled.is_empty() {
        let sample = eval_sample(&view.train, cfg, 0);
        let clusters = cluster_rows(&phi, &sample, state, ds, cfg)?;
        let classifier =
            labeling::fit_final_classifier(&phi.select_rows(sample.iter()), &clusters, ds.k, state.lambda)?;
        for (&row, &label) in sample.iter().zip(&clusters) {
            out[row] = Some(FinalLabel {
                row,
                label,
                source: LabelSource::Spectral,
            });
        }
        classifier
    } else {
        let (train_labels, classifier) = semi_classifier(&phi, view, ds, state, cfg)?;
        for (&row, &label) in view.train.iter().zip(&train_labels) {
            let source = if view.label_of(row).is_some() {
                LabelSource::GroundTruth
            } else {
                LabelSource::NearestNeighbor
            };
            out[row] = Some(FinalLabel { row, label, source });
        }
        classifier
    };
    let preds = classifier.predict(&phi);
    let labels = out
        .into_iter()
        .enumerate()
        .map(|(row, l)| {
            l.unwrap_or(FinalLabel {
                row,
                label: preds[row],
                source: LabelSource::Classifier,
            })
        })
        .collect();
    state.classifier = Some(classifier);
    Ok(labels)
}

/// Final labels as `row,label,source` CSV.
pub fn labels_csv(labels: &[FinalLabel]) -> String {
    let mut out = String::from("row,label,source\n");
    for l in labels {
        out.push_str(&format!("{},{},{}\n", l.row, l.label, l.source.as_str()));
    }
    out
}

fn pow2(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|i| 2f64.powi(i)).collect()
}

/// Value grids for [`sweep`], tuned in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrids {
    pub lambda: Vec<f64>,
    pub init_learning_rate: Vec<f64>,
    /// Minimum cluster size as a fraction of the batch; the maximum becomes
    /// `1 − (k−1)·min`. Tuned only when present.
    pub size_bounds: Option<Vec<f64>>,
    pub learning_rate: Vec<f64>,
    pub rho: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Main-loop period of the lambda revalidation during sweep runs.
    pub revalidate_lambda_every: usize,
}

impl Default for SweepGrids {
    fn default() -> Self {
        Self {
            lambda: pow2(-40, 0),
            init_learning_rate: pow2(-10, 5),
            size_bounds: None,
            learning_rate: pow2(-10, 5),
            rho: pow2(-10, 10),
            alpha: pow2(-10, 10),
            revalidate_lambda_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub parameter: String,
    pub value: f64,
    /// `None` when the run diverged.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub best: TrainConfig,
    pub records: Vec<SweepRecord>,
    /// Scores are Hungarian-matched cluster accuracies.
    pub unsupervised: bool,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,value,val_accuracy\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{}\n",
                r.parameter,
                r.value,
                r.val_accuracy.map(|a| a.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

fn sweep_score(ds: &Dataset, cfg: &TrainConfig) -> Result<Option<f64>> {
    match train(ds, cfg) {
        Ok(out) => {
            let m = &out.metrics;
            Ok(m.best_val_accuracy.or(m.max_test_accuracy).or(Some(0.0)))
        }
        Err(e) if e.is_numeric() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Validation accuracy of the classifier fit at the initial landmarks.
fn lambda_score(ds: &Dataset, cfg: &TrainConfig) -> Result<Option<f64>> {
    let layer = initial_layer(ds, cfg)?;
    let state = TrainState::seeded(layer, cfg.seed, cfg.lambda);
    let view = View::new(ds, cfg.mode);
    match evaluate_view(&state, ds, &view, cfg) {
        Ok(e) => Ok(e.val.or(e.test).or(Some(0.0))),
        Err(e) if e.is_numeric() => Ok(None),
        Err(e) => Err(e),
    }
}

fn tune(
    name: &str,
    grid: &[f64],
    base: &TrainConfig,
    records: &mut Vec<SweepRecord>,
    apply: impl Fn(&mut TrainConfig, f64),
    score: impl Fn(&TrainConfig) -> Result<Option<f64>>,
) -> Result<TrainConfig> {
    if grid.is_empty() {
        return Err(Error::invalid(format!("the {name} grid is empty")));
    }
    let mut best: Option<(f64, TrainConfig)> = None;
    for &value in grid {
        let mut cfg = base.clone();
        apply(&mut cfg, value);
        let acc = score(&cfg)?;
        records.push(SweepRecord {
            parameter: name.to_string(),
            value,
            val_accuracy: acc,
        });
        if let Some(a) = acc {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, cfg));
            }
        }
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::invalid(format!("every value in the {name} grid diverged")))
}

/// Tunes one hyperparameter at a time, the rest frozen at their current
/// best: lambda (classifier on initial features), the labeled-phase learning
/// rate at `alpha = rho = 2^-4`, optional size bounds, the main learning
/// rate, rho, then alpha. Runs that diverge are skipped; ties keep the
/// earlier grid value. Without labels the order is learning rate, lambda,
/// rho, alpha, scored by matched cluster accuracy.
pub fn sweep(ds: &Dataset, grids: &SweepGrids, base: &TrainConfig) -> Result<SweepReport> {
    validate_inputs(ds, base)?;
    let mut records = Vec::new();
    let view = View::new(ds, base.mode);
    let unsupervised = view.labeled.is_empty();
    let train_score = |c: &TrainConfig| sweep_score(ds, c);

    let mut cfg = base.clone();
    if unsupervised {
        cfg = tune("learning_rate", &grids.learning_rate, &cfg, &mut records, |c, v| c.learning_rate = v, train_score)?;
        cfg = tune("lambda", &grids.lambda, &cfg, &mut records, |c, v| c.lambda = v, train_score)?;
    } else {
        cfg = tune("lambda", &grids.lambda, &cfg, &mut records, |c, v| c.lambda = v, |c| lambda_score(ds, c))?;
        cfg.lambda_grid = grids.lambda.clone();
        cfg.revalidate_lambda_every = Some(grids.revalidate_lambda_every.max(1));
        let (alpha, rho) = (cfg.alpha, cfg.rho);
        let init_base = TrainConfig {
            alpha: 2f64.powi(-4),
            rho: 2f64.powi(-4),
            main_iters: 0,
            ..cfg.clone()
        };
        let tuned = tune(
            "init_learning_rate",
            &grids.init_learning_rate,
            &init_base,
            &mut records,
            |c, v| c.init_learning_rate = v,
            train_score,
        )?;
        cfg.init_learning_rate = tuned.init_learning_rate;
        cfg.alpha = alpha;
        cfg.rho = rho;
        if let Some(bounds) = &grids.size_bounds {
            let k = ds.k as f64;
            cfg = tune(
                "size_bounds",
                bounds,
                &cfg,
                &mut records,
                |c, v| {
                    c.balance.n_min_frac = Some(v);
                    c.balance.n_max_frac = Some((1.0 - (k - 1.0) * v).clamp(v, 1.0));
                },
                train_score,
            )?;
        }
        cfg = tune("learning_rate", &grids.learning_rate, &cfg, &mut records, |c, v| c.learning_rate = v, train_score)?;
    }
    cfg = tune("rho", &grids.rho, &cfg, &mut records, |c, v| c.rho = v, train_score)?;
    cfg = tune("alpha", &grids.alpha, &cfg, &mut records, |c, v| c.alpha = v, train_score)?;
    Ok(SweepReport {
        best: cfg,
        records,
        unsupervised,
    })
}
