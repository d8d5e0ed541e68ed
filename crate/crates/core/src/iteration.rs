//! Pool-based selection loop.
//!
//! ```text
//! init: label a seeded random fraction of the dataset
//! repeat T times:
//!     detect on the pool
//!     recompute weights (and the size density for WCR) from the labeled set
//!     score the pool, take the top batch
//!     move the batch from the pool to the labeled set
//! ```
//!
//! All mutation goes through [`IterationState::apply_oracle`]; every
//! iteration appends one record to an append-only history from which the
//! labeled set can be replayed.

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error as StdError;
use std::io::Write;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetIndex, DetectionMap};
use crate::density::{extract_size_feature, select_k, DensityError, FitOptions, SizeFeature};
use crate::numeric::{ceil_fraction, derive_seed};
use crate::scoring::{
    rank_order, score_pool, ImageScoreReport, ScoreContext, ScoringError, Strategy,
    DEFAULT_MIN_SCORE,
};
use crate::weights::{CategoryWeightTable, W1Mode};

/// Version tag written into state and history files.
pub const STATE_VERSION: u32 = 1;

pub type AdapterError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{name} must be in (0, 1), got {value}")]
    InvalidFraction { name: &'static str, value: f64 },
    #[error("batch of {batch} exceeds pool of {pool}")]
    BatchExceedsPool { batch: usize, pool: usize },
    #[error("image `{0}` is not in the pool")]
    NotInPool(String),
    #[error("image `{0}` selected twice in one batch")]
    DuplicateSelection(String),
    #[error("score reports do not cover exactly the {expected} images of the {what}")]
    ReportsMismatch { what: &'static str, expected: usize },
    #[error("all {0} iterations already completed")]
    IterationsExhausted(usize),
    #[error("state does not match the dataset: {0}")]
    StateMismatch(String),
    #[error("histories refer to different datasets")]
    MismatchedDatasets,
    #[error("detector adapter failed at iteration {iteration}: {source}")]
    Adapter {
        iteration: usize,
        #[source]
        source: AdapterError,
    },
    #[error("checkpoint failed: {0}")]
    Checkpoint(AdapterError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub strategy: Strategy,
    pub init_fraction: f64,
    pub batch_fraction: f64,
    pub iterations: usize,
    pub init_seed: u64,
    pub gmm_seed: u64,
    pub random_seed: u64,
    pub k_min: usize,
    pub k_max: usize,
    pub min_score: f64,
    pub w1_mode: W1Mode,
    pub fit: FitOptions,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Wcr,
            init_fraction: 0.1,
            batch_fraction: 0.1,
            iterations: 4,
            init_seed: 0,
            gmm_seed: 1,
            random_seed: 2,
            k_min: 1,
            k_max: 8,
            min_score: DEFAULT_MIN_SCORE,
            w1_mode: W1Mode::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: Option<f64>,
    pub per_category_ap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0 for the random initialization.
    pub iteration: usize,
    /// `init` or the strategy tag.
    pub strategy: String,
    /// Newly labeled ids in rank order.
    pub selected: Vec<String>,
    pub labeled_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<CategoryWeightTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmm_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct IterationState {
    dataset: Arc<DatasetIndex>,
    labeled: Vec<String>,
    pool: BTreeSet<String>,
    k: usize,
    t: usize,
    init_fraction: f64,
    batch_fraction: f64,
    seed: u64,
    history: Vec<IterationRecord>,
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), LoopError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(LoopError::InvalidFraction { name, value })
    }
}

/// Labels `ceil(init_fraction * N)` images drawn uniformly without
/// replacement.
pub fn init_state(
    dataset: Arc<DatasetIndex>,
    init_fraction: f64,
    batch_fraction: f64,
    iterations: usize,
    seed: u64,
) -> Result<IterationState, LoopError> {
    if dataset.is_empty() {
        return Err(LoopError::EmptyDataset);
    }
    check_fraction("init_fraction", init_fraction)?;
    check_fraction("batch_fraction", batch_fraction)?;
    let ids: Vec<&str> = dataset.image_ids().collect();
    let n = ids.len();
    let count = ceil_fraction(init_fraction, n).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    let labeled: Vec<String> = picked.iter().map(|&i| ids[i].to_string()).collect();
    let chosen: BTreeSet<&str> = labeled.iter().map(String::as_str).collect();
    let pool = ids
        .iter()
        .filter(|id| !chosen.contains(*id))
        .map(|id| id.to_string())
        .collect();
    let history = vec![IterationRecord {
        iteration: 0,
        strategy: "init".into(),
        selected: labeled.clone(),
        labeled_count: labeled.len(),
        weights: None,
        gmm_k: None,
        metrics: None,
    }];
    Ok(IterationState {
        dataset,
        labeled,
        pool,
        k: 0,
        t: iterations,
        init_fraction,
        batch_fraction,
        seed,
        history,
    })
}

impl IterationState {
    pub fn dataset(&self) -> &DatasetIndex {
        &self.dataset
    }

    pub fn dataset_arc(&self) -> Arc<DatasetIndex> {
        Arc::clone(&self.dataset)
    }

    /// Labeled ids in labeling order.
    pub fn labeled(&self) -> &[String] {
        &self.labeled
    }

    pub fn pool(&self) -> &BTreeSet<String> {
        &self.pool
    }

    pub fn is_labeled(&self, id: &str) -> bool {
        self.dataset.contains(id) && !self.pool.contains(id)
    }

    pub fn completed(&self) -> usize {
        self.k
    }

    pub fn total_iterations(&self) -> usize {
        self.t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled.len() as f64 / self.dataset.len() as f64
    }

    /// Labeled-set size the next iteration should reach:
    /// `ceil((init + (k+1) * batch) * N)`, capped at `N`.
    pub fn next_target(&self) -> usize {
        let fraction = self.init_fraction + (self.k + 1) as f64 * self.batch_fraction;
        ceil_fraction(fraction, self.dataset.len()).min(self.dataset.len())
    }

    pub fn next_batch_size(&self) -> usize {
        self.next_target()
            .saturating_sub(self.labeled.len())
            .min(self.pool.len())
    }

    /// Reveals the selected images: they move from the pool to the labeled
    /// set, `k` advances and a history record is appended.
    pub fn apply_oracle(
        &mut self,
        selected: Vec<String>,
        strategy: Strategy,
        weights: Option<CategoryWeightTable>,
        gmm_k: Option<usize>,
    ) -> Result<(), LoopError> {
        if self.k >= self.t {
            return Err(LoopError::IterationsExhausted(self.t));
        }
        let mut seen = BTreeSet::new();
        for id in &selected {
            if !self.pool.contains(id) {
                return Err(LoopError::NotInPool(id.clone()));
            }
            if !seen.insert(id.as_str()) {
                return Err(LoopError::DuplicateSelection(id.clone()));
            }
        }
        for id in &selected {
            self.pool.remove(id);
        }
        self.labeled.extend(selected.iter().cloned());
        self.k += 1;
        self.history.push(IterationRecord {
            iteration: self.k,
            strategy: strategy.as_str().into(),
            selected,
            labeled_count: self.labeled.len(),
            weights,
            gmm_k,
            metrics: None,
        });
        Ok(())
    }

    /// Attaches metrics to the latest history record.
    pub fn record_metrics(&mut self, metrics: Metrics) {
        if let Some(last) = self.history.last_mut() {
            last.metrics = Some(metrics);
        }
    }

    /// Size features of every labeled ground-truth box.
    pub fn labeled_features(&self) -> Vec<SizeFeature> {
        self.labeled
            .iter()
            .filter_map(|id| self.dataset.get(id))
            .flat_map(|r| r.objects.iter())
            .filter_map(|o| extract_size_feature(o.w, o.h).ok())
            .collect()
    }

    pub fn weight_table(&self, mode: W1Mode) -> CategoryWeightTable {
        CategoryWeightTable::compute(&self.dataset, self.labeled.iter().map(String::as_str), mode)
    }

    pub fn to_file(&self, config_digest: &str) -> StateFile {
        StateFile {
            version: STATE_VERSION,
            seed: self.seed,
            k: self.k,
            t: self.t,
            init_fraction: self.init_fraction,
            batch_fraction: self.batch_fraction,
            config_digest: config_digest.to_string(),
            dataset_digest: self.dataset.digest(),
            labeled: self.labeled.clone(),
            pool: self.pool.iter().cloned().collect(),
            history: self.history.clone(),
        }
    }

    /// Rebuilds a state from its file against the same dataset.
    pub fn from_file(dataset: Arc<DatasetIndex>, file: StateFile) -> Result<Self, LoopError> {
        if file.dataset_digest != dataset.digest() {
            return Err(LoopError::StateMismatch("dataset digest differs".into()));
        }
        let labeled_set: BTreeSet<&str> = file.labeled.iter().map(String::as_str).collect();
        let pool: BTreeSet<String> = file.pool.iter().cloned().collect();
        if labeled_set.len() != file.labeled.len()
            || labeled_set.len() + pool.len() != dataset.len()
            || pool.iter().any(|id| labeled_set.contains(id.as_str()))
            || dataset
                .image_ids()
                .any(|id| !labeled_set.contains(id) && !pool.contains(id))
        {
            return Err(LoopError::StateMismatch(
                "labeled and pool do not partition the dataset".into(),
            ));
        }
        if replay_labeled(&file.history) != file.labeled {
            return Err(LoopError::StateMismatch(
                "history does not replay to the labeled set".into(),
            ));
        }
        Ok(Self {
            dataset,
            labeled: file.labeled,
            pool,
            k: file.k,
            t: file.t,
            init_fraction: file.init_fraction,
            batch_fraction: file.batch_fraction,
            seed: file.seed,
            history: file.history,
        })
    }

    pub fn history_file(&self, strategy: Strategy, config_digest: &str) -> HistoryFile {
        HistoryFile {
            version: STATE_VERSION,
            strategy,
            config_digest: config_digest.to_string(),
            dataset_digest: self.dataset.digest(),
            image_count: self.dataset.len(),
            records: self.history.clone(),
        }
    }
}

/// Labeled ids in order, rebuilt by concatenating every record's selection.
pub fn replay_labeled(history: &[IterationRecord]) -> Vec<String> {
    history
        .iter()
        .flat_map(|r| r.selected.iter().cloned())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub version: u32,
    pub seed: u64,
    pub k: usize,
    pub t: usize,
    pub init_fraction: f64,
    pub batch_fraction: f64,
    pub config_digest: String,
    pub dataset_digest: String,
    pub labeled: Vec<String>,
    pub pool: Vec<String>,
    pub history: Vec<IterationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryFile {
    pub version: u32,
    pub strategy: Strategy,
    pub config_digest: String,
    pub dataset_digest: String,
    pub image_count: usize,
    pub records: Vec<IterationRecord>,
}

fn check_coverage<'a>(
    reports: &[ImageScoreReport],
    expected: impl ExactSizeIterator<Item = &'a str>,
    what: &'static str,
) -> Result<(), LoopError> {
    let n = expected.len();
    let expected: BTreeSet<&str> = expected.collect();
    let got: BTreeSet<&str> = reports.iter().map(|r| r.image_id.as_str()).collect();
    if got.len() != reports.len() || got != expected {
        return Err(LoopError::ReportsMismatch { what, expected: n });
    }
    Ok(())
}

/// The `batch_size` highest-scoring pool images, descending `u_s`, ties by
/// ascending id.
pub fn select_batch(
    reports: &[ImageScoreReport],
    state: &IterationState,
    batch_size: usize,
) -> Result<Vec<String>, LoopError> {
    check_coverage(reports, state.pool.iter().map(String::as_str), "pool")?;
    if batch_size > state.pool.len() {
        return Err(LoopError::BatchExceedsPool {
            batch: batch_size,
            pool: state.pool.len(),
        });
    }
    let mut order: Vec<&ImageScoreReport> = reports.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    Ok(order
        .into_iter()
        .take(batch_size)
        .map(|r| r.image_id.clone())
        .collect())
}

/// Seeded uniform sample of the pool for the RANDOM baseline. The stream
/// depends on `seed` and the iteration counter only.
pub fn select_random(
    state: &IterationState,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<String>, LoopError> {
    if batch_size > state.pool.len() {
        return Err(LoopError::BatchExceedsPool {
            batch: batch_size,
            pool: state.pool.len(),
        });
    }
    let pool: Vec<&String> = state.pool.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("random-{}", state.k + 1)));
    Ok(sample(&mut rng, pool.len(), batch_size)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Per-image training weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub weights: BTreeMap<String, f64>,
}

impl WeightManifest {
    pub fn doubled(&self) -> impl Iterator<Item = &str> {
        self.weights
            .iter()
            .filter(|(_, w)| **w == 2.0)
            .map(|(id, _)| id.as_str())
    }

    /// CSV `image_id,weight` in id order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "image_id,weight")?;
        for (id, w) in &self.weights {
            writeln!(out, "{id},{w}")?;
        }
        Ok(())
    }
}

/// Gives weight 2 to the top `ceil(fraction * |labeled|)` labeled images
/// by score (ties by ascending id) and 1 to the rest.
pub fn mark_double_weights(
    reports: &[ImageScoreReport],
    labeled: &[String],
    fraction: f64,
) -> Result<WeightManifest, LoopError> {
    check_fraction("double-weight fraction", fraction)?;
    check_coverage(reports, labeled.iter().map(String::as_str), "labeled set")?;
    let marked = ceil_fraction(fraction, labeled.len()).min(labeled.len());
    let mut order: Vec<&ImageScoreReport> = reports.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let weights = order
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.clone(), if i < marked { 2.0 } else { 1.0 }))
        .collect();
    Ok(WeightManifest { weights })
}

/// Supplies detections on pool images for the current labeled set.
pub trait DetectorAdapter {
    fn detect(&mut self, state: &IterationState) -> Result<DetectionMap, AdapterError>;
}

/// Measures the detector trained on the current labeled set.
pub trait Evaluator {
    fn evaluate(&mut self, state: &IterationState) -> Result<Metrics, AdapterError>;
}

/// Hooks invoked by [`run_loop`].
pub struct LoopHooks<'a> {
    pub detector: &'a mut dyn DetectorAdapter,
    pub evaluator: Option<&'a mut dyn Evaluator>,
    /// Called after initialization and after every completed iteration.
    pub checkpoint: &'a mut dyn FnMut(&IterationState) -> Result<(), AdapterError>,
}

/// A loop that stopped early, with the state as of the last completed
/// iteration (already checkpointed).
#[derive(Debug)]
pub struct LoopAbort {
    pub state: Box<IterationState>,
    pub error: LoopError,
}

impl std::fmt::Display for LoopAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "loop aborted after {} completed iterations: {}",
            self.state.completed(),
            self.error
        )
    }
}

impl StdError for LoopAbort {
    fn source(&self) -> Option<&(dyn StdError + 'static)> {
        Some(&self.error)
    }
}

/// One selection step: detection, weights, density, scoring, ranking.
/// Returns the selection with the weight table and chosen mixture size.
pub fn plan_iteration(
    state: &IterationState,
    config: &LoopConfig,
    detector: &mut dyn DetectorAdapter,
) -> Result<(Vec<String>, CategoryWeightTable, Option<usize>), LoopError> {
    let batch = state.next_batch_size();
    let table = state.weight_table(config.w1_mode);
    if config.strategy == Strategy::Random {
        return Ok((
            select_random(state, batch, config.random_seed)?,
            table,
            None,
        ));
    }
    let detections = detector
        .detect(state)
        .map_err(|source| LoopError::Adapter {
            iteration: state.completed() + 1,
            source,
        })?;
    let (model, gmm_k) = if config.strategy == Strategy::Wcr {
        let features = state.labeled_features();
        let k_max = config.k_max.min(features.len()).max(config.k_min);
        let seed = derive_seed(config.gmm_seed, &format!("gmm-{}", state.completed() + 1));
        let sel = select_k(&features, config.k_min, k_max, seed, &config.fit)?;
        let k = sel.best.model.k;
        (Some(sel.best.model), Some(k))
    } else {
        (None, None)
    };
    let ctx = ScoreContext {
        table: Some(&table),
        prior: model.as_ref().map(|m| m as &dyn crate::scoring::BoxPrior),
        min_score: config.min_score,
    };
    let reports = score_pool(
        state.pool().iter().map(String::as_str),
        &detections,
        config.strategy,
        ctx,
    )?;
    let selected = select_batch(&reports, state, batch)?;
    Ok((selected, table, gmm_k))
}

/// Runs initialization followed by `config.iterations` selection rounds.
pub fn run_loop(
    dataset: Arc<DatasetIndex>,
    config: &LoopConfig,
    hooks: LoopHooks<'_>,
) -> Result<IterationState, LoopAbort> {
    let LoopHooks {
        detector,
        mut evaluator,
        checkpoint,
    } = hooks;
    let mut state = init_state(
        dataset,
        config.init_fraction,
        config.batch_fraction,
        config.iterations,
        config.init_seed,
    )
    .map_err(|error| LoopAbort {
        state: Box::new(empty_state()),
        error,
    })?;

    macro_rules! bail {
        ($state:expr, $err:expr) => {
            return Err(LoopAbort {
                state: Box::new($state),
                error: $err,
            })
        };
    }

    if let Some(ev) = evaluator.as_deref_mut() {
        match ev.evaluate(&state) {
            Ok(m) => state.record_metrics(m),
            Err(source) => bail!(
                state,
                LoopError::Adapter {
                    iteration: 0,
                    source
                }
            ),
        }
    }
    if let Err(e) = checkpoint(&state) {
        bail!(state, LoopError::Checkpoint(e));
    }

    while state.completed() < state.total_iterations() {
        let mut next = state.clone();
        let (selected, table, gmm_k) = match plan_iteration(&next, config, detector) {
            Ok(plan) => plan,
            Err(e) => bail!(state, e),
        };
        if let Err(e) = next.apply_oracle(selected, config.strategy, Some(table), gmm_k) {
            bail!(state, e);
        }
        if let Some(ev) = evaluator.as_deref_mut() {
            match ev.evaluate(&next) {
                Ok(m) => next.record_metrics(m),
                Err(source) => bail!(
                    state,
                    LoopError::Adapter {
                        iteration: next.completed(),
                        source
                    }
                ),
            }
        }
        if let Err(e) = checkpoint(&next) {
            bail!(state, LoopError::Checkpoint(e));
        }
        state = next;
    }
    Ok(state)
}

fn empty_state() -> IterationState {
    IterationState {
        dataset: Arc::new(DatasetIndex::new(vec!["_".into()]).expect("one category")),
        labeled: Vec::new(),
        pool: BTreeSet::new(),
        k: 0,
        t: 0,
        init_fraction: 0.0,
        batch_fraction: 0.0,
        seed: 0,
        history: Vec::new(),
    }
}

/// Shared and unique selections between two histories.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub shared: usize,
    pub only_a: usize,
    pub only_b: usize,
}

impl OverlapCounts {
    fn of(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> Self {
        let shared = a.intersection(b).count();
        Self {
            shared,
            only_a: a.len() - shared,
            only_b: b.len() - shared,
        }
    }

    pub fn different(&self) -> usize {
        self.only_a + self.only_b
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionDiff {
    /// `(iteration, counts)` for every iteration present in either history,
    /// including the initialization at iteration 0.
    pub per_iteration: Vec<(usize, OverlapCounts)>,
    /// Counts over everything selected after initialization.
    pub total: OverlapCounts,
}

fn selections_by_iteration(h: &HistoryFile) -> BTreeMap<usize, BTreeSet<&str>> {
    let mut map: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for r in &h.records {
        map.entry(r.iteration)
            .or_default()
            .extend(r.selected.iter().map(String::as_str));
    }
    map
}

pub fn diff_histories(a: &HistoryFile, b: &HistoryFile) -> Result<SelectionDiff, LoopError> {
    if a.dataset_digest != b.dataset_digest {
        return Err(LoopError::MismatchedDatasets);
    }
    let sa = selections_by_iteration(a);
    let sb = selections_by_iteration(b);
    let iterations: BTreeSet<usize> = sa.keys().chain(sb.keys()).copied().collect();
    let empty = BTreeSet::new();
    let per_iteration = iterations
        .iter()
        .map(|it| {
            let x = sa.get(it).unwrap_or(&empty);
            let y = sb.get(it).unwrap_or(&empty);
            (*it, OverlapCounts::of(x, y))
        })
        .collect();
    let after_init = |m: &BTreeMap<usize, BTreeSet<&'_ str>>| -> BTreeSet<String> {
        m.iter()
            .filter(|(it, _)| **it > 0)
            .flat_map(|(_, s)| s.iter().map(|id| id.to_string()))
            .collect()
    };
    let ta = after_init(&sa);
    let tb = after_init(&sb);
    let ta: BTreeSet<&str> = ta.iter().map(String::as_str).collect();
    let tb: BTreeSet<&str> = tb.iter().map(String::as_str).collect();
    Ok(SelectionDiff {
        per_iteration,
        total: OverlapCounts::of(&ta, &tb),
    })
}

/// Union of two strategies' post-initialization selections. Images picked
/// by both come first, then the rest; within each group the earlier
/// iteration wins and ties go to the smaller id. Truncated to `budget`
/// when given. This is a reconstruction; no canonical merge rule exists.
pub fn merge_selections(
    a: &HistoryFile,
    b: &HistoryFile,
    budget: Option<usize>,
) -> Result<Vec<String>, LoopError> {
    if a.dataset_digest != b.dataset_digest {
        return Err(LoopError::MismatchedDatasets);
    }
    let mut first_seen: BTreeMap<&str, (usize, u8)> = BTreeMap::new();
    for (h, bit) in [(a, 1u8), (b, 2u8)] {
        for r in h.records.iter().filter(|r| r.iteration > 0) {
            for id in &r.selected {
                let e = first_seen.entry(id.as_str()).or_insert((r.iteration, 0));
                e.0 = e.0.min(r.iteration);
                e.1 |= bit;
            }
        }
    }
    let mut merged: Vec<(bool, usize, &str)> = first_seen
        .into_iter()
        .map(|(id, (it, bits))| (bits != 3, it, id))
        .collect();
    merged.sort();
    let take = budget.unwrap_or(merged.len());
    Ok(merged
        .into_iter()
        .take(take)
        .map(|(_, _, id)| id.to_string())
        .collect())
}

/// CSV `iteration,labeled_fraction,strategy,map,<category...>`.
pub fn write_learning_curve<W: Write>(
    history: &HistoryFile,
    categories: &[String],
    mut out: W,
) -> std::io::Result<()> {
    write!(out, "iteration,labeled_fraction,strategy,map")?;
    for c in categories {
        write!(out, ",{c}")?;
    }
    writeln!(out)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &history.records {
        let fraction = r.labeled_count as f64 / history.image_count as f64;
        let metrics = r.metrics.clone().unwrap_or_default();
        write!(
            out,
            "{},{},{},{}",
            r.iteration,
            fraction,
            history.strategy,
            fmt(metrics.map)
        )?;
        for i in 0..categories.len() {
            write!(
                out,
                ",{}",
                fmt(metrics.per_category_ap.get(i).copied().flatten())
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;
    use crate::scoring::image_score_lc;

    fn dataset(n: usize) -> Arc<DatasetIndex> {
        let mut idx = DatasetIndex::new(vec!["car".into()]).unwrap();
        for i in 0..n {
            idx.insert(
                ImageRecord {
                    image_id: format!("img{i:05}"),
                    width: 100,
                    height: 100,
                    objects: Vec::new(),
                },
                0,
            )
            .unwrap();
        }
        Arc::new(idx)
    }

    fn report(id: &str, u_s: f64) -> ImageScoreReport {
        let mut r = image_score_lc(id, &[]);
        r.u_s = u_s;
        r
    }

    #[test]
    fn init_examples() {
        let s = init_state(dataset(100), 0.1, 0.1, 4, 7).unwrap();
        assert_eq!(s.labeled().len(), 10);
        assert_eq!(s.pool().len(), 90);
        let again = init_state(dataset(100), 0.1, 0.1, 4, 7).unwrap();
        assert_eq!(s.labeled(), again.labeled());
        let other = init_state(dataset(100), 0.1, 0.1, 4, 8).unwrap();
        assert_ne!(s.labeled(), other.labeled());

        let big = init_state(dataset(14347), 0.1, 0.1, 4, 0).unwrap();
        assert_eq!(big.labeled().len(), 1435);

        assert!(matches!(
            init_state(
                Arc::new(DatasetIndex::new(vec!["a".into()]).unwrap()),
                0.1,
                0.1,
                4,
                0
            ),
            Err(LoopError::EmptyDataset)
        ));
        assert!(init_state(dataset(10), 1.0, 0.1, 4, 0).is_err());
        assert!(init_state(dataset(10), 0.1, 0.0, 4, 0).is_err());
    }

    #[test]
    fn select_batch_examples() {
        let mut idx = DatasetIndex::new(vec!["car".into()]).unwrap();
        for id in ["a", "b", "c", "z"] {
            idx.insert(
                ImageRecord {
                    image_id: id.into(),
                    width: 10,
                    height: 10,
                    objects: vec![],
                },
                0,
            )
            .unwrap();
        }
        let mut s = init_state(Arc::new(idx), 0.25, 0.25, 4, 0).unwrap();
        // force a known pool of a, b, c
        let labeled = s.labeled()[0].clone();
        if labeled != "z" {
            s.pool.insert(labeled.clone());
            s.pool.remove("z");
            s.labeled = vec!["z".into()];
        }
        let reports = vec![report("a", 3.0), report("b", 1.0), report("c", 2.0)];
        assert_eq!(select_batch(&reports, &s, 2).unwrap(), ["a", "c"]);
        let ties = vec![report("b", 1.0), report("a", 1.0), report("c", 0.0)];
        assert_eq!(select_batch(&ties, &s, 1).unwrap(), ["a"]);
        assert!(matches!(
            select_batch(&reports, &s, 4),
            Err(LoopError::BatchExceedsPool { .. })
        ));
        assert!(matches!(
            select_batch(&reports[..2], &s, 1),
            Err(LoopError::ReportsMismatch { .. })
        ));
        let r1 = select_random(&s, 2, 11).unwrap();
        let r2 = select_random(&s, 2, 11).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 2);
        assert!(r1.iter().all(|id| s.pool().contains(id)));
    }

    #[test]
    fn oracle_examples() {
        let mut s = init_state(dataset(11), 0.05, 0.1, 4, 3).unwrap();
        assert_eq!(s.labeled().len(), 1);
        assert_eq!(s.pool().len(), 10);
        let pick: Vec<String> = s.pool().iter().take(2).cloned().collect();
        s.apply_oracle(pick.clone(), Strategy::Lc, None, None)
            .unwrap();
        assert_eq!(s.pool().len(), 8);
        assert_eq!(s.labeled().len(), 3);
        assert_eq!(s.completed(), 1);
        assert_eq!(s.history().len(), 2);

        s.apply_oracle(vec![], Strategy::Lc, None, None).unwrap();
        assert_eq!(s.completed(), 2);
        assert_eq!(s.pool().len(), 8);

        let err = s.apply_oracle(vec![pick[0].clone()], Strategy::Lc, None, None);
        assert!(matches!(err, Err(LoopError::NotInPool(_))));
        assert_eq!(s.completed(), 2);
        assert_eq!(replay_labeled(s.history()), s.labeled());
    }

    #[test]
    fn double_weight_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let reports: Vec<_> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| report(id, i as f64))
            .collect();
        let m = mark_double_weights(&reports, &ids, 0.2).unwrap();
        let doubled: Vec<_> = m.doubled().collect();
        assert_eq!(doubled, ["i8", "i9"]);

        let flat: Vec<_> = ids.iter().map(|id| report(id, 1.0)).collect();
        let m = mark_double_weights(&flat, &ids, 0.2).unwrap();
        assert_eq!(m.doubled().collect::<Vec<_>>(), ["i0", "i1"]);

        let two = vec!["a".to_string(), "b".to_string()];
        let m = mark_double_weights(&[report("a", 0.0), report("b", 0.0)], &two, 0.999).unwrap();
        assert_eq!(m.doubled().count(), 2);

        let many: Vec<String> = (0..7250).map(|i| format!("x{i}")).collect();
        let reps: Vec<_> = many.iter().map(|id| report(id, 0.5)).collect();
        assert_eq!(
            mark_double_weights(&reps, &many, 0.2)
                .unwrap()
                .doubled()
                .count(),
            1450
        );
    }

    #[test]
    fn merge_prefers_shared() {
        let rec = |it: usize, sel: &[&str]| IterationRecord {
            iteration: it,
            strategy: "wc".into(),
            selected: sel.iter().map(|s| s.to_string()).collect(),
            labeled_count: 0,
            weights: None,
            gmm_k: None,
            metrics: None,
        };
        let h = |records| HistoryFile {
            version: 1,
            strategy: Strategy::Wc,
            config_digest: String::new(),
            dataset_digest: "d".into(),
            image_count: 10,
            records,
        };
        let a = h(vec![rec(0, &["i"]), rec(1, &["c", "a"]), rec(2, &["x"])]);
        let b = h(vec![rec(0, &["i"]), rec(1, &["b"]), rec(2, &["a"])]);
        assert_eq!(
            merge_selections(&a, &b, None).unwrap(),
            ["a", "b", "c", "x"]
        );
        assert_eq!(merge_selections(&a, &b, Some(2)).unwrap(), ["a", "b"]);
        let d = diff_histories(&a, &b).unwrap();
        assert_eq!(
            d.total,
            OverlapCounts {
                shared: 1,
                only_a: 2,
                only_b: 1
            }
        );
        assert_eq!(d.per_iteration[0].1.different(), 0);
    }
}
