//! Subcommand implementations. Each command writes its outputs under
//! `out_dir` and returns the list of files written.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use wcr_core::dataset::{
    parse_detections, parse_ground_truth, tile_dataset, DatasetIndex, DetectionMap,
};
use wcr_core::density::{extract_size_feature, select_k, GmmModel, SizeFeature};
use wcr_core::eval::evaluate;
use wcr_core::iteration::{
    diff_histories, init_state, mark_double_weights, merge_selections, plan_iteration, run_loop,
    write_learning_curve, AdapterError, DetectorAdapter, HistoryFile, IterationState, LoopHooks,
    StateFile,
};
use wcr_core::numeric::{derive_seed, sha256_hex};
use wcr_core::scoring::{score_pool, write_score_csv, BoxPrior, ImageScoreReport, ScoreContext};
use wcr_core::simdet::{simulate_detections, SimulatedDetector, SimulatedEvaluator};
use wcr_core::weights::{compute_category_stats, CategoryWeightTable};
use wcr_core::Strategy;

use crate::config::{RunConfig, TOOL_VERSION};
use crate::error::CliError;

/// Files written by a command, in write order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
}

impl Outputs {
    /// `(file name, sha256)` for every output.
    pub fn digests(&self) -> Result<Vec<(String, String)>, CliError> {
        self.files
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|source| CliError::Io {
                    path: p.clone(),
                    source,
                })?;
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((name, sha256_hex(&bytes)))
            })
            .collect()
    }
}

struct Writer<'a> {
    cfg: &'a RunConfig,
    outputs: Outputs,
}

impl<'a> Writer<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Io {
            path: cfg.out_dir.clone(),
            source,
        })?;
        Ok(Self {
            cfg,
            outputs: Outputs::default(),
        })
    }

    /// Writes `name` with the provenance header line followed by `body`.
    fn text(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let path = self.cfg.out_dir.join(name);
        let io = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        let mut out = BufWriter::new(File::create(&path).map_err(io)?);
        writeln!(out, "{}", self.cfg.header()).map_err(io)?;
        body(&mut out).map_err(io)?;
        out.flush().map_err(io)?;
        self.outputs.files.push(path.clone());
        Ok(path)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.cfg.out_dir.join(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
            path: path.clone(),
            source,
        })?;
        text.push('\n');
        fs::write(&path, text).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        if !self.outputs.files.contains(&path) {
            self.outputs.files.push(path.clone());
        }
        Ok(path)
    }
}

/// JSON document carrying provenance alongside a payload.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    tool: String,
    config_digest: String,
    #[serde(flatten)]
    payload: &'a T,
}

fn stamped<'a, T: Serialize>(cfg: &RunConfig, payload: &'a T) -> Stamped<'a, T> {
    Stamped {
        tool: format!("wcr {TOOL_VERSION}"),
        config_digest: cfg.digest(),
        payload,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_reader(open(path)?).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-blank, non-comment lines of a text file.
fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let mut lines = Vec::new();
    for line in open(path)?.lines() {
        let line = line.map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            lines.push(t.to_string());
        }
    }
    Ok(lines)
}

fn require<'p>(path: &'p Option<PathBuf>, what: &str) -> Result<&'p Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{what} path is required (flag or config)")))
}

pub fn categories(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    if !cfg.categories.is_empty() {
        return Ok(cfg.categories.clone());
    }
    match &cfg.categories_file {
        Some(p) => read_lines(p),
        None => Err(CliError::Usage(
            "categories are required: set `categories` or `categories_file`".into(),
        )),
    }
}

pub fn load_manifest(path: &Path, categories: &[String]) -> Result<DatasetIndex, CliError> {
    parse_ground_truth(open(path)?, categories).map_err(|source| CliError::Dataset {
        path: path.to_path_buf(),
        source,
    })
}

fn load_ground_truth(cfg: &RunConfig) -> Result<DatasetIndex, CliError> {
    load_manifest(
        require(&cfg.ground_truth, "ground_truth")?,
        &categories(cfg)?,
    )
}

fn load_detections(path: &Path, index: &DatasetIndex) -> Result<DetectionMap, CliError> {
    parse_detections(open(path)?, index).map_err(|source| CliError::Dataset {
        path: path.to_path_buf(),
        source,
    })
}

fn load_state(cfg: &RunConfig, dataset: Arc<DatasetIndex>) -> Result<IterationState, CliError> {
    let path = require(&cfg.state, "state")?;
    let file: StateFile = read_json(path)?;
    Ok(IterationState::from_file(dataset, file)?)
}

/// Labeled ids from `labeled`, else from `state`, else none.
fn labeled_ids(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    if let Some(p) = &cfg.labeled {
        return read_lines(p);
    }
    if let Some(p) = &cfg.state {
        let file: StateFile = read_json(p)?;
        return Ok(file.labeled);
    }
    Ok(Vec::new())
}

fn check_known(index: &DatasetIndex, ids: &[String]) -> Result<(), CliError> {
    match ids.iter().find(|id| !index.contains(id)) {
        Some(id) => Err(CliError::Usage(format!(
            "labeled image `{id}` is not in the manifest"
        ))),
        None => Ok(()),
    }
}

fn features_of(index: &DatasetIndex, ids: &[String]) -> Result<Vec<SizeFeature>, CliError> {
    let mut out = Vec::new();
    for id in ids {
        if let Some(r) = index.get(id) {
            for o in &r.objects {
                out.push(extract_size_feature(o.w, o.h)?);
            }
        }
    }
    Ok(out)
}

fn fit_prior(cfg: &RunConfig, features: &[SizeFeature], label: &str) -> Result<GmmModel, CliError> {
    let k_max = cfg.k_max.min(features.len()).max(cfg.k_min);
    let seed = derive_seed(cfg.seeds.gmm, label);
    Ok(
        select_k(features, cfg.k_min, k_max, seed, &cfg.fit_options())?
            .best
            .model,
    )
}

/// Detections from the configured file, or simulated from labeled counts.
fn detections_for<'a>(
    cfg: &RunConfig,
    index: &DatasetIndex,
    labeled: &[String],
    images: impl IntoIterator<Item = &'a str>,
) -> Result<DetectionMap, CliError> {
    match &cfg.detections {
        Some(p) => load_detections(p, index),
        None => {
            let counts: Vec<u64> =
                compute_category_stats(index, labeled.iter().map(String::as_str))
                    .iter()
                    .map(|c| c.objects)
                    .collect();
            Ok(simulate_detections(
                index,
                images,
                &counts,
                &cfg.skill,
                cfg.seeds.simdet,
            ))
        }
    }
}

fn score_images(
    cfg: &RunConfig,
    index: &DatasetIndex,
    labeled: &[String],
    images: &[String],
    label: &str,
) -> Result<(Vec<ImageScoreReport>, Option<GmmModel>), CliError> {
    if cfg.strategy == Strategy::Random {
        return Err(wcr_core::ScoringError::RandomNotScorable.into());
    }
    if images.is_empty() {
        return Ok((Vec::new(), None));
    }
    let detections = detections_for(cfg, index, labeled, images.iter().map(String::as_str))?;
    let table = CategoryWeightTable::compute(index, labeled.iter().map(String::as_str), cfg.w1);
    let model = if cfg.strategy == Strategy::Wcr {
        Some(fit_prior(cfg, &features_of(index, labeled)?, label)?)
    } else {
        None
    };
    let ctx = ScoreContext {
        table: Some(&table),
        prior: model.as_ref().map(|m| m as &dyn BoxPrior),
        min_score: cfg.min_score,
    };
    let reports = score_pool(
        images.iter().map(String::as_str),
        &detections,
        cfg.strategy,
        ctx,
    )?;
    Ok((reports, model))
}

/// Weight table of the labeled set.
pub fn cmd_stats(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    let index = load_ground_truth(cfg)?;
    let labeled = labeled_ids(cfg)?;
    check_known(&index, &labeled)?;
    let table = CategoryWeightTable::compute(&index, labeled.iter().map(String::as_str), cfg.w1);
    let mut w = Writer::new(cfg)?;
    w.text("weights.csv", |out| table.write_csv(out))?;
    Ok(w.outputs)
}

/// Ranks every unlabeled image under the configured strategy.
pub fn cmd_score(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    let index = load_ground_truth(cfg)?;
    let labeled = labeled_ids(cfg)?;
    check_known(&index, &labeled)?;
    let pool: Vec<String> = index
        .image_ids()
        .filter(|id| !labeled.iter().any(|l| l == id))
        .map(str::to_string)
        .collect();
    let (reports, model) = score_images(cfg, &index, &labeled, &pool, "score")?;
    let mut w = Writer::new(cfg)?;
    w.text("scores.csv", |out| write_score_csv(&reports, out))?;
    if let Some(m) = model {
        w.json("gmm.json", &stamped(cfg, &m))?;
    }
    Ok(w.outputs)
}

struct FileDetector(DetectionMap);

impl DetectorAdapter for FileDetector {
    fn detect(&mut self, _state: &IterationState) -> Result<DetectionMap, AdapterError> {
        Ok(self.0.clone())
    }
}

/// Initializes a state when none is given, else runs one selection
/// iteration and advances the state.
pub fn cmd_select(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    let index = Arc::new(load_ground_truth(cfg)?);
    let loop_cfg = cfg.loop_config();
    let state = match &cfg.state {
        None => init_state(
            Arc::clone(&index),
            cfg.init_fraction,
            cfg.batch_fraction,
            cfg.iterations,
            cfg.seeds.init,
        )?,
        Some(_) => {
            let mut state = load_state(cfg, Arc::clone(&index))?;
            let mut detector: Box<dyn DetectorAdapter> = match &cfg.detections {
                Some(p) => Box::new(FileDetector(load_detections(p, &index)?)),
                None => Box::new(SimulatedDetector {
                    model: cfg.skill.clone(),
                    seed: cfg.seeds.simdet,
                }),
            };
            let (selected, table, gmm_k) = plan_iteration(&state, &loop_cfg, detector.as_mut())?;
            state.apply_oracle(selected, cfg.strategy, Some(table), gmm_k)?;
            state
        }
    };
    let last = state
        .history()
        .last()
        .map(|r| r.selected.clone())
        .unwrap_or_default();
    let mut w = Writer::new(cfg)?;
    w.json("state.json", &state.to_file(&cfg.digest()))?;
    w.text("selected.txt", |out| {
        last.iter().try_for_each(|id| writeln!(out, "{id}"))
    })?;
    Ok(w.outputs)
}

/// Full closed loop against the simulated detector. Uses the configured
/// manifests when present, else a synthetic dataset.
pub fn cmd_loop(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    let loop_cfg = cfg.loop_config();
    let sim = cfg.closed_loop();
    let (train, validation) = match &cfg.ground_truth {
        Some(gt) => {
            let cats = categories(cfg)?;
            let train = Arc::new(load_manifest(gt, &cats)?);
            let val = match &cfg.validation {
                Some(v) => Some(Arc::new(load_manifest(v, &cats)?)),
                None => None,
            };
            (train, val)
        }
        None => {
            let data = sim.build_data()?;
            (data.train, Some(data.validation))
        }
    };
    let mut w = Writer::new(cfg)?;
    let digest = cfg.digest();
    let state_path = cfg.out_dir.join("state.json");
    let mut detector = SimulatedDetector {
        model: cfg.skill.clone(),
        seed: cfg.seeds.simdet,
    };
    let mut evaluator = validation.map(|v| SimulatedEvaluator {
        validation: v,
        model: cfg.skill.clone(),
        seed: cfg.seeds.eval,
        options: cfg.eval_options(),
    });
    let mut checkpoint = |s: &IterationState| -> Result<(), AdapterError> {
        let text = serde_json::to_string_pretty(&s.to_file(&digest))? + "\n";
        fs::write(&state_path, text)?;
        Ok(())
    };
    let result = run_loop(
        Arc::clone(&train),
        &loop_cfg,
        LoopHooks {
            detector: &mut detector,
            evaluator: evaluator
                .as_mut()
                .map(|e| e as &mut dyn wcr_core::iteration::Evaluator),
            checkpoint: &mut checkpoint,
        },
    );
    let state = result.map_err(|abort| CliError::Loop(abort.error))?;
    w.outputs.files.push(state_path);
    let history = state.history_file(cfg.strategy, &digest);
    w.json("history.json", &history)?;
    w.text("learning_curve.csv", |out| {
        write_learning_curve(&history, train.categories(), out)
    })?;
    Ok(w.outputs)
}

/// Marks the labeled images with the highest LC scores with weight 2.
pub fn cmd_double_weights(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    let index = Arc::new(load_ground_truth(cfg)?);
    let state = load_state(cfg, Arc::clone(&index))?;
    let labeled = state.labeled().to_vec();
    let lc = RunConfig {
        strategy: Strategy::Lc,
        ..cfg.clone()
    };
    let (reports, _) = score_images(&lc, &index, &labeled, &labeled, "double-weights")?;
    let manifest = mark_double_weights(&reports, &labeled, cfg.double_weight_fraction)?;
    let mut w = Writer::new(cfg)?;
    w.text("double_weights.csv", |out| manifest.write_csv(out))?;
    Ok(w.outputs)
}

/// Tiling plan and clipped tile manifest.
pub fn cmd_tiles(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    let index = load_ground_truth(cfg)?;
    let (windows, tiles) = tile_dataset(&index, cfg.window, cfg.stride, cfg.min_inside)?;
    let mut w = Writer::new(cfg)?;
    w.text("tiles.csv", |out| {
        writeln!(out, "parent_id,x0,y0,size")?;
        windows.iter().try_for_each(|win| {
            writeln!(out, "{},{},{},{}", win.parent_id, win.x0, win.y0, win.size)
        })
    })?;
    w.text("tiles.jsonl", |out| {
        tiles.write_jsonl(out).map_err(|e| match e {
            wcr_core::DatasetError::Io(io) => io,
            other => std::io::Error::other(other.to_string()),
        })
    })?;
    Ok(w.outputs)
}

/// Per-category AP and mAP of a detections file.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    let index = load_ground_truth(cfg)?;
    let dets = load_detections(require(&cfg.detections, "detections")?, &index)?;
    let report = evaluate(&index, &dets, &cfg.eval_options());
    if report.map.is_none() {
        return Err(CliError::NothingToEvaluate);
    }
    let mut w = Writer::new(cfg)?;
    w.text("eval.csv", |out| report.write_csv(out))?;
    Ok(w.outputs)
}

/// Synthetic training and validation manifests plus their category list.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    let data = cfg.closed_loop().build_data()?;
    let mut w = Writer::new(cfg)?;
    let jsonl = |index: &DatasetIndex| {
        let mut buf = Vec::new();
        index.write_jsonl(&mut buf).map(|_| buf)
    };
    let train = jsonl(&data.train)?;
    let val = jsonl(&data.validation)?;
    w.text("train.jsonl", |out| out.write_all(&train))?;
    w.text("validation.jsonl", |out| out.write_all(&val))?;
    w.text("categories.txt", |out| {
        data.train
            .categories()
            .iter()
            .try_for_each(|c| writeln!(out, "{c}"))
    })?;
    let counts = compute_category_stats(&data.train, data.train.image_ids());
    w.text("synth_stats.csv", |out| {
        writeln!(out, "category,objects,images")?;
        for (name, c) in data.train.categories().iter().zip(&counts) {
            writeln!(out, "{name},{},{}", c.objects, c.images)?;
        }
        Ok(())
    })?;
    Ok(w.outputs)
}

/// Overlap between two selection histories, optionally with a merged
/// selection of at most `merge_budget` images.
pub fn cmd_diff(
    cfg: &RunConfig,
    a: &Path,
    b: &Path,
    merge_budget: Option<usize>,
    merge_all: bool,
) -> Result<Outputs, CliError> {
    let ha: HistoryFile = read_json(a)?;
    let hb: HistoryFile = read_json(b)?;
    let diff = diff_histories(&ha, &hb)?;
    let mut w = Writer::new(cfg)?;
    w.text("diff.csv", |out| {
        writeln!(out, "iteration,shared,only_a,only_b,different")?;
        for (it, c) in &diff.per_iteration {
            writeln!(
                out,
                "{it},{},{},{},{}",
                c.shared,
                c.only_a,
                c.only_b,
                c.different()
            )?;
        }
        let t = &diff.total;
        writeln!(
            out,
            "total,{},{},{},{}",
            t.shared,
            t.only_a,
            t.only_b,
            t.different()
        )
    })?;
    if merge_all || merge_budget.is_some() {
        let merged = merge_selections(&ha, &hb, merge_budget)?;
        w.text("merged.txt", |out| {
            merged.iter().try_for_each(|id| writeln!(out, "{id}"))
        })?;
    }
    Ok(w.outputs)
}
