//! Synthetic datasets and a skill-parameterised stand-in detector.
//!
//! Detector quality for category `c` is a saturating function of the
//! number of labeled objects, `s_c = n_c / (n_c + h_c)`. Given skill, each
//! ground-truth object is detected with probability `1 - m (1 - s_c)`, its
//! confidence is Beta-distributed with mean `0.3 + 0.65 s_c` and
//! concentration `κ`, and its box is jittered by Gaussian noise of scale
//! `σ0 (1 - s_c)`. False positives arrive per image as a Poisson process
//! with mean `λ (1 - mean skill)`.
//!
//! Every random draw for an image comes from a substream keyed by the run
//! seed and the image id, so output does not depend on iteration order and
//! the same object sees the same uniforms at every skill level.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    sort_by_score, CategoryId, DatasetError, DatasetIndex, Detection, DetectionMap,
    GroundTruthObject, ImageRecord,
};
use crate::eval::{evaluate, EvalOptions};
use crate::iteration::{
    run_loop, AdapterError, DetectorAdapter, Evaluator, IterationState, LoopAbort, LoopConfig,
    LoopHooks, Metrics,
};
use crate::numeric::{derive_seed, mix64, sha256_hex};
use crate::weights::compute_category_stats;

/// Confidence mean at zero and full skill.
const CONFIDENCE_AT_ZERO: f64 = 0.3;
const CONFIDENCE_AT_FULL: f64 = 0.95;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkillModel {
    /// Default half-saturation count `h_c`.
    pub half_saturation: f64,
    /// Per-category overrides of `h_c`, indexed by category id.
    pub category_half_saturation: Vec<f64>,
    /// Miss floor `m`: detection probability at zero skill is `1 - m`.
    pub miss_floor: f64,
    /// False positives per image at zero skill.
    pub fp_rate: f64,
    /// Box jitter in pixels at zero skill.
    pub loc_noise: f64,
    /// Concentration of the confidence Beta law.
    pub concentration: f64,
}

impl Default for SkillModel {
    fn default() -> Self {
        Self {
            half_saturation: 50.0,
            category_half_saturation: Vec::new(),
            miss_floor: 0.9,
            fp_rate: 2.0,
            loc_noise: 8.0,
            concentration: 10.0,
        }
    }
}

impl SkillModel {
    pub fn half_saturation_for(&self, category: CategoryId) -> f64 {
        self.category_half_saturation
            .get(category.0)
            .copied()
            .unwrap_or(self.half_saturation)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Infeasible(m.to_string()));
        if !(self.half_saturation > 0.0)
            || self.category_half_saturation.iter().any(|h| !(*h > 0.0))
        {
            return bad("half-saturation counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.miss_floor) {
            return bad("miss_floor must be in [0, 1]");
        }
        if !(self.fp_rate >= 0.0) || !(self.loc_noise >= 0.0) {
            return bad("fp_rate and loc_noise must be non-negative");
        }
        if !(self.concentration > 0.0) {
            return bad("concentration must be positive");
        }
        Ok(())
    }

    /// Skill per category for labeled object counts.
    pub fn skills(&self, labeled_counts: &[u64]) -> Vec<f64> {
        labeled_counts
            .iter()
            .enumerate()
            .map(|(c, &n)| skill(n, self.half_saturation_for(CategoryId(c))))
            .collect()
    }
}

/// `n / (n + h)`.
pub fn skill(labeled_count: u64, half_saturation: f64) -> f64 {
    let n = labeled_count as f64;
    n / (n + half_saturation)
}

pub fn confidence_mean(skill: f64) -> f64 {
    CONFIDENCE_AT_ZERO + (CONFIDENCE_AT_FULL - CONFIDENCE_AT_ZERO) * skill
}

fn beta_for(mean: f64, concentration: f64) -> Beta<f64> {
    Beta::new(mean * concentration, (1.0 - mean) * concentration).expect("valid beta parameters")
}

fn image_rng(seed: u64, image_id: &str, stream: u64) -> ChaCha8Rng {
    let key = u64::from_str_radix(&sha256_hex(image_id.as_bytes())[..16], 16).expect("hex");
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(key ^ stream)))
}

/// Simulates post-NMS detections for `image_ids`, given the labeled
/// object count per category.
pub fn simulate_detections<'a>(
    dataset: &DatasetIndex,
    image_ids: impl IntoIterator<Item = &'a str>,
    labeled_counts: &[u64],
    model: &SkillModel,
    seed: u64,
) -> DetectionMap {
    let skills = model.skills(labeled_counts);
    let mean_skill = if skills.is_empty() {
        0.0
    } else {
        skills.iter().sum::<f64>() / skills.len() as f64
    };
    let sizes: Vec<(f64, f64)> = dataset
        .images()
        .flat_map(|r| r.objects.iter().map(|o| (o.w, o.h)))
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let fp_beta = beta_for(CONFIDENCE_AT_ZERO, model.concentration);
    let fp_mean = model.fp_rate * (1.0 - mean_skill);
    let mut out = DetectionMap::new();
    for id in image_ids {
        let Some(record) = dataset.get(id) else {
            continue;
        };
        let mut rng = image_rng(seed, id, 0);
        let mut dets = Vec::new();
        for obj in &record.objects {
            let s = skills[obj.category.0];
            // fixed draw order per object, independent of skill
            let u: f64 = rng.random();
            let conf = beta_for(confidence_mean(s), model.concentration).sample(&mut rng);
            let noise: [f64; 4] = std::array::from_fn(|_| unit.sample(&mut rng));
            if u >= 1.0 - model.miss_floor * (1.0 - s) {
                continue;
            }
            let sigma = model.loc_noise * (1.0 - s);
            dets.push(Detection {
                image_id: id.to_string(),
                category: obj.category,
                score: conf.clamp(0.0, 1.0),
                cx: obj.cx + sigma * noise[0],
                cy: obj.cy + sigma * noise[1],
                w: (obj.w + sigma * noise[2]).max(1.0),
                h: (obj.h + sigma * noise[3]).max(1.0),
            });
        }
        let mut fp_rng = image_rng(seed, id, 1);
        let n_fp = if fp_mean > 0.0 {
            Poisson::new(fp_mean)
                .expect("positive mean")
                .sample(&mut fp_rng) as usize
        } else {
            0
        };
        for _ in 0..n_fp {
            let category = CategoryId(fp_rng.random_range(0..dataset.category_count()));
            let (w, h) = if sizes.is_empty() {
                (32.0, 32.0)
            } else {
                sizes[fp_rng.random_range(0..sizes.len())]
            };
            dets.push(Detection {
                image_id: id.to_string(),
                category,
                score: fp_beta.sample(&mut fp_rng).clamp(0.0, 1.0),
                cx: fp_rng.random::<f64>() * f64::from(record.width),
                cy: fp_rng.random::<f64>() * f64::from(record.height),
                w,
                h,
            });
        }
        sort_by_score(&mut dets);
        out.insert(id.to_string(), dets);
    }
    out
}

/// One Gaussian component of a category's `(long, short)` size law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeComponent {
    pub weight: f64,
    pub long_mean: f64,
    pub short_mean: f64,
    pub long_sd: f64,
    pub short_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub categories: usize,
    /// Category names; generated as `c00`, `c01`, ... when empty.
    pub category_names: Vec<String>,
    /// Total objects of the rank-`r` category are proportional to `r^-exponent`.
    pub power_exponent: f64,
    pub images: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Mean objects per image across the whole dataset.
    pub objects_per_image: f64,
    /// Mean cluster size of the most frequent category; rarer categories
    /// shrink toward single objects.
    pub max_cluster_mean: f64,
    /// Per-category size mixtures; a default family is generated when empty.
    pub size_mixtures: Vec<Vec<SizeComponent>>,
    pub outlier_fraction: f64,
    /// Long-side range of outlier boxes in pixels.
    pub outlier_long_range: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            categories: 15,
            category_names: Vec::new(),
            power_exponent: 1.5,
            images: 500,
            image_width: 1024,
            image_height: 1024,
            objects_per_image: 12.0,
            max_cluster_mean: 20.0,
            size_mixtures: Vec::new(),
            outlier_fraction: 0.05,
            outlier_long_range: (350.0, 800.0),
        }
    }
}

/// Default size family: category `c` centred at long side `14 * 1.2^c`
/// with a shape-dependent aspect, plus a 25% component 1.5x larger.
fn default_mixture(c: usize) -> Vec<SizeComponent> {
    let long = 14.0 * 1.2f64.powi(c as i32);
    let aspect = 0.4 + 0.55 * ((c * 7) % 15) as f64 / 14.0;
    vec![
        SizeComponent {
            weight: 0.75,
            long_mean: long,
            short_mean: long * aspect,
            long_sd: 0.12 * long,
            short_sd: 0.12 * long * aspect,
        },
        SizeComponent {
            weight: 0.25,
            long_mean: 1.5 * long,
            short_mean: 1.5 * long * aspect,
            long_sd: 0.15 * long,
            short_sd: 0.15 * long * aspect,
        },
    ]
}

impl SynthSpec {
    pub fn names(&self) -> Vec<String> {
        if self.category_names.is_empty() {
            (0..self.categories).map(|c| format!("c{c:02}")).collect()
        } else {
            self.category_names.clone()
        }
    }

    pub fn mixture(&self, c: usize) -> Vec<SizeComponent> {
        self.size_mixtures
            .get(c)
            .cloned()
            .unwrap_or_else(|| default_mixture(c))
    }

    /// Total objects per category, non-increasing in category index.
    pub fn category_totals(&self) -> Vec<usize> {
        let total = (self.images as f64 * self.objects_per_image).round();
        let norm: f64 = (1..=self.categories)
            .map(|r| (r as f64).powf(-self.power_exponent))
            .sum();
        (1..=self.categories)
            .map(|r| {
                ((total * (r as f64).powf(-self.power_exponent) / norm).floor() as usize).max(1)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Infeasible(m));
        if self.categories == 0 || self.images == 0 {
            return bad("need at least one category and one image".into());
        }
        if !self.category_names.is_empty() && self.category_names.len() != self.categories {
            return bad("category_names length must equal categories".into());
        }
        if !self.size_mixtures.is_empty() && self.size_mixtures.len() != self.categories {
            return bad("size_mixtures must list one mixture per category".into());
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must be in [0, 1)".into());
        }
        if !(self.objects_per_image >= 0.0) || !(self.max_cluster_mean >= 1.0) {
            return bad("objects_per_image must be >= 0 and max_cluster_mean >= 1".into());
        }
        let limit = f64::from(self.image_width.min(self.image_height));
        for c in 0..self.categories {
            let mix = self.mixture(c);
            let total: f64 = mix.iter().map(|m| m.weight).sum();
            if mix.is_empty() || (total - 1.0).abs() > 1e-9 || mix.iter().any(|m| m.weight < 0.0) {
                return bad(format!(
                    "category {c}: mixture weights must be non-negative and sum to 1"
                ));
            }
            for m in &mix {
                if !(m.long_mean > 0.0
                    && m.short_mean > 0.0
                    && m.long_sd >= 0.0
                    && m.short_sd >= 0.0)
                {
                    return bad(format!("category {c}: sizes must be positive"));
                }
                if m.long_mean + 4.0 * m.long_sd > limit {
                    return bad(format!(
                        "category {c}: boxes up to {:.0}px do not fit a {limit}px image",
                        m.long_mean + 4.0 * m.long_sd
                    ));
                }
            }
        }
        let (lo, hi) = self.outlier_long_range;
        if self.outlier_fraction > 0.0 && !(lo > 0.0 && lo <= hi && hi <= limit) {
            return bad(format!(
                "outlier range {lo}..{hi} must fit within {limit}px"
            ));
        }
        Ok(())
    }
}

fn draw_main_size(mix: &[SizeComponent], rng: &mut ChaCha8Rng, limit: f64) -> (f64, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let comp = mix
        .iter()
        .find(|m| {
            acc += m.weight;
            u < acc
        })
        .unwrap_or(mix.last().expect("non-empty mixture"));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let a = (comp.long_mean + comp.long_sd * unit.sample(rng)).clamp(2.0, limit);
    let b = (comp.short_mean + comp.short_sd * unit.sample(rng)).clamp(2.0, limit);
    (a.max(b), a.min(b))
}

/// Generates a dataset with power-law category totals, clustered
/// placement and a declared fraction of size outliers.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<DatasetIndex, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let totals = spec.category_totals();
    let limit = f64::from(spec.image_width.min(spec.image_height));

    // (image, category) assignments, clustered per category
    let mut per_image: Vec<Vec<CategoryId>> = vec![Vec::new(); spec.images];
    let head = totals[0] as f64;
    for (c, &total) in totals.iter().enumerate() {
        let cluster_mean = 1.0 + (spec.max_cluster_mean - 1.0) * (total as f64 / head).sqrt();
        let extra =
            (cluster_mean - 1.0 > 0.0).then(|| Poisson::new(cluster_mean - 1.0).expect("mean"));
        let mut remaining = total;
        while remaining > 0 {
            let size = 1 + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            let size = size.min(remaining);
            let image = rng.random_range(0..spec.images);
            per_image[image].extend(std::iter::repeat_n(CategoryId(c), size));
            remaining -= size;
        }
    }

    let object_total: usize = per_image.iter().map(Vec::len).sum();
    let outlier_count = (spec.outlier_fraction * object_total as f64).round() as usize;
    let mut is_outlier = vec![false; object_total];
    for i in sample(&mut rng, object_total, outlier_count.min(object_total)) {
        is_outlier[i] = true;
    }

    let mixtures: Vec<Vec<SizeComponent>> = (0..spec.categories).map(|c| spec.mixture(c)).collect();
    let mut index = DatasetIndex::new(spec.names())?;
    let (w_img, h_img) = (f64::from(spec.image_width), f64::from(spec.image_height));
    let mut flat = 0usize;
    for (i, cats) in per_image.into_iter().enumerate() {
        let mut objects = Vec::with_capacity(cats.len());
        for category in cats {
            let (long, short) = if is_outlier[flat] {
                let (lo, hi) = spec.outlier_long_range;
                let long = lo + (hi - lo) * rng.random::<f64>();
                (long, (long * (0.3 + 0.7 * rng.random::<f64>())).max(2.0))
            } else {
                draw_main_size(&mixtures[category.0], &mut rng, limit)
            };
            flat += 1;
            let (w, h) = if rng.random::<bool>() {
                (long, short)
            } else {
                (short, long)
            };
            let cx = w / 2.0 + rng.random::<f64>() * (w_img - w);
            let cy = h / 2.0 + rng.random::<f64>() * (h_img - h);
            objects.push(GroundTruthObject {
                category,
                cx,
                cy,
                w,
                h,
                angle: None,
            });
        }
        index.insert(
            ImageRecord {
                image_id: format!("img{i:05}"),
                width: spec.image_width,
                height: spec.image_height,
                objects,
            },
            0,
        )?;
    }
    Ok(index)
}

/// Detector adapter backed by [`simulate_detections`]. The per-iteration
/// seed mixes the base seed with a digest of the labeled set.
#[derive(Clone, Debug)]
pub struct SimulatedDetector {
    pub model: SkillModel,
    pub seed: u64,
}

pub fn labeled_counts(state: &IterationState) -> Vec<u64> {
    compute_category_stats(state.dataset(), state.labeled().iter().map(String::as_str))
        .iter()
        .map(|c| c.objects)
        .collect()
}

/// Digest of the sorted labeled id set.
pub fn labeled_digest(state: &IterationState) -> String {
    let mut ids: Vec<&str> = state.labeled().iter().map(String::as_str).collect();
    ids.sort_unstable();
    sha256_hex(ids.join("\n").as_bytes())
}

impl DetectorAdapter for SimulatedDetector {
    fn detect(&mut self, state: &IterationState) -> Result<DetectionMap, AdapterError> {
        let seed = derive_seed(self.seed, &labeled_digest(state));
        Ok(simulate_detections(
            state.dataset(),
            state.pool().iter().map(String::as_str),
            &labeled_counts(state),
            &self.model,
            seed,
        ))
    }
}

/// Scores the simulated detector on a held-out dataset. The detection
/// seed is fixed, so every strategy is measured under the same draws.
#[derive(Clone, Debug)]
pub struct SimulatedEvaluator {
    pub validation: Arc<DatasetIndex>,
    pub model: SkillModel,
    pub seed: u64,
    pub options: EvalOptions,
}

impl SimulatedEvaluator {
    pub fn metrics_for_counts(&self, counts: &[u64]) -> Metrics {
        let dets = simulate_detections(
            &self.validation,
            self.validation.image_ids(),
            counts,
            &self.model,
            self.seed,
        );
        let report = evaluate(&self.validation, &dets, &self.options);
        Metrics {
            map: report.map,
            per_category_ap: report.aps(),
        }
    }
}

impl Evaluator for SimulatedEvaluator {
    fn evaluate(&mut self, state: &IterationState) -> Result<Metrics, AdapterError> {
        Ok(self.metrics_for_counts(&labeled_counts(state)))
    }
}

/// Seeds and sizes of a closed-loop experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosedLoopSpec {
    pub synth: SynthSpec,
    pub skill: SkillModel,
    pub validation_images: usize,
    pub dataset_seed: u64,
    pub detector_seed: u64,
    pub eval_seed: u64,
}

impl Default for ClosedLoopSpec {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            skill: SkillModel::default(),
            validation_images: 200,
            dataset_seed: 0,
            detector_seed: 3,
            eval_seed: 4,
        }
    }
}

pub struct ClosedLoopData {
    pub train: Arc<DatasetIndex>,
    pub validation: Arc<DatasetIndex>,
}

impl ClosedLoopSpec {
    pub fn build_data(&self) -> Result<ClosedLoopData, SimError> {
        self.skill.validate()?;
        let train = synth_dataset(&self.synth, derive_seed(self.dataset_seed, "train"))?;
        let val_spec = SynthSpec {
            images: self.validation_images,
            ..self.synth.clone()
        };
        let validation = synth_dataset(&val_spec, derive_seed(self.dataset_seed, "validation"))?;
        Ok(ClosedLoopData {
            train: Arc::new(train),
            validation: Arc::new(validation),
        })
    }

    pub fn evaluator(&self, data: &ClosedLoopData) -> SimulatedEvaluator {
        SimulatedEvaluator {
            validation: Arc::clone(&data.validation),
            model: self.skill.clone(),
            seed: self.eval_seed,
            options: EvalOptions::default(),
        }
    }

    /// mAP of the detector trained on every training image.
    pub fn full_annotation_map(&self, data: &ClosedLoopData) -> Option<f64> {
        let all: Vec<u64> = compute_category_stats(&data.train, data.train.image_ids())
            .iter()
            .map(|c| c.objects)
            .collect();
        self.evaluator(data).metrics_for_counts(&all).map
    }

    /// Runs the selection loop on the synthetic training set with the
    /// simulated detector and evaluator.
    pub fn run(
        &self,
        data: &ClosedLoopData,
        config: &LoopConfig,
        checkpoint: &mut dyn FnMut(&IterationState) -> Result<(), AdapterError>,
    ) -> Result<IterationState, LoopAbort> {
        let mut detector = SimulatedDetector {
            model: self.skill.clone(),
            seed: self.detector_seed,
        };
        let mut evaluator = self.evaluator(data);
        run_loop(
            Arc::clone(&data.train),
            config,
            LoopHooks {
                detector: &mut detector,
                evaluator: Some(&mut evaluator),
                checkpoint,
            },
        )
    }
}
