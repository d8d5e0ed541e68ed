//! Active-learning selection engine for object detection.
//!
//! The crate scores unlabeled images by weighted classification uncertainty
//! (category count and density weights times `1 - P`) combined with a
//! box-size regression uncertainty derived from a Gaussian mixture over
//! labeled box sizes, and drives a pool-based selection loop. A synthetic
//! detector and a VOC-style evaluator make closed-loop experiments possible
//! without training a real network.
//!
//! Module map:
//!
//! - [`dataset`]: manifests, detections, tiling.
//! - [`weights`]: per-category statistics and the two imbalance weights.
//! - [`density`]: box-size features, EM-fitted GMM, regression uncertainty.
//! - [`scoring`]: per-object and per-image uncertainty under each strategy.
//! - [`iteration`]: the labeled/pool state machine and batch selection.
//! - [`simdet`]: synthetic datasets and a skill-parameterised detector.
//! - [`eval`]: IoU, greedy matching, AP and mAP.

pub mod dataset;
pub mod density;
pub mod eval;
pub mod iteration;
pub mod numeric;
pub mod scoring;
pub mod simdet;
pub mod weights;

pub use dataset::{
    CategoryId, DatasetError, DatasetIndex, Detection, DetectionMap, GroundTruthObject,
    ImageRecord, TilePlan, TileWindow,
};
pub use density::{DensityError, GmmModel, LogDensity, SizeFeature};
pub use eval::{EvalReport, MatchOutcome};
pub use iteration::{IterationState, LoopConfig, LoopError, WeightManifest};
pub use scoring::{ImageScoreReport, ObjectScore, ScoringError, Strategy};
pub use simdet::{ClosedLoopSpec, SimulatedDetector, SimulatedEvaluator, SkillModel, SynthSpec};
pub use weights::{CategoryWeightTable, W1Mode};
