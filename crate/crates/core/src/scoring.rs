//! Per-object and per-image uncertainty.
//!
//! Per object: `u_c = w1 * w2 * (1 - P)` for the detection's predicted
//! category, `u_r` from the box-size density, combined as `u_c * u_r`.
//! An image scores the sum over its detections. The strategies differ only
//! in which factors are held at 1:
//!
//! | strategy | w1·w2 | u_r |
//! |----------|-------|-----|
//! | LC       | 1     | 1   |
//! | WC       | table | 1   |
//! | WCR      | table | GMM |

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CategoryId, Detection, DetectionMap};
use crate::density::{extract_size_feature, regression_uncertainty, GmmModel, LOG_DENSITY_FLOOR};
use crate::numeric::stable_sum;
use crate::weights::CategoryWeightTable;

/// Detections below this confidence are ignored by default.
pub const DEFAULT_MIN_SCORE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Lc,
    Wc,
    Wcr,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Lc => "lc",
            Strategy::Wc => "wc",
            Strategy::Wcr => "wcr",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ScoringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Strategy::Random),
            "lc" => Ok(Strategy::Lc),
            "wc" => Ok(Strategy::Wc),
            "wcr" => Ok(Strategy::Wcr),
            other => Err(ScoringError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("category #{0} is not covered by the weight table")]
    UnknownCategory(usize),
    #[error("strategy `random` has no uncertainty score; select it through the loop")]
    RandomNotScorable,
    #[error("strategy `{0}` needs a category weight table")]
    MissingWeights(Strategy),
    #[error("strategy `wcr` needs a box-size density model")]
    MissingDensity,
    #[error("unknown strategy `{0}` (expected random, lc, wc or wcr)")]
    UnknownStrategy(String),
}

/// Source of the regression uncertainty `u_r` for a box.
pub trait BoxPrior {
    fn regression_uncertainty(&self, w: f64, h: f64) -> f64;
}

impl BoxPrior for GmmModel {
    fn regression_uncertainty(&self, w: f64, h: f64) -> f64 {
        match extract_size_feature(w, h) {
            Ok(f) => regression_uncertainty(self.log_density(f)),
            // unreachable for validated detections
            Err(_) => crate::density::regression_uncertainty_from(LOG_DENSITY_FLOOR),
        }
    }
}

/// Same `u_r` for every box.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPrior(pub f64);

impl BoxPrior for ConstantPrior {
    fn regression_uncertainty(&self, _w: f64, _h: f64) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScore {
    pub detection: Detection,
    pub u_c: f64,
    pub u_r: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScoreReport {
    pub image_id: String,
    pub strategy: Strategy,
    pub u_s: f64,
    pub object_count: usize,
    pub objects: Vec<ObjectScore>,
}

impl ImageScoreReport {
    fn from_objects(image_id: &str, strategy: Strategy, objects: Vec<ObjectScore>) -> Self {
        let contributions: Vec<f64> = objects.iter().map(|o| o.combined).collect();
        Self {
            image_id: image_id.to_string(),
            strategy,
            u_s: stable_sum(&contributions),
            object_count: objects.len(),
            objects,
        }
    }
}

fn weight_product(table: &CategoryWeightTable, category: CategoryId) -> Result<f64, ScoringError> {
    table
        .product(category)
        .ok_or(ScoringError::UnknownCategory(category.0))
}

/// WCR score of one detection.
pub fn object_uncertainty(
    detection: &Detection,
    table: &CategoryWeightTable,
    prior: &dyn BoxPrior,
) -> Result<ObjectScore, ScoringError> {
    let u_c = weight_product(table, detection.category)? * (1.0 - detection.score);
    let u_r = prior.regression_uncertainty(detection.w, detection.h);
    Ok(ObjectScore {
        detection: detection.clone(),
        u_c,
        u_r,
        combined: u_c * u_r,
    })
}

pub fn image_score_wcr(
    image_id: &str,
    detections: &[Detection],
    table: &CategoryWeightTable,
    prior: &dyn BoxPrior,
) -> Result<ImageScoreReport, ScoringError> {
    let objects = detections
        .iter()
        .map(|d| object_uncertainty(d, table, prior))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImageScoreReport::from_objects(
        image_id,
        Strategy::Wcr,
        objects,
    ))
}

pub fn image_score_wc(
    image_id: &str,
    detections: &[Detection],
    table: &CategoryWeightTable,
) -> Result<ImageScoreReport, ScoringError> {
    let objects = detections
        .iter()
        .map(|d| {
            let u_c = weight_product(table, d.category)? * (1.0 - d.score);
            Ok(ObjectScore {
                detection: d.clone(),
                u_c,
                u_r: 1.0,
                combined: u_c,
            })
        })
        .collect::<Result<Vec<_>, ScoringError>>()?;
    Ok(ImageScoreReport::from_objects(
        image_id,
        Strategy::Wc,
        objects,
    ))
}

pub fn image_score_lc(image_id: &str, detections: &[Detection]) -> ImageScoreReport {
    let objects = detections
        .iter()
        .map(|d| {
            let u_c = 1.0 - d.score;
            ObjectScore {
                detection: d.clone(),
                u_c,
                u_r: 1.0,
                combined: u_c,
            }
        })
        .collect();
    ImageScoreReport::from_objects(image_id, Strategy::Lc, objects)
}

/// Scoring inputs shared by every image of a pool.
#[derive(Clone, Copy)]
pub struct ScoreContext<'a> {
    pub table: Option<&'a CategoryWeightTable>,
    pub prior: Option<&'a dyn BoxPrior>,
    pub min_score: f64,
}

/// Scores every pool image under `strategy`. Images without detections
/// score 0. Output is sorted by image id.
pub fn score_pool<'a>(
    pool: impl IntoIterator<Item = &'a str>,
    detections: &DetectionMap,
    strategy: Strategy,
    ctx: ScoreContext<'_>,
) -> Result<Vec<ImageScoreReport>, ScoringError> {
    let table = match strategy {
        Strategy::Random => return Err(ScoringError::RandomNotScorable),
        Strategy::Lc => None,
        Strategy::Wc | Strategy::Wcr => {
            Some(ctx.table.ok_or(ScoringError::MissingWeights(strategy))?)
        }
    };
    let prior = match strategy {
        Strategy::Wcr => Some(ctx.prior.ok_or(ScoringError::MissingDensity)?),
        _ => None,
    };
    let mut ids: Vec<&str> = pool.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let kept: Vec<Detection> = detections
                .get(id)
                .map(|dets| {
                    dets.iter()
                        .filter(|d| d.score >= ctx.min_score)
                        .cloned()
                        .collect()
                })
                .unwrap_or_default();
            match strategy {
                Strategy::Lc => Ok(image_score_lc(id, &kept)),
                Strategy::Wc => image_score_wc(id, &kept, table.expect("checked")),
                Strategy::Wcr => {
                    image_score_wcr(id, &kept, table.expect("checked"), prior.expect("checked"))
                }
                Strategy::Random => unreachable!(),
            }
        })
        .collect()
}

/// Selection order: descending `u_s`, then ascending image id.
pub fn rank_order(a: &ImageScoreReport, b: &ImageScoreReport) -> Ordering {
    b.u_s
        .total_cmp(&a.u_s)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

pub fn ranked(reports: &[ImageScoreReport]) -> Vec<&ImageScoreReport> {
    let mut sorted: Vec<&ImageScoreReport> = reports.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    sorted
}

/// CSV `image_id,strategy,u_s,object_count,rank` in rank order (1-based).
pub fn write_score_csv<W: Write>(reports: &[ImageScoreReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "image_id,strategy,u_s,object_count,rank")?;
    for (i, r) in ranked(reports).into_iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.image_id,
            r.strategy,
            r.u_s,
            r.object_count,
            i + 1
        )?;
    }
    Ok(())
}
