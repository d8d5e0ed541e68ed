use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wcr_core::density::FitOptions;
use wcr_core::eval::{ApMode, EvalOptions};
use wcr_core::iteration::LoopConfig;
use wcr_core::numeric::sha256_hex;
use wcr_core::scoring::DEFAULT_MIN_SCORE;
use wcr_core::simdet::{ClosedLoopSpec, SkillModel, SynthSpec};
use wcr_core::{Strategy, W1Mode};

use crate::error::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub gmm: u64,
    pub random: u64,
    pub simdet: u64,
    pub eval: u64,
    pub dataset: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 0,
            gmm: 1,
            random: 2,
            simdet: 3,
            eval: 4,
            dataset: 0,
        }
    }
}

/// Every knob of a run. Loaded from TOML; command-line flags override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ground_truth: Option<PathBuf>,
    /// Held-out manifest used by `loop` for evaluation.
    pub validation: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub categories: Vec<String>,
    pub categories_file: Option<PathBuf>,
    /// Labeled image ids, one per line.
    pub labeled: Option<PathBuf>,
    pub state: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub strategy: Strategy,
    pub init_fraction: f64,
    pub batch_fraction: f64,
    pub iterations: usize,
    pub seeds: Seeds,
    pub k_min: usize,
    pub k_max: usize,
    pub min_score: f64,
    pub w1: W1Mode,
    pub double_weight_fraction: f64,
    pub window: u32,
    pub stride: u32,
    pub min_inside: f64,
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
    pub synth: SynthSpec,
    pub skill: SkillModel,
    pub validation_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ground_truth: None,
            validation: None,
            detections: None,
            categories: Vec::new(),
            categories_file: None,
            labeled: None,
            state: None,
            out_dir: PathBuf::from("out"),
            strategy: Strategy::Wcr,
            init_fraction: 0.1,
            batch_fraction: 0.1,
            iterations: 4,
            seeds: Seeds::default(),
            k_min: 1,
            k_max: 8,
            min_score: DEFAULT_MIN_SCORE,
            w1: W1Mode::default(),
            double_weight_fraction: 0.2,
            window: 1024,
            stride: 824,
            min_inside: 0.5,
            iou_threshold: 0.5,
            ap_mode: ApMode::AllPoints,
            gmm_max_iters: 200,
            gmm_tol: 1e-7,
            synth: SynthSpec::default(),
            skill: SkillModel::default(),
            validation_images: 200,
        }
    }
}

fn open_fraction(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{name} must be in (0, 1), got {v}"
        )))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        open_fraction("init_fraction", self.init_fraction)?;
        open_fraction("batch_fraction", self.batch_fraction)?;
        if !(self.double_weight_fraction > 0.0 && self.double_weight_fraction < 1.0) {
            return Err(CliError::Usage(format!(
                "double_weight_fraction must be in (0, 1), got {}",
                self.double_weight_fraction
            )));
        }
        if self.stride == 0 || self.window < self.stride {
            return Err(CliError::Usage(format!(
                "need window >= stride > 0, got window {} stride {}",
                self.window, self.stride
            )));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(CliError::Usage(format!(
                "invalid k range {}..{}",
                self.k_min, self.k_max
            )));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(CliError::Usage(format!(
                "min_score must be in [0, 1], got {}",
                self.min_score
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(CliError::Usage(format!(
                "iou_threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. The output directory is not
    /// part of the digest.
    pub fn digest(&self) -> String {
        let canonical = RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        sha256_hex(json.as_bytes())
    }

    pub fn header(&self) -> String {
        format!("# wcr {TOOL_VERSION} config={}", self.digest())
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            strategy: self.strategy,
            init_fraction: self.init_fraction,
            batch_fraction: self.batch_fraction,
            iterations: self.iterations,
            init_seed: self.seeds.init,
            gmm_seed: self.seeds.gmm,
            random_seed: self.seeds.random,
            k_min: self.k_min,
            k_max: self.k_max,
            min_score: self.min_score,
            w1_mode: self.w1,
            fit: self.fit_options(),
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iters: self.gmm_max_iters,
            tol: self.gmm_tol,
            reg_epsilon: None,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            iou_threshold: self.iou_threshold,
            mode: self.ap_mode,
            min_score: 0.0,
        }
    }

    pub fn closed_loop(&self) -> ClosedLoopSpec {
        ClosedLoopSpec {
            synth: self.synth.clone(),
            skill: self.skill.clone(),
            validation_images: self.validation_images,
            dataset_seed: self.seeds.dataset,
            detector_seed: self.seeds.simdet,
            eval_seed: self.seeds.eval,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            strategy: Strategy::Lc,
            w1: W1Mode::Raw,
            ..RunConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: RunConfig = toml::from_str("strategy = \"wc\"\n[seeds]\ninit = 9\n").unwrap();
        assert_eq!(cfg.strategy, Strategy::Wc);
        assert_eq!(cfg.seeds.init, 9);
        assert_eq!(cfg.seeds.gmm, 1);
        assert_eq!(cfg.iterations, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("stratgy = \"wc\"").is_err());
    }

    #[test]
    fn digest_ignores_out_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig {
            iterations: 5,
            ..a.clone()
        };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn validation_rules() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig {
            window: 100,
            stride: 200,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            init_fraction: 1.0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
