//! Box-size density model and regression uncertainty.
//!
//! Labeled boxes are reduced to `(long, short)` side lengths in pixels and a
//! full-covariance 2-D Gaussian mixture is fitted by EM. The natural-log
//! mixture density of a predicted box is clipped from below at -99 and
//! mapped through a piecewise-linear function to `u_r`: boxes of common
//! sizes score near or above 0.5, outliers near zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to the log-density before the piecewise map.
pub const LOG_DENSITY_FLOOR: f64 = -99.0;
/// Breakpoint between the two linear pieces of `u_r`.
pub const U_R_BREAKPOINT: f64 = -10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Absolute lower bound for the covariance regularizer, in px².
const MIN_REG_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("box side must be positive, got w={w}, h={h}")]
    NonPositiveSide { w: f64, h: f64 },
    #[error("cannot fit a mixture to an empty feature set")]
    EmptyFeatures,
    #[error("need at least {k} feature points for {k} components, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("invalid component range {k_min}..={k_max}")]
    InvalidRange { k_min: usize, k_max: usize },
    #[error("invalid mixture model: {0}")]
    InvalidModel(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeFeature {
    pub long: f64,
    pub short: f64,
}

impl SizeFeature {
    fn as_array(&self) -> [f64; 2] {
        [self.long, self.short]
    }
}

pub fn extract_size_feature(w: f64, h: f64) -> Result<SizeFeature, DensityError> {
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(DensityError::NonPositiveSide { w, h });
    }
    Ok(SizeFeature {
        long: w.max(h),
        short: w.min(h),
    })
}

/// Natural-log mixture density with its clipped counterpart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDensity {
    pub raw: f64,
    pub clipped: f64,
}

impl LogDensity {
    pub fn from_raw(raw: f64) -> Self {
        Self {
            raw,
            clipped: raw.max(LOG_DENSITY_FLOOR),
        }
    }
}

/// Piecewise map from clipped log-density to regression uncertainty.
/// Inputs below the floor are clipped first.
pub fn regression_uncertainty_from(log_density: f64) -> f64 {
    let clipped = log_density.max(LOG_DENSITY_FLOOR);
    if clipped >= U_R_BREAKPOINT {
        0.05 * (clipped + 10.0) + 0.5
    } else {
        0.5 * (clipped + 100.0) / 90.0
    }
}

pub fn regression_uncertainty(density: LogDensity) -> f64 {
    regression_uncertainty_from(density.clipped)
}

/// Fitted 2-D Gaussian mixture over size features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub mix_weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    /// Row-major 2x2 covariances.
    pub covariances: Vec<[f64; 4]>,
    pub reg_epsilon: f64,
    pub seed: u64,
    pub feature_count: usize,
}

/// Per-component precomputed inverse and log normalizer.
#[derive(Clone, Copy, Debug)]
struct Component {
    log_weight: f64,
    mean: [f64; 2],
    inv: [f64; 3], // a, b, d of the symmetric inverse [[a, b], [b, d]]
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: [f64; 2], cov: &[f64; 4]) -> Self {
        let (a, b, d) = (cov[0], 0.5 * (cov[1] + cov[2]), cov[3]);
        let det = a * d - b * b;
        Self {
            log_weight: weight.ln(),
            mean,
            inv: [d / det, -b / det, a / det],
            log_norm: -LN_2PI - 0.5 * det.ln(),
        }
    }

    fn log_pdf(&self, x: [f64; 2]) -> f64 {
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        let maha = self.inv[0] * dx * dx + 2.0 * self.inv[1] * dx * dy + self.inv[2] * dy * dy;
        self.log_norm - 0.5 * maha
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmModel {
    fn components(&self) -> Vec<Component> {
        (0..self.k)
            .map(|j| Component::new(self.mix_weights[j], self.means[j], &self.covariances[j]))
            .collect()
    }

    pub fn log_density(&self, feature: SizeFeature) -> LogDensity {
        let x = feature.as_array();
        let terms: Vec<f64> = self
            .components()
            .iter()
            .map(|c| c.log_weight + c.log_pdf(x))
            .collect();
        LogDensity::from_raw(log_sum_exp(&terms))
    }

    /// Total log-likelihood of a point set.
    pub fn log_likelihood(&self, features: &[SizeFeature]) -> f64 {
        let comps = self.components();
        let mut terms = vec![0.0; self.k];
        features
            .iter()
            .map(|f| {
                let x = f.as_array();
                for (t, c) in terms.iter_mut().zip(&comps) {
                    *t = c.log_weight + c.log_pdf(x);
                }
                log_sum_exp(&terms)
            })
            .sum()
    }

    /// Free parameters of a full-covariance 2-D mixture.
    pub fn parameter_count(k: usize) -> usize {
        6 * k - 1
    }

    pub fn validate(&self) -> Result<(), DensityError> {
        let bad = |m: String| Err(DensityError::InvalidModel(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.mix_weights.len() != self.k
            || self.means.len() != self.k
            || self.covariances.len() != self.k
        {
            return bad(format!("expected {} components in every field", self.k));
        }
        let total: f64 = self.mix_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.mix_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad(format!(
                "mixture weights must be non-negative and sum to 1, got {total}"
            ));
        }
        for (j, c) in self.covariances.iter().enumerate() {
            let det = c[0] * c[3] - c[1] * c[2];
            if !(c[0] > 0.0 && det > 0.0) || (c[1] - c[2]).abs() > 1e-9 * c[0].abs().max(1.0) {
                return bad(format!("covariance {j} is not symmetric positive-definite"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DensityError> {
        let model: GmmModel =
            serde_json::from_str(text).map_err(|e| DensityError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Convergence threshold on the per-point mean log-likelihood gain.
    pub tol: f64,
    /// Diagonal regularizer; `None` uses `1e-6 * mean feature variance`.
    pub reg_epsilon: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-7,
            reg_epsilon: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood: f64,
    /// Total log-likelihood after initialization and after every accepted
    /// EM step.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl GmmFit {
    pub fn bic(&self) -> f64 {
        let n = self.model.feature_count as f64;
        -2.0 * self.log_likelihood + GmmModel::parameter_count(self.model.k) as f64 * n.ln()
    }
}

fn mean_and_covariance(features: &[SizeFeature]) -> ([f64; 2], [f64; 4]) {
    let n = features.len() as f64;
    let mut mean = [0.0; 2];
    for f in features {
        mean[0] += f.long;
        mean[1] += f.short;
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut cov = [0.0; 4];
    for f in features {
        let dx = f.long - mean[0];
        let dy = f.short - mean[1];
        cov[0] += dx * dx;
        cov[1] += dx * dy;
        cov[3] += dy * dy;
    }
    cov[0] /= n;
    cov[1] /= n;
    cov[3] /= n;
    cov[2] = cov[1];
    (mean, cov)
}

/// Default regularizer: `1e-6` times the mean per-axis variance, floored.
pub fn default_reg_epsilon(features: &[SizeFeature]) -> f64 {
    let (_, cov) = mean_and_covariance(features);
    (1e-6 * 0.5 * (cov[0] + cov[3])).max(MIN_REG_EPSILON)
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the nearest chosen center.
fn seed_centers(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())]);
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            nearest
                .iter()
                .position(|d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

struct EmState {
    weights: Vec<f64>,
    means: Vec<[f64; 2]>,
    covs: Vec<[f64; 4]>,
}

/// Responsibilities (row-major n x k) and total log-likelihood.
fn e_step(points: &[[f64; 2]], state: &EmState, resp: &mut [f64]) -> f64 {
    let k = state.weights.len();
    let comps: Vec<Component> = (0..k)
        .map(|j| Component::new(state.weights[j], state.means[j], &state.covs[j]))
        .collect();
    let mut total = 0.0;
    for (i, x) in points.iter().enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        for (r, c) in row.iter_mut().zip(&comps) {
            *r = c.log_weight + c.log_pdf(*x);
        }
        let lse = log_sum_exp(row);
        for r in row.iter_mut() {
            *r = (*r - lse).exp();
        }
        total += lse;
    }
    total
}

fn m_step(
    points: &[[f64; 2]],
    resp: &[f64],
    k: usize,
    eps: f64,
    fallback_cov: &[f64; 4],
    previous: &EmState,
) -> EmState {
    let n = points.len();
    let mut mass = vec![0.0; k];
    let mut means = vec![[0.0; 2]; k];
    for (i, x) in points.iter().enumerate() {
        for j in 0..k {
            let r = resp[i * k + j];
            mass[j] += r;
            means[j][0] += r * x[0];
            means[j][1] += r * x[1];
        }
    }
    let mut covs = vec![[0.0; 4]; k];
    for j in 0..k {
        if mass[j] > 0.0 {
            means[j][0] /= mass[j];
            means[j][1] /= mass[j];
        } else {
            means[j] = previous.means[j];
        }
    }
    for (i, x) in points.iter().enumerate() {
        for j in 0..k {
            let r = resp[i * k + j];
            let dx = x[0] - means[j][0];
            let dy = x[1] - means[j][1];
            covs[j][0] += r * dx * dx;
            covs[j][1] += r * dx * dy;
            covs[j][3] += r * dy * dy;
        }
    }
    let tiny = 1e-12 * n as f64;
    for j in 0..k {
        if mass[j] > tiny {
            covs[j][0] = covs[j][0] / mass[j] + eps;
            covs[j][1] /= mass[j];
            covs[j][3] = covs[j][3] / mass[j] + eps;
        } else {
            // starved component: park it on the global covariance
            covs[j] = *fallback_cov;
            mass[j] = tiny;
        }
        covs[j][2] = covs[j][1];
    }
    let total: f64 = mass.iter().sum();
    EmState {
        weights: mass.iter().map(|m| m / total).collect(),
        means,
        covs,
    }
}

/// Fits a `k`-component mixture by EM from a seeded k-means++ start.
///
/// Iteration stops when the per-point log-likelihood gain drops below
/// `tol`, after `max_iters` steps, or when a step would lower the
/// likelihood (possible because of the diagonal regularizer), in which
/// case the previous parameters are kept.
pub fn fit_gmm(
    features: &[SizeFeature],
    k: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<GmmFit, DensityError> {
    if features.is_empty() {
        return Err(DensityError::EmptyFeatures);
    }
    if k == 0 || features.len() < k {
        return Err(DensityError::TooFewPoints {
            k,
            n: features.len(),
        });
    }
    let eps = options
        .reg_epsilon
        .unwrap_or_else(|| default_reg_epsilon(features));
    let points: Vec<[f64; 2]> = features.iter().map(SizeFeature::as_array).collect();
    let n = points.len();
    let (_, mut global_cov) = mean_and_covariance(features);
    global_cov[0] += eps;
    global_cov[3] += eps;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = seed_centers(&points, k, &mut rng);

    // hard assignment to the nearest center, then one M-step
    let mut resp = vec![0.0; n * k];
    for (i, p) in points.iter().enumerate() {
        let best = (0..k)
            .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
            .expect("k >= 1");
        resp[i * k + best] = 1.0;
    }
    let seeded = EmState {
        weights: vec![1.0 / k as f64; k],
        means: centers,
        covs: vec![global_cov; k],
    };
    let mut state = m_step(&points, &resp, k, eps, &global_cov, &seeded);
    let mut ll = e_step(&points, &state, &mut resp);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut next_resp = vec![0.0; n * k];

    for _ in 0..options.max_iters {
        let candidate = m_step(&points, &resp, k, eps, &global_cov, &state);
        let candidate_ll = e_step(&points, &candidate, &mut next_resp);
        if !(candidate_ll >= ll) {
            converged = true;
            break;
        }
        let gain = candidate_ll - ll;
        state = candidate;
        ll = candidate_ll;
        std::mem::swap(&mut resp, &mut next_resp);
        trace.push(ll);
        if gain / (n as f64) < options.tol {
            converged = true;
            break;
        }
    }

    let model = GmmModel {
        k,
        mix_weights: state.weights,
        means: state.means,
        covariances: state.covs,
        reg_epsilon: eps,
        seed,
        feature_count: n,
    };
    Ok(GmmFit {
        model,
        log_likelihood: ll,
        trace,
        converged,
    })
}

/// BIC score for each candidate `k`.
#[derive(Clone, Debug)]
pub struct KSelection {
    pub best: GmmFit,
    pub scores: Vec<(usize, f64)>,
}

/// Fits every `k` in `k_min..=k_max` and keeps the lowest BIC; ties go to
/// the smaller `k`.
pub fn select_k(
    features: &[SizeFeature],
    k_min: usize,
    k_max: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<KSelection, DensityError> {
    if k_min == 0 || k_max < k_min {
        return Err(DensityError::InvalidRange { k_min, k_max });
    }
    let mut best: Option<GmmFit> = None;
    let mut scores = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let fit = fit_gmm(features, k, seed, options)?;
        let bic = fit.bic();
        scores.push((k, bic));
        if best.as_ref().is_none_or(|b| bic < b.bic()) {
            best = Some(fit);
        }
    }
    Ok(KSelection {
        best: best.expect("range is non-empty"),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn unit_model(mean: [f64; 2]) -> GmmModel {
        GmmModel {
            k: 1,
            mix_weights: vec![1.0],
            means: vec![mean],
            covariances: vec![[1.0, 0.0, 0.0, 1.0]],
            reg_epsilon: 0.0,
            seed: 0,
            feature_count: 1,
        }
    }

    #[test]
    fn size_feature_examples() {
        let f = extract_size_feature(30.0, 80.0).unwrap();
        assert_eq!((f.long, f.short), (80.0, 30.0));
        let f = extract_size_feature(50.0, 50.0).unwrap();
        assert_eq!((f.long, f.short), (50.0, 50.0));
        let f = extract_size_feature(1024.0, 1.0).unwrap();
        assert_eq!((f.long, f.short), (1024.0, 1.0));
        assert!(extract_size_feature(0.0, 3.0).is_err());
        assert!(extract_size_feature(3.0, -1.0).is_err());
    }

    #[test]
    fn closed_form_log_density() {
        let m = unit_model([100.0, 50.0]);
        let at_mean = m.log_density(SizeFeature {
            long: 100.0,
            short: 50.0,
        });
        assert!((at_mean.raw - (-(2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((at_mean.raw - (-1.83788)).abs() < 1e-5);
        let off = m.log_density(SizeFeature {
            long: 103.0,
            short: 54.0,
        });
        assert!((off.raw - (-(2.0 * std::f64::consts::PI).ln() - 12.5)).abs() < 1e-12);
        assert!((off.raw - (-14.33788)).abs() < 1e-5);
    }

    #[test]
    fn clip_rule() {
        let d = LogDensity::from_raw(-150.0);
        assert_eq!(d.clipped, -99.0);
        assert_eq!(d.raw, -150.0);
        assert_eq!(LogDensity::from_raw(-3.0).clipped, -3.0);
    }

    #[test]
    fn u_r_examples() {
        assert_eq!(regression_uncertainty_from(-10.0), 0.5);
        assert_eq!(regression_uncertainty_from(0.0), 1.0);
        assert_eq!(regression_uncertainty_from(-55.0), 0.25);
        assert!((regression_uncertainty_from(-99.0) - 0.005556).abs() < 1e-6);
        assert_eq!(regression_uncertainty_from(-99.0), 0.5 / 90.0);
        assert_eq!(
            regression_uncertainty_from(-500.0),
            regression_uncertainty_from(-99.0)
        );
        // unclamped above
        assert!(regression_uncertainty_from(4.0) > 1.0);
    }

    #[test]
    fn k1_fit_is_sample_moments() {
        let feats: Vec<SizeFeature> = [(10.0, 4.0), (12.0, 5.0), (15.0, 9.0), (11.0, 2.0)]
            .iter()
            .map(|&(l, s)| SizeFeature { long: l, short: s })
            .collect();
        let fit = fit_gmm(&feats, 1, 3, &FitOptions::default()).unwrap();
        let (mean, cov) = mean_and_covariance(&feats);
        let eps = fit.model.reg_epsilon;
        assert_eq!(fit.model.mix_weights, vec![1.0]);
        for a in 0..2 {
            assert!((fit.model.means[0][a] - mean[a]).abs() < 1e-12);
        }
        let c = fit.model.covariances[0];
        assert!((c[0] - (cov[0] + eps)).abs() < 1e-12);
        assert!((c[1] - cov[1]).abs() < 1e-12);
        assert!((c[3] - (cov[3] + eps)).abs() < 1e-12);
    }

    #[test]
    fn identical_points_regularize() {
        let feats = vec![
            SizeFeature {
                long: 40.0,
                short: 20.0
            };
            25
        ];
        let fit = fit_gmm(&feats, 1, 0, &FitOptions::default()).unwrap();
        let eps = fit.model.reg_epsilon;
        assert_eq!(eps, MIN_REG_EPSILON);
        assert_eq!(fit.model.covariances[0], [eps, 0.0, 0.0, eps]);
        assert!(fit.log_likelihood.is_finite());
        assert!(fit.model.log_density(feats[0]).raw.is_finite());
    }

    #[test]
    fn fit_errors() {
        assert_eq!(
            fit_gmm(&[], 1, 0, &FitOptions::default()).unwrap_err(),
            DensityError::EmptyFeatures
        );
        let one = [SizeFeature {
            long: 2.0,
            short: 1.0,
        }];
        assert!(matches!(
            fit_gmm(&one, 2, 0, &FitOptions::default()),
            Err(DensityError::TooFewPoints { k: 2, n: 1 })
        ));
        assert!(matches!(
            select_k(&one, 2, 1, 0, &FitOptions::default()),
            Err(DensityError::InvalidRange { .. })
        ));
    }

    fn two_clusters(seed: u64, n: usize) -> Vec<SizeFeature> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let c = if i % 2 == 0 {
                    [300.0, 200.0]
                } else {
                    [30.0, 20.0]
                };
                SizeFeature {
                    long: c[0] + unit.sample(&mut rng),
                    short: c[1] + unit.sample(&mut rng),
                }
            })
            .collect()
    }

    #[test]
    fn select_k_fixed_range_skips_search() {
        let feats = two_clusters(1, 60);
        let sel = select_k(&feats, 3, 3, 9, &FitOptions::default()).unwrap();
        assert_eq!(sel.best.model.k, 3);
        assert_eq!(sel.scores.len(), 1);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let feats = two_clusters(4, 80);
        let fit = fit_gmm(&feats, 2, 5, &FitOptions::default()).unwrap();
        let back = GmmModel::from_json(&fit.model.to_json()).unwrap();
        assert_eq!(back, fit.model);
        let mut bad = fit.model.clone();
        bad.mix_weights[0] += 0.5;
        assert!(GmmModel::from_json(&bad.to_json()).is_err());
    }
}
