//! Real-time crash-risk scoring for freeway cells under reduced visibility.
//!
//! The score is a linear combination of nine explanatory variables
//! (visibility, a diverge-segment indicator, and seven traffic-flow
//! statistics) that can optionally be pushed through the logistic link to
//! yield a crash probability. Coefficients ship as a built-in fixture
//! ([`RiskCoefficients::reference`]) and can be re-fit on observation data
//! with a component-wise random-walk Metropolis sampler ([`fit_mcmc`]).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of explanatory variables (excluding the intercept).
pub const FEATURE_COUNT: usize = 9;

/// Variable names in model order, intercept first.
pub const COEFFICIENT_NAMES: [&str; FEATURE_COUNT + 1] = [
    "intercept",
    "visibility",
    "ds",
    "aqu",
    "aqd",
    "dqu",
    "dvu",
    "dqd",
    "dvd",
    "dv",
];

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("observation data is empty")]
    EmptyData,
    #[error("invalid feature values: {0}")]
    InvalidFeatures(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error(
        "degenerate data: all outcomes identical with a separating feature; \
         the likelihood has no interior maximum"
    )]
    DegenerateData,
    #[error("proposal mis-scaled: post-burn-in acceptance rate {rate:.4} is below 1%")]
    LowAcceptance { rate: f64 },
}

/// Explanatory variables for one cell at one time step.
///
/// Count statistics are in veh/5min, speeds in mph, visibility in miles.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RiskFeatures {
    /// Sight distance, miles.
    pub visibility: f64,
    /// True when the cell is a diverge segment (has an off-ramp split).
    pub ds: bool,
    /// Mean vehicle count at the upstream station.
    pub aqu: f64,
    /// Mean vehicle count at the downstream station.
    pub aqd: f64,
    /// Standard deviation of upstream vehicle counts.
    pub dqu: f64,
    /// Standard deviation of upstream speed, mph.
    pub dvu: f64,
    /// Standard deviation of downstream vehicle counts.
    pub dqd: f64,
    /// Standard deviation of downstream speed, mph.
    pub dvd: f64,
    /// Mean upstream speed minus mean downstream speed, mph.
    pub dv: f64,
}

impl RiskFeatures {
    /// Values in model order (without the intercept slot).
    pub fn to_array(self) -> [f64; FEATURE_COUNT] {
        [
            self.visibility,
            if self.ds { 1.0 } else { 0.0 },
            self.aqu,
            self.aqd,
            self.dqu,
            self.dvu,
            self.dqd,
            self.dvd,
            self.dv,
        ]
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        let nonneg = [
            ("visibility", self.visibility),
            ("aqu", self.aqu),
            ("aqd", self.aqd),
            ("dqu", self.dqu),
            ("dvu", self.dvu),
            ("dqd", self.dqd),
            ("dvd", self.dvd),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(RiskError::InvalidFeatures(format!("{name} = {v}")));
            }
        }
        if !self.dv.is_finite() {
            return Err(RiskError::InvalidFeatures(format!("dv = {}", self.dv)));
        }
        Ok(())
    }
}

/// Posterior spread of one coefficient, kept alongside the means for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientStats {
    pub std_dev: f64,
    pub q2_5: f64,
    pub q97_5: f64,
}

/// Coefficient means of the crash-risk model, one per feature plus intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoefficients {
    pub intercept: f64,
    pub visibility: f64,
    pub ds: f64,
    pub aqu: f64,
    pub aqd: f64,
    pub dqu: f64,
    pub dvu: f64,
    pub dqd: f64,
    pub dvd: f64,
    pub dv: f64,
    /// Optional per-coefficient posterior spread, keyed by variable name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<BTreeMap<String, CoefficientStats>>,
}

impl RiskCoefficients {
    /// Built-in coefficient set fitted on historical fog-condition freeway
    /// crash data. The AQU coefficient is exactly zero in this set.
    pub fn reference() -> Self {
        let stats = [
            ("intercept", 1.098, -1.653, 2.631),
            ("visibility", 0.067, -0.337, -0.073),
            ("ds", 0.453, -1.976, -0.208),
            ("aqu", 0.003, -0.007, 0.006),
            ("aqd", 0.003, -0.004, 0.009),
            ("dqu", 0.099, -0.018, 0.369),
            ("dvu", 0.148, -0.503, 0.081),
            ("dqd", 0.094, -0.196, 0.168),
            ("dvd", 0.222, -1.013, -0.156),
            ("dv", 0.031, -0.046, 0.076),
        ]
        .into_iter()
        .map(|(name, std_dev, q2_5, q97_5)| {
            (
                name.to_string(),
                CoefficientStats {
                    std_dev,
                    q2_5,
                    q97_5,
                },
            )
        })
        .collect();
        RiskCoefficients {
            intercept: 0.493,
            visibility: -0.202,
            ds: -1.077,
            aqu: 0.000,
            aqd: 0.002,
            dqu: 0.173,
            dvu: -0.202,
            dqd: -0.009,
            dvd: -0.561,
            dv: 0.013,
            stats: Some(stats),
        }
    }

    /// Non-intercept weights in model order.
    pub fn weights(&self) -> [f64; FEATURE_COUNT] {
        [
            self.visibility,
            self.ds,
            self.aqu,
            self.aqd,
            self.dqu,
            self.dvu,
            self.dqd,
            self.dvd,
            self.dv,
        ]
    }

    /// Full coefficient vector, intercept first.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FEATURE_COUNT + 1);
        v.push(self.intercept);
        v.extend_from_slice(&self.weights());
        v
    }
}

/// How a risk value is reported: the raw linear predictor or its logistic
/// transform. The linear form is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMode {
    #[default]
    Linear,
    Logistic,
}

/// Linear predictor eta = intercept + sum of coefficient * feature.
pub fn linear_predictor(features: &RiskFeatures, coeffs: &RiskCoefficients) -> f64 {
    let x = features.to_array();
    let w = coeffs.weights();
    let mut eta = coeffs.intercept;
    for i in 0..FEATURE_COUNT {
        eta += w[i] * x[i];
    }
    eta
}

/// Logistic link `e^eta / (1 + e^eta)`, clamped to the open unit interval.
pub fn crash_probability(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    // Largest f64 below 1.0 is 1 - 2^-53; keeps the output strictly inside (0, 1).
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Risk value in the requested mode.
pub fn risk(features: &RiskFeatures, coeffs: &RiskCoefficients, mode: RiskMode) -> f64 {
    let eta = linear_predictor(features, coeffs);
    match mode {
        RiskMode::Linear => eta,
        RiskMode::Logistic => crash_probability(eta),
    }
}

/// Threshold comparison; activation is inclusive at the threshold.
pub fn exceeds_threshold(risk_value: f64, threshold: f64) -> bool {
    risk_value >= threshold
}

/// One labelled observation for model fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrashObservation {
    /// True when a crash occurred in the observation window.
    pub crash: bool,
    pub features: RiskFeatures,
}

/// Independent Gaussian priors, one (mean, std-dev) pair per coefficient,
/// intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
}

impl PriorSpec {
    /// Zero-mean Gaussian priors with a common std-dev.
    pub fn gaussian(dim: usize, std_dev: f64) -> Self {
        PriorSpec {
            means: vec![0.0; dim],
            std_devs: vec![std_dev; dim],
        }
    }

    /// Improper flat priors; the prior term contributes exactly zero.
    pub fn flat(dim: usize) -> Self {
        PriorSpec {
            means: vec![0.0; dim],
            std_devs: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        if self.means.len() != self.std_devs.len() {
            return Err(RiskError::Dimension {
                expected: self.means.len(),
                got: self.std_devs.len(),
            });
        }
        for (j, &s) in self.std_devs.iter().enumerate() {
            if !(s > 0.0) {
                return Err(RiskError::InvalidPrior(format!("std_dev[{j}] = {s}")));
            }
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_posterior_core(
    beta: &[f64],
    ys: &[f64],
    rows: &[Vec<f64>],
    priors: &PriorSpec,
) -> Result<f64, RiskError> {
    if ys.is_empty() {
        return Err(RiskError::EmptyData);
    }
    if priors.dim() != beta.len() {
        return Err(RiskError::Dimension {
            expected: beta.len(),
            got: priors.dim(),
        });
    }
    priors.validate()?;
    let mut total = 0.0;
    for (y, row) in ys.iter().zip(rows) {
        if row.len() != beta.len() - 1 {
            return Err(RiskError::Dimension {
                expected: beta.len() - 1,
                got: row.len(),
            });
        }
        let eta = beta[0]
            + row
                .iter()
                .zip(&beta[1..])
                .map(|(x, b)| x * b)
                .sum::<f64>();
        total += y * eta - softplus(eta);
    }
    for j in 0..beta.len() {
        let z = (beta[j] - priors.means[j]) / priors.std_devs[j];
        total -= 0.5 * z * z;
    }
    Ok(total)
}

/// Log posterior density (up to an additive constant) of the full
/// feature model on crash observations.
pub fn log_posterior(
    coeffs: &RiskCoefficients,
    data: &[CrashObservation],
    priors: &PriorSpec,
) -> Result<f64, RiskError> {
    let (ys, rows) = design_from_observations(data);
    log_posterior_core(&coeffs.to_vector(), &ys, &rows, priors)
}

/// Log posterior on an explicit design matrix (rows exclude the intercept
/// column; `beta[0]` is the intercept).
pub fn log_posterior_design(
    beta: &[f64],
    ys: &[f64],
    rows: &[Vec<f64>],
    priors: &PriorSpec,
) -> Result<f64, RiskError> {
    log_posterior_core(beta, ys, rows, priors)
}

fn design_from_observations(data: &[CrashObservation]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let ys = data
        .iter()
        .map(|o| if o.crash { 1.0 } else { 0.0 })
        .collect();
    let rows = data.iter().map(|o| o.features.to_array().to_vec()).collect();
    (ys, rows)
}

/// Random-walk Metropolis configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub proposal_scale: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 20_000,
            burn_in: 5_000,
            proposal_scale: 0.05,
            seed: 0,
        }
    }
}

/// Posterior summary of one coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub mean: f64,
    pub std_dev: f64,
    pub q2_5: f64,
    pub q97_5: f64,
}

/// Chain summary computed from post-burn-in samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub coefficients: Vec<CoefficientSummary>,
    pub samples: usize,
    pub acceptance_rate: f64,
}

impl PosteriorSummary {
    /// Converts the posterior means into a coefficient set, provided the
    /// chain was fit on the full feature model.
    pub fn to_coefficients(&self) -> Result<RiskCoefficients, RiskError> {
        if self.coefficients.len() != FEATURE_COUNT + 1 {
            return Err(RiskError::Dimension {
                expected: FEATURE_COUNT + 1,
                got: self.coefficients.len(),
            });
        }
        let m = |i: usize| self.coefficients[i].mean;
        let stats = self
            .coefficients
            .iter()
            .map(|c| {
                (
                    c.name.clone(),
                    CoefficientStats {
                        std_dev: c.std_dev,
                        q2_5: c.q2_5,
                        q97_5: c.q97_5,
                    },
                )
            })
            .collect();
        Ok(RiskCoefficients {
            intercept: m(0),
            visibility: m(1),
            ds: m(2),
            aqu: m(3),
            aqd: m(4),
            dqu: m(5),
            dvu: m(6),
            dqd: m(7),
            dvd: m(8),
            dv: m(9),
            stats: Some(stats),
        })
    }
}

/// Fits the full feature model on crash observations.
pub fn fit_mcmc(
    data: &[CrashObservation],
    priors: &PriorSpec,
    config: &McmcConfig,
) -> Result<PosteriorSummary, RiskError> {
    let (ys, rows) = design_from_observations(data);
    let names: Vec<String> = COEFFICIENT_NAMES.iter().map(|s| s.to_string()).collect();
    fit_mcmc_design(&ys, &rows, &names, priors, config)
}

/// Fits a logistic model on an explicit design matrix with a component-wise
/// random-walk Metropolis chain. Deterministic for a fixed seed.
pub fn fit_mcmc_design(
    ys: &[f64],
    rows: &[Vec<f64>],
    names: &[String],
    priors: &PriorSpec,
    config: &McmcConfig,
) -> Result<PosteriorSummary, RiskError> {
    if ys.is_empty() {
        return Err(RiskError::EmptyData);
    }
    if config.iterations <= config.burn_in {
        return Err(RiskError::InvalidConfig(format!(
            "iterations ({}) must exceed burn_in ({})",
            config.iterations, config.burn_in
        )));
    }
    if !(config.proposal_scale > 0.0) {
        return Err(RiskError::InvalidConfig(format!(
            "proposal_scale must be positive, got {}",
            config.proposal_scale
        )));
    }
    let n_features = rows.first().map_or(0, Vec::len);
    let dim = n_features + 1;
    if names.len() != dim {
        return Err(RiskError::Dimension {
            expected: dim,
            got: names.len(),
        });
    }
    if priors.dim() != dim {
        return Err(RiskError::Dimension {
            expected: dim,
            got: priors.dim(),
        });
    }
    priors.validate()?;
    for row in rows {
        if row.len() != n_features {
            return Err(RiskError::Dimension {
                expected: n_features,
                got: row.len(),
            });
        }
    }
    check_degenerate(ys, rows)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut beta = priors.means.clone();
    let mut eta: Vec<f64> = rows
        .iter()
        .map(|row| beta[0] + dot(row, &beta[1..]))
        .collect();
    let mut log_post = posterior_given_eta(&beta, &eta, ys, priors);

    let mut scales = vec![config.proposal_scale; dim];
    // Burn-in adaptation window; acceptance outside 20-50% doubles or halves
    // the per-coordinate scale.
    const ADAPT_EVERY: usize = 200;
    let mut window_accepts = vec![0usize; dim];
    let mut post_accepts = 0usize;
    let mut post_proposals = 0usize;

    let kept = config.iterations - config.burn_in;
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(kept);
    let mut eta_scratch = vec![0.0; ys.len()];

    for it in 0..config.iterations {
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            let delta = scales[j] * z;
            let mut proposal = beta.clone();
            proposal[j] += delta;
            for (i, e) in eta.iter().enumerate() {
                let x = if j == 0 { 1.0 } else { rows[i][j - 1] };
                eta_scratch[i] = e + delta * x;
            }
            let cand = posterior_given_eta(&proposal, &eta_scratch, ys, priors);
            let accept = {
                let diff = cand - log_post;
                diff >= 0.0 || rng.gen::<f64>().ln() < diff
            };
            if it >= config.burn_in {
                post_proposals += 1;
            }
            if accept {
                beta = proposal;
                std::mem::swap(&mut eta, &mut eta_scratch);
                log_post = cand;
                window_accepts[j] += 1;
                if it >= config.burn_in {
                    post_accepts += 1;
                }
            }
        }
        if it < config.burn_in && (it + 1) % ADAPT_EVERY == 0 {
            for j in 0..dim {
                let rate = window_accepts[j] as f64 / ADAPT_EVERY as f64;
                if rate > 0.5 {
                    scales[j] *= 2.0;
                } else if rate < 0.2 {
                    scales[j] /= 2.0;
                }
                window_accepts[j] = 0;
            }
        }
        if it >= config.burn_in {
            samples.push(beta.clone());
        }
    }

    let acceptance_rate = post_accepts as f64 / post_proposals as f64;
    if acceptance_rate < 0.01 {
        return Err(RiskError::LowAcceptance {
            rate: acceptance_rate,
        });
    }

    let mut coefficients = Vec::with_capacity(dim);
    let mut column = vec![0.0; samples.len()];
    for j in 0..dim {
        for (i, s) in samples.iter().enumerate() {
            column[i] = s[j];
        }
        let mean = column.iter().sum::<f64>() / column.len() as f64;
        let var = column.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
            / (column.len() - 1).max(1) as f64;
        let mut sorted = column.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        coefficients.push(CoefficientSummary {
            name: names[j].clone(),
            mean,
            std_dev: var.sqrt(),
            q2_5: quantile_sorted(&sorted, 0.025),
            q97_5: quantile_sorted(&sorted, 0.975),
        });
    }

    Ok(PosteriorSummary {
        coefficients,
        samples: samples.len(),
        acceptance_rate,
    })
}

fn dot(xs: &[f64], ws: &[f64]) -> f64 {
    xs.iter().zip(ws).map(|(x, w)| x * w).sum()
}

fn posterior_given_eta(beta: &[f64], eta: &[f64], ys: &[f64], priors: &PriorSpec) -> f64 {
    let mut total = 0.0;
    for (y, e) in ys.iter().zip(eta) {
        total += y * e - softplus(*e);
    }
    for j in 0..beta.len() {
        let z = (beta[j] - priors.means[j]) / priors.std_devs[j];
        total -= 0.5 * z * z;
    }
    total
}

fn check_degenerate(ys: &[f64], rows: &[Vec<f64>]) -> Result<(), RiskError> {
    let first = ys[0];
    if ys.iter().any(|&y| y != first) {
        return Ok(());
    }
    let n_features = rows.first().map_or(0, Vec::len);
    for j in 0..n_features {
        let v0 = rows[0][j];
        if rows.iter().any(|r| r[j] != v0) {
            return Err(RiskError::DegenerateData);
        }
    }
    Ok(())
}

/// Linear-interpolation quantile of an ascending-sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn reference_coefficients_match_fitted_means() {
        let c = RiskCoefficients::reference();
        assert_eq!(c.intercept, 0.493);
        assert_eq!(c.visibility, -0.202);
        assert_eq!(c.ds, -1.077);
        assert_eq!(c.aqu, 0.000);
        assert_eq!(c.aqd, 0.002);
        assert_eq!(c.dqu, 0.173);
        assert_eq!(c.dvu, -0.202);
        assert_eq!(c.dqd, -0.009);
        assert_eq!(c.dvd, -0.561);
        assert_eq!(c.dv, 0.013);
    }

    #[test]
    fn coefficients_json_round_trip() {
        let c = RiskCoefficients::reference();
        let json = serde_json::to_string_pretty(&c).unwrap();
        let back: RiskCoefficients = serde_json::from_str(&json).unwrap();
        assert_eq!(c, back);
        // Plain documents without the stats block also load.
        let plain: RiskCoefficients = serde_json::from_str(
            r#"{"intercept":0.493,"visibility":-0.202,"ds":-1.077,"aqu":0.0,
                "aqd":0.002,"dqu":0.173,"dvu":-0.202,"dqd":-0.009,"dvd":-0.561,"dv":0.013}"#,
        )
        .unwrap();
        assert_eq!(plain.intercept, 0.493);
        assert!(plain.stats.is_none());
    }

    #[test]
    fn predictor_on_zero_features_is_intercept() {
        let c = RiskCoefficients::reference();
        let f = RiskFeatures::default();
        assert_eq!(linear_predictor(&f, &c), 0.493);
    }

    #[test]
    fn predictor_visibility_only() {
        let c = RiskCoefficients::reference();
        let f = RiskFeatures {
            visibility: 1.0,
            ..RiskFeatures::default()
        };
        assert!(approx(linear_predictor(&f, &c), 0.291, 1e-12));
    }

    #[test]
    fn predictor_diverge_only() {
        let c = RiskCoefficients::reference();
        let f = RiskFeatures {
            ds: true,
            ..RiskFeatures::default()
        };
        assert!(approx(linear_predictor(&f, &c), -0.584, 1e-12));
    }

    #[test]
    fn logistic_at_zero_is_half() {
        assert_eq!(crash_probability(0.0), 0.5);
    }

    #[test]
    fn logistic_saturates() {
        // Tail mass below 1e-20 at |eta| = 50; checked on the small side
        // where f64 can represent it directly.
        assert!(crash_probability(-50.0) < 1e-20);
        assert!(crash_probability(50.0) > 1.0 - 1e-15);
        assert!(crash_probability(50.0) < 1.0);
        assert!(crash_probability(800.0) < 1.0);
        assert!(crash_probability(-800.0) > 0.0);
    }

    #[test]
    fn logistic_of_intercept() {
        let expected = 0.493f64.exp() / (1.0 + 0.493f64.exp());
        assert!(approx(crash_probability(0.493), expected, 1e-15));
        assert!(approx(expected, 0.6208, 5e-5));
    }

    #[test]
    fn risk_modes_compose() {
        let c = RiskCoefficients::reference();
        let f = RiskFeatures {
            visibility: 0.4,
            aqd: 120.0,
            dqu: 3.0,
            ..RiskFeatures::default()
        };
        let lin = risk(&f, &c, RiskMode::Linear);
        let log = risk(&f, &c, RiskMode::Logistic);
        assert_eq!(lin, linear_predictor(&f, &c));
        assert_eq!(log, crash_probability(lin));
    }

    #[test]
    fn threshold_is_inclusive() {
        assert!(exceeds_threshold(0.25, 0.2));
        assert!(exceeds_threshold(0.2, 0.2));
        assert!(!exceeds_threshold(0.19, 0.2));
        assert!(!exceeds_threshold(10.0, f64::INFINITY));
    }

    #[test]
    fn log_posterior_intercept_only_observation() {
        // One observation, eta = 0: contribution is ln(0.5).
        let data = [CrashObservation {
            crash: true,
            features: RiskFeatures::default(),
        }];
        let zero = RiskCoefficients {
            intercept: 0.0,
            visibility: 0.0,
            ds: 0.0,
            aqu: 0.0,
            aqd: 0.0,
            dqu: 0.0,
            dvu: 0.0,
            dqd: 0.0,
            dvd: 0.0,
            dv: 0.0,
            stats: None,
        };
        let priors = PriorSpec::flat(FEATURE_COUNT + 1);
        let lp = log_posterior(&zero, &data, &priors).unwrap();
        assert!(approx(lp, 0.5f64.ln(), 1e-12));
    }

    #[test]
    fn log_posterior_rejects_empty_data() {
        let priors = PriorSpec::flat(FEATURE_COUNT + 1);
        let err = log_posterior(&RiskCoefficients::reference(), &[], &priors).unwrap_err();
        assert!(matches!(err, RiskError::EmptyData));
    }

    #[test]
    fn flat_priors_cancel_in_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ys: Vec<f64> = (0..10).map(|_| f64::from(rng.gen::<bool>())).collect();
        let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.gen::<f64>() * 2.0 - 1.0]).collect();
        let flat = PriorSpec::flat(2);
        let b1 = [0.3, -0.8];
        let b2 = [-0.5, 1.1];
        let diff_post = log_posterior_design(&b1, &ys, &rows, &flat).unwrap()
            - log_posterior_design(&b2, &ys, &rows, &flat).unwrap();
        let loglik = |beta: &[f64]| -> f64 {
            ys.iter()
                .zip(&rows)
                .map(|(y, r)| {
                    let eta = beta[0] + beta[1] * r[0];
                    y * eta - softplus(eta)
                })
                .sum()
        };
        let diff_lik = loglik(&b1) - loglik(&b2);
        assert!(approx(diff_post, diff_lik, 1e-12));
    }

    #[test]
    fn log_posterior_matches_bruteforce_product() {
        // Brute-force likelihood per observation: p^y (1-p)^(1-y), in logs.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<CrashObservation> = (0..10)
            .map(|_| CrashObservation {
                crash: rng.gen(),
                features: RiskFeatures {
                    visibility: rng.gen::<f64>() * 3.0,
                    ds: rng.gen(),
                    aqu: rng.gen::<f64>() * 100.0,
                    aqd: rng.gen::<f64>() * 100.0,
                    dqu: rng.gen::<f64>() * 10.0,
                    dvu: rng.gen::<f64>() * 5.0,
                    dqd: rng.gen::<f64>() * 10.0,
                    dvd: rng.gen::<f64>() * 5.0,
                    dv: rng.gen::<f64>() * 10.0 - 5.0,
                },
            })
            .collect();
        let coeffs = RiskCoefficients::reference();
        let priors = PriorSpec::flat(FEATURE_COUNT + 1);
        let lp = log_posterior(&coeffs, &data, &priors).unwrap();
        let brute: f64 = data
            .iter()
            .map(|o| {
                let p = crash_probability(linear_predictor(&o.features, &coeffs));
                if o.crash {
                    p.ln()
                } else {
                    (-p).ln_1p()
                }
            })
            .sum();
        assert!(approx(lp, brute, 1e-9));
    }

    #[test]
    fn grid_search_map_sits_at_logistic_mle() {
        // Intercept-only problem: the MLE is logit(mean(y)).
        let ys: Vec<f64> = (0..40).map(|i| f64::from(i % 4 == 0)).collect();
        let rows: Vec<Vec<f64>> = vec![vec![]; 40];
        let flat = PriorSpec::flat(1);
        let step = 1e-3;
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut b = -3.0;
        while b <= 3.0 {
            let lp = log_posterior_design(&[b], &ys, &rows, &flat).unwrap();
            if lp > best.0 {
                best = (lp, b);
            }
            b += step;
        }
        let p = 0.25;
        let mle = (p / (1.0 - p)) as f64;
        let mle = mle.ln();
        assert!(approx(best.1, mle, 2.0 * step));
    }

    #[test]
    fn mcmc_rejects_bad_config() {
        let data = vec![
            CrashObservation {
                crash: true,
                features: RiskFeatures::default(),
            },
            CrashObservation {
                crash: false,
                features: RiskFeatures::default(),
            },
        ];
        let priors = PriorSpec::gaussian(FEATURE_COUNT + 1, 10.0);
        let config = McmcConfig {
            iterations: 100,
            burn_in: 100,
            ..McmcConfig::default()
        };
        let err = fit_mcmc(&data, &priors, &config).unwrap_err();
        assert!(matches!(err, RiskError::InvalidConfig(_)));
    }

    #[test]
    fn mcmc_rejects_separable_degenerate_data() {
        let ys = vec![1.0; 20];
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let names = vec!["intercept".to_string(), "x".to_string()];
        let priors = PriorSpec::gaussian(2, 10.0);
        let err =
            fit_mcmc_design(&ys, &rows, &names, &priors, &McmcConfig::default()).unwrap_err();
        assert!(matches!(err, RiskError::DegenerateData));
    }

    #[test]
    fn mcmc_intercept_only_balanced_data() {
        let ys: Vec<f64> = (0..1000).map(|i| f64::from(i % 2 == 0)).collect();
        let rows: Vec<Vec<f64>> = vec![vec![]; 1000];
        let names = vec!["intercept".to_string()];
        let priors = PriorSpec::gaussian(1, 100.0);
        let config = McmcConfig {
            iterations: 6_000,
            burn_in: 2_000,
            proposal_scale: 0.05,
            seed: 42,
        };
        let summary = fit_mcmc_design(&ys, &rows, &names, &priors, &config).unwrap();
        let c = &summary.coefficients[0];
        assert!(c.mean.abs() < 0.1, "intercept mean {}", c.mean);
        assert!(c.q2_5 <= c.mean && c.mean <= c.q97_5);
        assert!(summary.acceptance_rate > 0.01 && summary.acceptance_rate < 1.0);
    }

    #[test]
    fn mcmc_reproducible_for_fixed_seed() {
        let ys: Vec<f64> = (0..200).map(|i| f64::from(i % 3 == 0)).collect();
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 0.731).sin()]).collect();
        let names = vec!["intercept".to_string(), "x".to_string()];
        let priors = PriorSpec::gaussian(2, 10.0);
        let config = McmcConfig {
            iterations: 3_000,
            burn_in: 1_000,
            proposal_scale: 0.1,
            seed: 9,
        };
        let a = fit_mcmc_design(&ys, &rows, &names, &priors, &config).unwrap();
        let b = fit_mcmc_design(&ys, &rows, &names, &priors, &config).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn logistic_symmetry(eta in -30.0f64..30.0) {
            let p = crash_probability(eta);
            let q = crash_probability(-eta);
            prop_assert!((p + q - 1.0).abs() < 1e-12);
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn predictor_scales_linearly(
            scale in 0.0f64..4.0,
            vis in 0.0f64..5.0,
            aqd in 0.0f64..500.0,
            dqu in 0.0f64..20.0,
            dvd in 0.0f64..15.0,
        ) {
            let c = RiskCoefficients::reference();
            let f = RiskFeatures { visibility: vis, aqd, dqu, dvd, ..RiskFeatures::default() };
            let scaled = RiskFeatures {
                visibility: vis * scale,
                aqd: aqd * scale,
                dqu: dqu * scale,
                dvd: dvd * scale,
                ..RiskFeatures::default()
            };
            let base = linear_predictor(&f, &c) - c.intercept;
            let got = linear_predictor(&scaled, &c) - c.intercept;
            prop_assert!((got - base * scale).abs() < 1e-9 * (1.0 + base.abs() * scale));
        }

        #[test]
        fn logistic_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            if a < b {
                prop_assert!(crash_probability(a) <= crash_probability(b));
            }
        }
    }
}
