//! Experiment configuration: JSON in, validated struct out.

use serde::{Deserialize, Serialize};

use contrast_lab::contrastive::binomial;
use contrast_lab::{Estimation, RngState, DEFAULT_ENUMERATION_CAP};

use crate::error::CliError;

/// Step sizes used by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum StepSize {
    /// User-supplied `η` (query) and `γ` (key).
    Practical { eta: f64, gamma: f64 },
    /// Closed-form schedule with adjustable leading constants.
    Theoretical {
        #[serde(default = "one")]
        c_step: f64,
        #[serde(default = "one")]
        c_iterations: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Practical {
            eta: DEFAULT_STEP,
            gamma: DEFAULT_STEP,
        }
    }
}

/// Practical step size, calibrated on the default problem size.
pub const DEFAULT_STEP: f64 = 0.1;
pub const DEFAULT_ITERATIONS: usize = 200;
pub const ALL_PROBES: [&str; 7] = ["init", "gradient", "smoothness", "descent", "trajectory", "perturbation", "ce"];

fn d_n() -> usize {
    8
}
fn d_k() -> usize {
    2
}
fn d_l() -> usize {
    3
}
fn d_m() -> usize {
    512
}
fn d_d() -> usize {
    32
}
fn d_b() -> usize {
    16
}
fn d_delta() -> f64 {
    0.5
}
fn d_epsilon() -> f64 {
    0.5
}
fn d_mc() -> usize {
    1000
}
fn d_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}
fn d_probes() -> Vec<String> {
    ALL_PROBES.iter().map(|s| s.to_string()).collect()
}
fn d_out() -> String {
    "out".to_string()
}
fn d_grid() -> Vec<usize> {
    vec![256, 1024, 4096]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(rename = "L", default = "d_l")]
    pub depth: usize,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_d")]
    pub d: usize,
    #[serde(default = "d_b")]
    pub b: usize,
    #[serde(default = "d_delta")]
    pub delta_min: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub step_size: StepSize,
    /// Iteration count; required with theoretical step sizes.
    #[serde(rename = "T", default)]
    pub iterations: Option<usize>,
    /// Monte-Carlo draws per anchor, used when `C(n−1, k)` exceeds the cap.
    #[serde(default = "d_mc")]
    pub mc_samples: usize,
    #[serde(default = "d_cap")]
    pub enumeration_cap: u64,
    /// Leading constant of the trajectory-ball radius.
    #[serde(default = "one")]
    pub c_ball: f64,
    #[serde(default = "d_probes")]
    pub probes: Vec<String>,
    #[serde(default = "d_grid")]
    pub m_grid: Vec<usize>,
    #[serde(default = "d_out")]
    pub out_dir: String,
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default)]
    pub spectral_every: usize,
    /// Write measured step times into traces (makes them non-reproducible).
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        for (field, value) in [("n", self.n), ("k", self.k), ("L", self.depth), ("m", self.m), ("d", self.d), ("b", self.b)] {
            if value == 0 {
                return Err(invalid(field, format!("{field} must be positive")));
            }
        }
        if self.n < 2 {
            return Err(invalid("n", "n must be ≥ 2"));
        }
        if self.k > self.n - 1 {
            return Err(invalid("k", "k must be ≤ n−1"));
        }
        if self.b < 2 {
            return Err(invalid("b", "b must be ≥ 2"));
        }
        if !(self.delta_min > 0.0 && self.delta_min < 2.0) {
            return Err(invalid("delta_min", "delta_min must be in (0, 2)"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid("epsilon", "epsilon must be in (0, 1)"));
        }
        if self.iterations == Some(0) {
            return Err(invalid("T", "T must be ≥ 1"));
        }
        match self.step_size {
            StepSize::Practical { eta, gamma } => {
                if !(eta >= 0.0 && gamma >= 0.0 && eta.is_finite() && gamma.is_finite()) {
                    return Err(invalid("step_size", "eta and gamma must be finite and ≥ 0"));
                }
            }
            StepSize::Theoretical { c_step, c_iterations } => {
                if !(c_step > 0.0 && c_iterations > 0.0 && c_step.is_finite() && c_iterations.is_finite()) {
                    return Err(invalid("step_size", "constants must be finite and positive"));
                }
            }
        }
        if self.mc_samples < 2 {
            return Err(invalid("mc_samples", "mc_samples must be ≥ 2"));
        }
        if self.enumeration_cap == 0 {
            return Err(invalid("enumeration_cap", "enumeration_cap must be positive"));
        }
        if !(self.c_ball > 0.0 && self.c_ball.is_finite()) {
            return Err(invalid("c_ball", "c_ball must be finite and positive"));
        }
        if let Some(bad) = self.probes.iter().find(|p| !ALL_PROBES.contains(&p.as_str())) {
            return Err(invalid("probes", format!("unknown probe {bad:?}; known: {}", ALL_PROBES.join(","))));
        }
        if self.m_grid.is_empty() || self.m_grid.contains(&0) {
            return Err(invalid("m_grid", "m_grid must list positive widths"));
        }
        Ok(())
    }

    pub fn root_rng(&self) -> RngState {
        RngState::new(self.seed)
    }

    /// Exact enumeration when `C(n−1, k)` fits under the cap, else
    /// Monte-Carlo with `mc_samples` draws per anchor.
    pub fn estimation(&self) -> Estimation {
        if binomial(self.n - 1, self.k) <= self.enumeration_cap as u128 {
            Estimation::Exact {
                cap: self.enumeration_cap,
            }
        } else {
            Estimation::MonteCarlo {
                samples: self.mc_samples,
                rng: self.root_rng().child("monte-carlo"),
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse and validate a JSON configuration document.
pub fn parse_config(source: &str) -> Result<ExperimentConfig, CliError> {
    let config: ExperimentConfig = serde_json::from_str(source).map_err(|e| CliError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_gets_defaults() {
        let c = parse_config(r#"{"n":8,"k":2,"L":3,"m":512,"d":32,"b":16,"seed":1}"#).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.depth, 3);
        assert_eq!(c.step_size, StepSize::default());
        assert_eq!(c.iterations, None);
        assert_eq!(c.probes.len(), ALL_PROBES.len());
        assert_eq!(c.epsilon, 0.5);
    }

    #[test]
    fn k_too_large_is_rejected() {
        let err = parse_config(r#"{"k":9,"n":8}"#).unwrap_err();
        assert!(err.to_string().contains("k must be ≤ n−1"), "{err}");
        let err = parse_config(r#"{"k":8,"n":8}"#).unwrap_err();
        assert!(err.to_string().contains("k must be ≤ n−1"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config(r#"{"n":8,"width":3}"#).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        assert!(parse_config("{not json").is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let err = parse_config(r#"{"T":0}"#).unwrap_err();
        assert!(err.to_string().contains("T must be ≥ 1"));
    }

    #[test]
    fn round_trip_is_identity() {
        let c = parse_config(
            r#"{"n":6,"k":3,"seed":9,"step_size":{"mode":"theoretical","c_step":2.5},"T":17,"probes":["ce"],"epsilon":0.1234567890123}"#,
        )
        .unwrap();
        let again = parse_config(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_json(), c.to_json());
    }

    #[test]
    fn estimation_switches_to_monte_carlo_above_cap() {
        let mut c = ExperimentConfig::default();
        assert!(matches!(c.estimation(), Estimation::Exact { .. }));
        c.enumeration_cap = 3;
        assert!(matches!(c.estimation(), Estimation::MonteCarlo { samples: 1000, .. }));
    }

    #[test]
    fn bad_probe_name() {
        let err = parse_config(r#"{"probes":["init","nope"]}"#).unwrap_err();
        assert!(err.to_string().contains("probes"));
    }
}
