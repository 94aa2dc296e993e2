//! Numerical probes that turn each quantitative statement about the model
//! into measured ratios, residuals and fitted scaling exponents.
//!
//! Every probe returns a [`ProbeReport`]. Hidden constants are never assumed:
//! thresholds are explicit in the report, and a check that depends on a
//! scaling fit is only decided when the fit's R² is high enough.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

mod cross_entropy;
mod gradient;
mod init;
mod perturbation;
mod smoothness;
mod training;

pub use cross_entropy::{ce_smoothness_check, softplus_sum, softplus_sum_grad};
pub use gradient::{gradient_bound_probe, GradientProbeConfig};
pub use init::{init_probe, InitProbeOptions};
pub use perturbation::{perturbation_probe, PerturbationProbeOptions};
pub use smoothness::{smoothness_probe, taylor_residual, SmoothnessProbeOptions};
pub use training::{descent_check, trajectory_check, DescentContext};

/// R² below which fit-dependent checks report [`Outcome::Inconclusive`].
pub const MIN_FIT_R_SQUARED: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    Inconclusive,
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Points dropped because `x` or `y` was not strictly positive.
    pub dropped: usize,
}

/// Fit `ln y = slope · ln x + intercept`. Non-positive points are dropped
/// and counted; at least two distinct `x` values must remain.
pub fn loglog_fit(name: &str, x: &[f64], y: &[f64]) -> Result<ScalingFit> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("fit {name}: {} x values, {} y values", x.len(), y.len())));
    }
    let kept: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let dropped = x.len() - kept.len();
    let n = kept.len() as f64;
    if kept.len() < 2 {
        return Err(Error::Probe(format!(
            "fit {name}: only {} positive points, need 2",
            kept.len()
        )));
    }
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / n;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = kept.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Probe(format!("fit {name}: all x values coincide")));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = kept.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(ScalingFit {
        name: name.to_string(),
        x: x.to_vec(),
        y: y.to_vec(),
        slope,
        intercept,
        r_squared,
        dropped,
    })
}

/// A measured value against an inclusive band. When `fit` names a scaling
/// fit, the check is only decided if that fit reaches `min_r_squared`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub fit: Option<String>,
    pub fit_r_squared: Option<f64>,
    pub min_r_squared: Option<f64>,
    pub outcome: Outcome,
}

impl Check {
    fn decide(&mut self) {
        let in_band =
            self.value.is_finite() && self.lower.is_none_or(|lo| self.value >= lo) && self.upper.is_none_or(|hi| self.value <= hi);
        let fit_ok = match (self.fit_r_squared, self.min_r_squared) {
            (Some(r2), Some(min)) => r2 >= min,
            (None, Some(_)) => false,
            _ => true,
        };
        self.outcome = if !fit_ok {
            Outcome::Inconclusive
        } else if in_band {
            Outcome::Pass
        } else {
            Outcome::Fail
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    /// What the probe measures, in words.
    pub statement: String,
    pub config: Value,
    pub measured: BTreeMap<String, f64>,
    pub fits: Vec<ScalingFit>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    /// Set when the inputs make the measured ratios meaningless (zero
    /// weights, frozen runs, vanishing loss vectors).
    pub degenerate: bool,
    pub status: Outcome,
}

impl ProbeReport {
    pub fn new(probe: &str, statement: &str, config: Value) -> Self {
        Self {
            probe: probe.to_string(),
            statement: statement.to_string(),
            config,
            measured: BTreeMap::new(),
            fits: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
            degenerate: false,
            status: Outcome::Pass,
        }
    }

    /// Record a named scalar. Non-finite values are kept out of the map
    /// (JSON cannot hold them) and noted instead.
    pub fn measure(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.measured.insert(name.to_string(), value);
        } else {
            self.notes.push(format!("{name} is not finite ({value})"));
        }
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn check(&mut self, name: &str, value: f64, lower: Option<f64>, upper: Option<f64>) {
        let mut c = Check {
            name: name.to_string(),
            value: if value.is_finite() { value } else { 0.0 },
            lower,
            upper,
            fit: None,
            fit_r_squared: None,
            min_r_squared: None,
            outcome: Outcome::Fail,
        };
        c.decide();
        if !value.is_finite() {
            c.outcome = Outcome::Fail;
            self.notes.push(format!("check {name} received a non-finite value"));
        }
        self.checks.push(c);
        self.refresh_status();
    }

    /// A check on a fitted slope, gated on the fit's R².
    pub fn check_fit(&mut self, fit_name: &str, lower: Option<f64>, upper: Option<f64>, min_r_squared: f64) {
        let fit = self.fits.iter().find(|f| f.name == fit_name);
        let mut c = Check {
            name: format!("{fit_name}.slope"),
            value: fit.map_or(0.0, |f| f.slope),
            lower,
            upper,
            fit: Some(fit_name.to_string()),
            fit_r_squared: fit.map(|f| f.r_squared),
            min_r_squared: Some(min_r_squared),
            outcome: Outcome::Fail,
        };
        c.decide();
        self.checks.push(c);
        self.refresh_status();
    }

    /// Add a fit, or note why it could not be computed. Returns the slope.
    pub fn fit(&mut self, name: &str, x: &[f64], y: &[f64]) -> Option<f64> {
        match loglog_fit(name, x, y) {
            Ok(f) => {
                if f.dropped > 0 {
                    self.notes
                        .push(format!("fit {name}: dropped {} non-positive points", f.dropped));
                }
                let slope = f.slope;
                self.fits.push(f);
                Some(slope)
            }
            Err(e) => {
                self.notes.push(e.to_string());
                None
            }
        }
    }

    pub fn mark_degenerate(&mut self, why: impl Into<String>) {
        self.degenerate = true;
        self.notes.push(format!("degenerate: {}", why.into()));
        self.refresh_status();
    }

    /// Fail if any check fails; otherwise inconclusive if any check is, or
    /// if the inputs are degenerate; otherwise pass.
    pub fn refresh_status(&mut self) {
        self.status = if self.checks.iter().any(|c| c.outcome == Outcome::Fail) && !self.degenerate {
            Outcome::Fail
        } else if self.degenerate || self.checks.iter().any(|c| c.outcome == Outcome::Inconclusive) {
            Outcome::Inconclusive
        } else {
            Outcome::Pass
        };
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width text table of the checks, for terminals.
    pub fn render_table(&self) -> String {
        let mut out = format!("{} [{:?}]\n", self.probe, self.status);
        for c in &self.checks {
            let band = match (c.lower, c.upper) {
                (Some(lo), Some(hi)) => format!("[{}, {}]", bound(lo), bound(hi)),
                (Some(lo), None) => format!(">= {}", bound(lo)),
                (None, Some(hi)) => format!("<= {}", bound(hi)),
                (None, None) => "-".to_string(),
            };
            let r2 = c.fit_r_squared.map_or(String::new(), |r| format!("  R2={r:.4}"));
            out.push_str(&format!(
                "  {:<40} {:>14.6e}  {:<24} {:?}{}\n",
                c.name, c.value, band, c.outcome, r2
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("  note: {n}\n"));
        }
        out
    }
}

fn bound(x: f64) -> String {
    if x == 0.0 || (1e-3..1e4).contains(&x.abs()) {
        format!("{x:.4}")
    } else {
        format!("{x:.1e}")
    }
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn exact_power_law_fit() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        let f = loglog_fit("p", &x, &y).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_drops_nonpositive_points() {
        let f = loglog_fit("p", &[1.0, 2.0, 3.0], &[0.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.dropped, 1);
        assert!(loglog_fit("p", &[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn low_r_squared_is_inconclusive() {
        let mut r = ProbeReport::new("t", "s", json!({}));
        r.fit("noisy", &[1.0, 2.0, 3.0, 4.0], &[1.0, 5.0, 0.5, 3.0]);
        r.check_fit("noisy", Some(0.9), Some(1.1), MIN_FIT_R_SQUARED);
        assert_eq!(r.checks[0].outcome, Outcome::Inconclusive);
        assert_eq!(r.status, Outcome::Inconclusive);
        r.check("bad", 2.0, None, Some(1.0));
        assert_eq!(r.status, Outcome::Fail);
    }

    #[test]
    fn missing_fit_is_inconclusive() {
        let mut r = ProbeReport::new("t", "s", json!({}));
        r.check_fit("absent", Some(0.0), None, 0.9);
        assert_eq!(r.status, Outcome::Inconclusive);
    }

    #[test]
    fn outcome_derivable_from_stored_fields() {
        let mut r = ProbeReport::new("t", "s", json!({"a": 1}));
        r.check("in", 0.5, Some(0.0), Some(1.0));
        r.check("edge", 1.0, None, Some(1.0));
        r.measure("nan", f64::NAN);
        assert_eq!(r.status, Outcome::Pass);
        assert!(r.measured.is_empty());
        let text = r.to_json().unwrap();
        let back: ProbeReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        for c in &back.checks {
            let mut again = c.clone();
            again.decide();
            assert_eq!(again.outcome, c.outcome);
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }
}
