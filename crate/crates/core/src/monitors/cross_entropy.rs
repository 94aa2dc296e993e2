use serde_json::json;

use super::{Outcome, ProbeReport};
use crate::error::{Error, Result};
use crate::linalg::{dot, logsumexp};
use crate::rng::RngState;

/// Violations above this are counted.
const VIOLATION_TOLERANCE: f64 = 1e-12;

/// `g(y) = log(1 + Σⱼ exp(yⱼ))`.
pub fn softplus_sum(y: &[f64]) -> f64 {
    let mut v = Vec::with_capacity(y.len() + 1);
    v.push(0.0);
    v.extend_from_slice(y);
    logsumexp(&v).expect("nonempty")
}

/// `∇g(y)ⱼ = exp(yⱼ) / (1 + Σ exp(y))`.
pub fn softplus_sum_grad(y: &[f64]) -> Vec<f64> {
    let g = softplus_sum(y);
    y.iter().map(|&v| (v - g).exp()).collect()
}

/// `g(y+y′) − g(y) − ∇g(y)ᵀy′ − ½‖y′‖²`; non-positive when the quadratic
/// upper bound holds.
fn violation(y: &[f64], step: &[f64]) -> f64 {
    let shifted: Vec<f64> = y.iter().zip(step).map(|(a, b)| a + b).collect();
    softplus_sum(&shifted) - softplus_sum(y) - dot(&softplus_sum_grad(y), step) - 0.5 * dot(step, step)
}

/// Samples `y, y′ ∈ ℝᵏ` with per-trial scales uniform in `[0, 10]` and tests
/// the quadratic upper bound `g(y+y′) ≤ g(y) + ∇g(y)ᵀy′ + ½‖y′‖²` directly.
/// Also evaluates `y′ = 0` and steps along `±∇g(y)` of several lengths.
pub fn ce_smoothness_check(rng: &RngState, trials: usize, k: usize) -> Result<ProbeReport> {
    if trials == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "need trials ≥ 1 and k ≥ 1, got trials={trials}, k={k}"
        )));
    }
    let mut report = ProbeReport::new(
        "ce_smoothness_check",
        "log(1 + sum exp(y)) has a 1-Lipschitz gradient: g(y+s) <= g(y) + grad g(y).s + |s|^2/2",
        json!({"trials": trials, "k": k, "max_scale": 10.0, "tolerance": VIOLATION_TOLERANCE}),
    );
    let mut sampler = rng.sampler();
    let mut max_violation = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut max_zero_step = 0.0f64;
    let mut max_adversarial = f64::NEG_INFINITY;
    for _ in 0..trials {
        let sy = 10.0 * sampler.uniform();
        let ss = 10.0 * sampler.uniform();
        let y: Vec<f64> = (0..k).map(|_| sy * sampler.standard_normal()).collect();
        let s: Vec<f64> = (0..k).map(|_| ss * sampler.standard_normal()).collect();
        let v = violation(&y, &s);
        max_violation = max_violation.max(v);
        if v > VIOLATION_TOLERANCE {
            violations += 1;
        }
        max_zero_step = max_zero_step.max(violation(&y, &vec![0.0; k]).abs());
    }
    // steps along the gradient, where the curvature of g is largest in expectation
    for t in 0..trials.min(1000) {
        let y: Vec<f64> = (0..k).map(|_| 10.0 * sampler.uniform() * sampler.standard_normal()).collect();
        let grad = softplus_sum_grad(&y);
        let length = 10f64.powf(-3.0 + 4.0 * (t % 8) as f64 / 7.0);
        for sign in [1.0, -1.0] {
            let s: Vec<f64> = grad.iter().map(|g| sign * length * g).collect();
            let v = violation(&y, &s);
            max_adversarial = max_adversarial.max(v);
            if v > VIOLATION_TOLERANCE {
                violations += 1;
            }
        }
    }
    report.measure("max_violation", max_violation);
    report.measure("max_gradient_direction_violation", max_adversarial);
    report.measure("zero_step_abs_gap", max_zero_step);
    report.measure("violations", violations as f64);
    report.check("violations", violations as f64, None, Some(0.0));
    report.check("zero_step_abs_gap", max_zero_step, None, Some(0.0));
    debug_assert!(report.status != Outcome::Inconclusive);
    Ok(report)
}
