use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{median, ProbeReport};
use crate::error::{Error, Result};
use crate::trainer::TrainTrace;

/// Problem sizes entering the per-step descent constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentContext {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub delta: f64,
}

/// Fraction of steps that must show a decrease.
const MIN_DESCENT_FRACTION: f64 = 0.95;
/// Largest allowed `(1/T)Σ‖ℓ⁽ᵗ⁾‖ / ‖ℓ⁽⁰⁾‖`.
const MAX_RUNNING_AVERAGE_RATIO: f64 = 0.5;

/// Per-step descent constant
/// `c_t = (L⁽ᵗ⁾ − L⁽ᵗ⁺¹⁾) · n³d / (min(η,γ) · δ · m · ‖ℓ⁽ᵗ⁾‖²)`.
/// Steps with `‖ℓ⁽ᵗ⁾‖ = 0` are skipped and counted.
pub fn descent_check(trace: &TrainTrace, ctx: &DescentContext) -> Result<ProbeReport> {
    if trace.records.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "descent check needs at least 2 records, got {}",
            trace.records.len()
        )));
    }
    let mut report = ProbeReport::new(
        "descent_check",
        "each gradient step lowers the loss by at least a constant times min(eta,gamma) delta m / (n^3 d) |l_t|^2",
        json!({"n": ctx.n, "d": ctx.d, "m": ctx.m, "delta": ctx.delta, "eta": trace.eta, "gamma": trace.gamma, "steps": trace.records.len() - 1}),
    );
    let step = trace.eta.min(trace.gamma);
    let (n, d, m) = (ctx.n as f64, ctx.d as f64, ctx.m as f64);
    let mut constants = Vec::new();
    let mut skipped = 0usize;
    let mut decreases = 0usize;
    let steps = trace.records.len() - 1;
    for pair in trace.records.windows(2) {
        let drop = pair[0].loss - pair[1].loss;
        if drop > 0.0 {
            decreases += 1;
        }
        let lv2 = pair[0].loss_vec_norm.powi(2);
        if lv2 == 0.0 {
            skipped += 1;
            continue;
        }
        let c = if step == 0.0 {
            0.0
        } else {
            drop * n.powi(3) * d / (step * ctx.delta * m * lv2)
        };
        constants.push(c);
    }
    let positive = constants.iter().filter(|&&c| c > 0.0).count();
    let positive_fraction = if constants.is_empty() { 0.0 } else { positive as f64 / constants.len() as f64 };
    let decrease_fraction = decreases as f64 / steps as f64;
    let med = median(&constants);
    let min = constants.iter().copied().fold(f64::INFINITY, f64::min);
    let max = constants.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = constants.iter().sum::<f64>() / constants.len().max(1) as f64;
    let sd = (constants.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / constants.len().max(1) as f64).sqrt();

    let initial = trace.records[0].loss_vec_norm;
    let running = trace.running_average_loss_vec();
    let ratio = if initial > 0.0 { running / initial } else { 0.0 };

    report.measure("steps", steps as f64);
    report.measure("skipped_steps", skipped as f64);
    report.measure("c_min", if constants.is_empty() { 0.0 } else { min });
    report.measure("c_max", if constants.is_empty() { 0.0 } else { max });
    report.measure("c_median", med);
    report.measure("c_mean", mean);
    report.measure("c_dispersion", if mean != 0.0 { sd / mean.abs() } else { 0.0 });
    report.measure("c_positive_fraction", positive_fraction);
    report.measure("loss_decrease_fraction", decrease_fraction);
    report.measure("running_average_loss_vec", running);
    report.measure("initial_loss_vec", initial);
    report.measure("running_average_ratio", ratio);

    if step == 0.0 {
        report.mark_degenerate("zero step size, the run is frozen");
    } else if constants.is_empty() {
        report.mark_degenerate("every step has a zero loss vector");
    }
    report.check("c_positive_fraction", positive_fraction, Some(MIN_DESCENT_FRACTION), None);
    report.check("loss_decrease_fraction", decrease_fraction, Some(MIN_DESCENT_FRACTION), None);
    report.check("running_average_ratio", ratio, None, Some(MAX_RUNNING_AVERAGE_RATIO));
    Ok(report)
}

/// Largest distance from initialization over the run, relative to the ball
/// radii `omega` (query) and `tau` (key), and the telescoped triangle bound
/// `‖W⁽ᵗ⁾ − W⁽⁰⁾‖_F ≤ Σ_{s<t} η‖∇_{W,s}‖_F` checked at every `t`.
pub fn trajectory_check(trace: &TrainTrace, omega: f64, tau: f64) -> Result<ProbeReport> {
    if !(omega > 0.0 && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ball radii must be positive, got omega={omega}, tau={tau}"
        )));
    }
    let mut report = ProbeReport::new(
        "trajectory_check",
        "iterates stay inside the balls of radius omega (query) and tau (key) around initialization",
        json!({"omega": omega, "tau": tau, "eta": trace.eta, "gamma": trace.gamma}),
    );
    let mut max_w: f64 = 0.0;
    let mut max_theta: f64 = 0.0;
    let mut bound_w = 0.0;
    let mut bound_theta = 0.0;
    let mut worst_w_excess: f64 = 0.0;
    let mut worst_theta_excess: f64 = 0.0;
    for (t, r) in trace.records.iter().enumerate() {
        max_w = max_w.max(r.traj_w_fro);
        max_theta = max_theta.max(r.traj_theta_fro);
        // relative amount by which the radius exceeds its triangle bound
        let excess = |radius: f64, bound: f64| {
            if radius <= bound {
                0.0
            } else {
                (radius - bound) / bound.max(radius)
            }
        };
        worst_w_excess = worst_w_excess.max(excess(r.traj_w_fro, bound_w));
        worst_theta_excess = worst_theta_excess.max(excess(r.traj_theta_fro, bound_theta));
        if t + 1 < trace.records.len() {
            bound_w += trace.eta * r.grad_w_fro;
            bound_theta += trace.gamma * r.grad_theta_fro;
        }
    }
    report.measure("max_traj_w", max_w);
    report.measure("max_traj_theta", max_theta);
    report.measure("triangle_bound_w", bound_w);
    report.measure("triangle_bound_theta", bound_theta);
    report.measure("ratio_w", max_w / omega);
    report.measure("ratio_theta", max_theta / tau);
    report.check("triangle_excess_w", worst_w_excess, None, Some(1e-12));
    report.check("triangle_excess_theta", worst_theta_excess, None, Some(1e-12));
    report.check("ratio_w", max_w / omega, None, Some(1.0));
    report.check("ratio_theta", max_theta / tau, None, Some(1.0));
    Ok(report)
}
