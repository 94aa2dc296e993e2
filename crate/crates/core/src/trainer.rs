//! Simultaneous gradient descent on both encoders, fully instrumented.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contrastive::{grad_params, Estimation, Gradients, HyperParams};
use crate::dataset::Dataset;
use crate::encoder::Params;
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

/// Leading constants for the step-size, iteration and radius formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub step: f64,
    pub iterations: f64,
    pub ball: f64,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        Self {
            step: 1.0,
            iterations: 1.0,
            ball: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySchedule {
    pub eta: f64,
    pub gamma: f64,
    pub iterations: u128,
    pub omega: f64,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProblemSize {
    pub n: usize,
    pub k: usize,
    pub depth: usize,
    pub width: usize,
    pub output_dim: usize,
    pub delta: f64,
    pub epsilon: f64,
}

/// `η = γ = c_step · dε²δ²/(n⁷L²km)`, `T = ⌈c_T · n¹⁰L²k/(δ³ε⁴)⌉`,
/// `ω = τ = c_ball · n^{3.5}√d/(δε√m)`.
pub fn theoretical_hyperparams(size: &ProblemSize, constants: &TheoryConstants) -> Result<TheorySchedule> {
    let ProblemSize {
        n,
        k,
        depth,
        width,
        output_dim,
        delta,
        epsilon,
    } = *size;
    if n == 0 || k == 0 || depth == 0 || width == 0 || output_dim == 0 {
        return Err(Error::InvalidArgument("all counts must be positive".into()));
    }
    if !(delta > 0.0) || !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need delta > 0 and epsilon in (0, 1), got delta={delta}, epsilon={epsilon}"
        )));
    }
    if !(constants.step > 0.0 && constants.iterations > 0.0 && constants.ball > 0.0) {
        return Err(Error::InvalidArgument("constants must be positive".into()));
    }
    let (n, k, l, m, d) = (n as f64, k as f64, depth as f64, width as f64, output_dim as f64);
    let eta = constants.step * d * epsilon.powi(2) * delta.powi(2) / (n.powi(7) * l.powi(2) * k * m);
    let t = (constants.iterations * n.powi(10) * l.powi(2) * k / (delta.powi(3) * epsilon.powi(4))).ceil();
    let omega = constants.ball * n.powf(3.5) * d.sqrt() / (delta * epsilon * m.sqrt());
    Ok(TheorySchedule {
        eta,
        gamma: eta,
        iterations: if t >= u128::MAX as f64 { u128::MAX } else { t as u128 },
        omega,
        tau: omega,
    })
}

/// One row of a [`TrainTrace`]: the state at iteration `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub loss: f64,
    pub losstilde_norm: f64,
    pub losshat_norm: f64,
    pub loss_vec_norm: f64,
    pub grad_w_fro: f64,
    pub grad_theta_fro: f64,
    pub traj_w_fro: f64,
    pub traj_theta_fro: f64,
    /// Per-layer `‖W_l⁽ᵗ⁾ − W_l⁽⁰⁾‖₂`, recorded every `spectral_every` steps.
    pub traj_w_spectral: Option<Vec<f64>>,
    pub traj_theta_spectral: Option<Vec<f64>>,
    pub step_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub eta: f64,
    pub gamma: f64,
    /// `"exact"` or `"monte-carlo"`.
    pub estimation: String,
    pub records: Vec<StepRecord>,
    pub stopped_early: bool,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(1/T) Σ_{t<T} ‖ℓ⁽ᵗ⁾‖₂` over the recorded steps that were followed by an update.
    pub fn running_average_loss_vec(&self) -> f64 {
        let steps = self.records.len().saturating_sub(1).max(1);
        self.records.iter().take(steps).map(|r| r.loss_vec_norm).sum::<f64>() / steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Stop once the running average of `‖ℓ⁽ˢ⁾‖` drops to `epsilon`.
    pub early_stop: bool,
    /// Record per-layer spectral trajectory distances every this many steps; 0 disables.
    pub spectral_every: usize,
    /// Fill `step_ms` with wall-clock time; left at 0 otherwise so traces are reproducible.
    pub record_wall_clock: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            early_stop: false,
            spectral_every: 0,
            record_wall_clock: false,
        }
    }
}

#[derive(Debug)]
pub struct StepOutcome {
    pub query: Params,
    pub key: Params,
    pub record: StepRecord,
}

fn layer_spectral_distances(current: &Params, origin: &Params) -> Result<Vec<f64>> {
    current
        .layers()
        .iter()
        .zip(origin.layers())
        .map(|(a, b)| {
            let mut diff = a.clone();
            diff.add_scaled(-1.0, b)?;
            if diff.max_abs() == 0.0 {
                return Ok(0.0);
            }
            match spectral_norm(&diff, 1e-6) {
                Ok(s) => Ok(s),
                Err(Error::NoConvergence { estimate, .. }) => Ok(estimate),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn estimation_for_step(hp: &HyperParams, t: usize) -> HyperParams {
    let mut step_hp = *hp;
    if let Estimation::MonteCarlo { samples, rng } = hp.estimation {
        step_hp.estimation = Estimation::MonteCarlo {
            samples,
            rng: rng.child_index(t as u64),
        };
    }
    step_hp
}

fn record_for(
    t: usize,
    grads: &Gradients,
    query: &Params,
    key: &Params,
    origin: (&Params, &Params),
    spectral: bool,
) -> Result<StepRecord> {
    let (traj_w_spectral, traj_theta_spectral) = if spectral {
        (
            Some(layer_spectral_distances(query, origin.0)?),
            Some(layer_spectral_distances(key, origin.1)?),
        )
    } else {
        (None, None)
    };
    Ok(StepRecord {
        t,
        loss: grads.loss,
        losstilde_norm: grads.loss_vectors.losstilde_norm(),
        losshat_norm: grads.loss_vectors.losshat_norm(),
        loss_vec_norm: grads.loss_vectors.norm(),
        grad_w_fro: grads.query.frobenius_norm(),
        grad_theta_fro: grads.key.frobenius_norm(),
        traj_w_fro: query.distance_to(origin.0)?,
        traj_theta_fro: key.distance_to(origin.1)?,
        traj_w_spectral,
        traj_theta_spectral,
        step_ms: 0.0,
    })
}

fn check_finite(grads: &Gradients) -> std::result::Result<(), String> {
    if !grads.loss.is_finite() {
        return Err(format!("loss is {}", grads.loss));
    }
    if !grads.query.is_finite() {
        return Err("query gradient has non-finite entries".into());
    }
    if !grads.key.is_finite() {
        return Err("key gradient has non-finite entries".into());
    }
    Ok(())
}

/// One simultaneous update `W ← W − η∇_W L_S(W, θ)`, `θ ← θ − γ∇_θ L_S(W, θ)`,
/// with both gradients taken at the current `(W, θ)`. The record describes
/// the state before the update; radii are measured from `origin`.
pub fn gd_step(
    query: &Params,
    key: &Params,
    data: &Dataset,
    hp: &HyperParams,
    t: usize,
    origin: (&Params, &Params),
    spectral: bool,
) -> Result<StepOutcome> {
    let started = Instant::now();
    let step_hp = estimation_for_step(hp, t);
    let grads = grad_params(query, key, data, &step_hp)?;
    let mut record = record_for(t, &grads, query, key, origin, spectral)?;
    if let Err(detail) = check_finite(&grads) {
        return Err(Error::Divergence {
            t,
            detail,
            trace: Box::new(TrainTrace {
                eta: hp.eta,
                gamma: hp.gamma,
                estimation: estimation_label(&hp.estimation).into(),
                records: vec![record],
                stopped_early: false,
            }),
        });
    }
    let mut next_query = query.clone();
    next_query.add_scaled(-hp.eta, &grads.query)?;
    let mut next_key = key.clone();
    next_key.add_scaled(-hp.gamma, &grads.key)?;
    record.step_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(StepOutcome {
        query: next_query,
        key: next_key,
        record,
    })
}

pub fn estimation_label(e: &Estimation) -> &'static str {
    match e {
        Estimation::Exact { .. } => "exact",
        Estimation::MonteCarlo { .. } => "monte-carlo",
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub trace: TrainTrace,
    pub query: Params,
    pub key: Params,
}

/// Run `T` simultaneous steps from `(query0, key0)`. The trace has one
/// record per visited state, `t = 0 … T` (fewer when stopping early).
pub fn train(query0: &Params, key0: &Params, data: &Dataset, hp: &HyperParams, options: &TrainOptions) -> Result<TrainRun> {
    hp.check(data.n())?;
    let mut trace = TrainTrace {
        eta: hp.eta,
        gamma: hp.gamma,
        estimation: estimation_label(&hp.estimation).into(),
        records: Vec::with_capacity(hp.iterations + 1),
        stopped_early: false,
    };
    let origin = (query0, key0);
    let mut query = query0.clone();
    let mut key = key0.clone();
    let mut running_sum = 0.0;
    let spectral_at = |t: usize| options.spectral_every > 0 && t % options.spectral_every == 0;
    for t in 0..hp.iterations {
        let outcome = match gd_step(&query, &key, data, hp, t, origin, spectral_at(t)) {
            Ok(o) => o,
            Err(Error::Divergence { t, detail, trace: partial }) => {
                trace.records.extend(partial.records);
                return Err(Error::Divergence {
                    t,
                    detail,
                    trace: Box::new(trace),
                });
            }
            Err(e) => return Err(e),
        };
        let mut record = outcome.record;
        if !options.record_wall_clock {
            record.step_ms = 0.0;
        }
        running_sum += record.loss_vec_norm;
        trace.records.push(record);
        query = outcome.query;
        key = outcome.key;
        if options.early_stop && running_sum / (t + 1) as f64 <= hp.epsilon {
            trace.stopped_early = true;
            break;
        }
    }
    // final state, recorded without a further update
    let final_t = trace.records.len();
    let final_hp = estimation_for_step(hp, final_t);
    let grads = grad_params(&query, &key, data, &final_hp)?;
    let record = record_for(final_t, &grads, &query, &key, origin, spectral_at(final_t) || options.spectral_every > 0)?;
    if let Err(detail) = check_finite(&grads) {
        trace.records.push(record);
        return Err(Error::Divergence {
            t: final_t,
            detail,
            trace: Box::new(trace),
        });
    }
    trace.records.push(record);
    Ok(TrainRun { trace, query, key })
}
