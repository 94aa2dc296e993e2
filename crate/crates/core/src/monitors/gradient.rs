use serde::{Deserialize, Serialize};

use super::{median, ProbeReport};
use crate::contrastive::{grad_params, Estimation, HyperParams};
use crate::dataset::Dataset;
use crate::encoder::{Params, Shape};
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientProbeConfig {
    pub n: usize,
    pub k: usize,
    pub depth: usize,
    pub output_dim: usize,
    pub input_dim: usize,
    pub delta_min: f64,
    /// Hidden widths to sweep; at least three powers of two.
    pub widths: Vec<usize>,
    /// Independent initializations averaged per width.
    pub seeds: usize,
    pub estimation: Estimation,
    /// Allowed distance of the fitted `‖∇‖²`-vs-`m` slope from 1.
    pub slope_tolerance: f64,
    pub min_r_squared: f64,
}

impl Default for GradientProbeConfig {
    fn default() -> Self {
        Self {
            n: 8,
            k: 2,
            depth: 3,
            output_dim: 32,
            input_dim: 16,
            delta_min: 0.5,
            widths: vec![256, 1024, 4096],
            seeds: 4,
            estimation: Estimation::default(),
            slope_tolerance: 0.15,
            min_r_squared: 0.95,
        }
    }
}

struct WidthSample {
    grad_w_sq: f64,
    grad_theta_sq: f64,
    r_w: f64,
    r_theta: f64,
}

/// Gradient norms at initialization across widths. For each width and
/// encoder it forms `r = ‖∇‖_F² · nd / (m · Σᵢ‖ℓᵢ‖²)`, which the two-sided
/// gradient bounds keep inside a width-independent band, and fits
/// `log ‖∇‖_F²` against `log m` (expected slope 1).
pub fn gradient_bound_probe(config: &GradientProbeConfig, rng: &RngState) -> Result<ProbeReport> {
    if config.widths.len() < 3 || config.widths.iter().any(|m| !m.is_power_of_two()) {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 widths, each a power of two, got {:?}",
            config.widths
        )));
    }
    if config.seeds == 0 {
        return Err(Error::InvalidArgument("seeds must be ≥ 1".into()));
    }
    let mut report = ProbeReport::new(
        "gradient_bound_probe",
        "squared gradient norms at initialization grow linearly in m: |grad|_F^2 is between m delta/(n^3 d) and L m/(n d) times sum |l_i|^2",
        serde_json::to_value(config)?,
    );
    let data = Dataset::generate_separated(&rng.child("data"), config.n, config.input_dim, config.delta_min, None)?;
    report.measure("delta", data.delta());
    let hp = HyperParams {
        k: config.k,
        eta: 0.0,
        gamma: 0.0,
        iterations: 1,
        epsilon: 0.5,
        estimation: config.estimation,
    };
    let (n, d) = (config.n as f64, config.output_dim as f64);
    let mut widths = Vec::new();
    let mut mean_w = Vec::new();
    let mut mean_theta = Vec::new();
    let mut r_w_all = Vec::new();
    let mut r_theta_all = Vec::new();
    let mut r_w_means = Vec::new();
    let mut r_theta_means = Vec::new();
    for &m in &config.widths {
        let shape = Shape::new(config.depth, m, config.output_dim, config.input_dim)?;
        let mut samples = Vec::with_capacity(config.seeds);
        for s in 0..config.seeds {
            let run = rng.child("width").child_index(m as u64).child_index(s as u64);
            let query = Params::init(&run.child("query"), shape)?;
            let key = Params::init(&run.child("key"), shape)?;
            let g = grad_params(&query, &key, &data, &hp)?;
            let lt = g.loss_vectors.losstilde_sq_sum();
            let lh = g.loss_vectors.losshat_sq_sum();
            if lt == 0.0 || lh == 0.0 {
                return Err(Error::Probe(format!(
                    "loss vectors vanish at m={m}, seed {s}; the data is too symmetric for the gradient ratio"
                )));
            }
            let gw = g.query.frobenius_norm().powi(2);
            let gt = g.key.frobenius_norm().powi(2);
            samples.push(WidthSample {
                grad_w_sq: gw,
                grad_theta_sq: gt,
                r_w: gw * n * d / (m as f64 * lt),
                r_theta: gt * n * d / (m as f64 * lh),
            });
        }
        let avg = |f: fn(&WidthSample) -> f64| samples.iter().map(f).sum::<f64>() / samples.len() as f64;
        widths.push(m as f64);
        mean_w.push(avg(|s| s.grad_w_sq));
        mean_theta.push(avg(|s| s.grad_theta_sq));
        r_w_means.push(avg(|s| s.r_w));
        r_theta_means.push(avg(|s| s.r_theta));
        r_w_all.extend(samples.iter().map(|s| s.r_w));
        r_theta_all.extend(samples.iter().map(|s| s.r_theta));
        report.measure(&format!("m{m}.grad_w_sq"), *mean_w.last().unwrap());
        report.measure(&format!("m{m}.grad_theta_sq"), *mean_theta.last().unwrap());
        report.measure(&format!("m{m}.r_w"), *r_w_means.last().unwrap());
        report.measure(&format!("m{m}.r_theta"), *r_theta_means.last().unwrap());
    }
    let min_of = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max_of = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    report.measure("r_w_min", min_of(&r_w_all));
    report.measure("r_w_max", max_of(&r_w_all));
    report.measure("r_theta_min", min_of(&r_theta_all));
    report.measure("r_theta_max", max_of(&r_theta_all));
    let key_query = median(&r_theta_all) / median(&r_w_all);
    report.measure("r_theta_over_r_w", key_query);

    report.fit("grad_w_sq_vs_m", &widths, &mean_w);
    report.fit("grad_theta_sq_vs_m", &widths, &mean_theta);
    report.fit("r_w_vs_m", &widths, &r_w_means);
    report.fit("r_theta_vs_m", &widths, &r_theta_means);
    let (lo, hi) = (1.0 - config.slope_tolerance, 1.0 + config.slope_tolerance);
    report.check_fit("grad_w_sq_vs_m", Some(lo), Some(hi), config.min_r_squared);
    report.check_fit("grad_theta_sq_vs_m", Some(lo), Some(hi), config.min_r_squared);
    report.check("r_w_min", min_of(&r_w_all), Some(f64::MIN_POSITIVE), None);
    report.check("r_theta_min", min_of(&r_theta_all), Some(f64::MIN_POSITIVE), None);
    report.check("r_theta_over_r_w", key_query, Some(0.25), Some(4.0));
    Ok(report)
}
