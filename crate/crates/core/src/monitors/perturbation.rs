use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ProbeReport, MIN_FIT_R_SQUARED};
use crate::dataset::Dataset;
use crate::encoder::{ForwardTrace, Params};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, gemm, lanczos_top_singular, norm, sub, Matrix};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationProbeOptions {
    /// Per-layer spectral norms of the perturbation, ascending.
    pub omegas: Vec<f64>,
    pub flip_exponent: f64,
    pub flip_tolerance: f64,
    pub drift_exponent: f64,
    pub drift_tolerance: f64,
    /// Allowed `max/min` of output drift per unit `ω` across the sweep.
    pub drift_ratio_band: f64,
    pub min_r_squared: f64,
}

impl Default for PerturbationProbeOptions {
    fn default() -> Self {
        Self {
            omegas: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
            flip_exponent: 2.0 / 3.0,
            flip_tolerance: 0.2,
            drift_exponent: 1.0,
            drift_tolerance: 0.1,
            drift_ratio_band: 2.0,
            min_r_squared: MIN_FIT_R_SQUARED,
        }
    }
}

/// Gaussian matrix rescaled to unit spectral norm.
fn unit_spectral(rng: &RngState, rows: usize, cols: usize) -> Result<Matrix> {
    let mut g = gaussian_matrix(rng, rows, cols, 1.0)?;
    let sigma = lanczos_top_singular(
        cols,
        1,
        |x| {
            let mut y = Matrix::zeros(rows, 1);
            gemm(1.0, &g, false, x, false, 0.0, &mut y);
            y
        },
        |y| {
            let mut x = Matrix::zeros(cols, 1);
            gemm(1.0, &g, true, y, false, 0.0, &mut x);
            x
        },
        1e-10,
        400,
    )?[0]
        .value;
    g.scale(1.0 / sigma);
    Ok(g)
}

struct Drift {
    flip_fraction: f64,
    max_layer_flip_fraction: f64,
    hidden_drift: f64,
    output_drift: f64,
}

fn measure_drift(base: &[ForwardTrace], moved: &[ForwardTrace], width: usize) -> Drift {
    let mut flips = 0usize;
    let mut slots = 0usize;
    let mut max_layer: f64 = 0.0;
    let mut hidden: f64 = 0.0;
    let mut output = 0.0;
    for (a, b) in base.iter().zip(moved) {
        for (l, (ma, mb)) in a.masks.iter().zip(&b.masks).enumerate() {
            let f = ma.flips(mb);
            flips += f;
            slots += width;
            max_layer = max_layer.max(f as f64 / width as f64);
            hidden = hidden.max(norm(&sub(&a.hidden[l], &b.hidden[l])));
        }
        output += norm(&sub(&a.output, &b.output));
    }
    Drift {
        flip_fraction: flips as f64 / slots as f64,
        max_layer_flip_fraction: max_layer,
        hidden_drift: hidden,
        output_drift: output / base.len() as f64,
    }
}

/// Random perturbations `W′` whose every layer has spectral norm `ω`:
/// counts activation-pattern flips against the unperturbed network and
/// measures hidden-state and output drift, then fits each against `ω`.
pub fn perturbation_probe(
    params: &Params,
    data: &Dataset,
    options: &PerturbationProbeOptions,
    rng: &RngState,
) -> Result<ProbeReport> {
    if options.omegas.is_empty() || options.omegas.windows(2).any(|w| w[0] >= w[1]) || options.omegas[0] < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "omegas must be non-negative and strictly ascending, got {:?}",
            options.omegas
        )));
    }
    let shape = params.shape();
    let mut report = ProbeReport::new(
        "perturbation_probe",
        "under perturbations of spectral norm omega the fraction of flipped ReLU signs is O(omega^(2/3) L) and the output moves by O(L sqrt(m/d) omega)",
        json!({
            "n": data.n(), "L": shape.depth, "m": shape.width, "d": shape.output_dim, "b": shape.input_dim,
            "options": options,
        }),
    );
    let direction = {
        let layers = params
            .layers()
            .iter()
            .enumerate()
            .map(|(l, w)| unit_spectral(&rng.child_index(l as u64), w.rows(), w.cols()))
            .collect::<Result<Vec<_>>>()?;
        Params::from_weights(shape, layers)?
    };
    let trace_all = |p: &Params| data.points().par_iter().map(|x| p.forward_trace(x)).collect::<Result<Vec<_>>>();
    let base = trace_all(params)?;
    let mut flips = Vec::new();
    let mut outputs = Vec::new();
    let mut hiddens = Vec::new();
    let mut per_unit = Vec::new();
    for &omega in &options.omegas {
        let mut moved_params = params.clone();
        moved_params.add_scaled(omega, &direction)?;
        let moved = trace_all(&moved_params)?;
        let drift = measure_drift(&base, &moved, shape.width);
        report.measure(&format!("flip_fraction@{omega:e}"), drift.flip_fraction);
        report.measure(&format!("max_layer_flip_fraction@{omega:e}"), drift.max_layer_flip_fraction);
        report.measure(&format!("hidden_drift@{omega:e}"), drift.hidden_drift);
        report.measure(&format!("output_drift@{omega:e}"), drift.output_drift);
        flips.push(drift.flip_fraction);
        outputs.push(drift.output_drift);
        hiddens.push(drift.hidden_drift);
        if omega > 0.0 {
            per_unit.push(drift.output_drift / omega);
        }
    }
    let (l, m, d) = (shape.depth as f64, shape.width as f64, shape.output_dim as f64);
    let worst_unit = per_unit.iter().copied().fold(0.0, f64::max);
    let best_unit = per_unit.iter().copied().fold(f64::INFINITY, f64::min);
    report.measure("output_drift_coefficient", worst_unit / (l * (m / d).sqrt()));
    let band = if best_unit > 0.0 { worst_unit / best_unit } else { f64::INFINITY };
    report.measure("output_drift_per_omega_band", band);

    if let Some(s) = report.fit("flip_fraction_vs_omega", &options.omegas, &flips) {
        report.measure("flip_exponent", s);
    }
    if let Some(s) = report.fit("output_drift_vs_omega", &options.omegas, &outputs) {
        report.measure("output_drift_exponent", s);
    }
    if let Some(s) = report.fit("hidden_drift_vs_omega", &options.omegas, &hiddens) {
        report.measure("hidden_drift_exponent", s);
    }
    report.check_fit(
        "flip_fraction_vs_omega",
        Some(options.flip_exponent - options.flip_tolerance),
        Some(options.flip_exponent + options.flip_tolerance),
        options.min_r_squared,
    );
    report.check_fit(
        "output_drift_vs_omega",
        Some(options.drift_exponent - options.drift_tolerance),
        Some(options.drift_exponent + options.drift_tolerance),
        options.min_r_squared,
    );
    if !per_unit.is_empty() {
        report.check("output_drift_per_omega_band", band, None, Some(options.drift_ratio_band));
    }
    Ok(report)
}
