use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::ProbeReport;
use crate::dataset::Dataset;
use crate::encoder::{ForwardTrace, Params};
use crate::error::{Error, Result};
use crate::linalg::{gemm, lanczos_top_singular, norm, sub, Matrix};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitProbeOptions {
    /// Allowed `|‖h_{i,l}‖ − 1|`.
    pub epsilon: f64,
    /// Allowed `maxᵢ ‖f(xᵢ)‖₂`.
    pub output_bound: f64,
    /// Required `min ‖h_{i,l} − h_{j,l}‖ / δ`.
    pub separation_ratio: f64,
    /// Allowed `‖W_b D_{b−1} ⋯ D_a W_a‖₂ / √L`.
    pub product_bound: f64,
    /// Random output-space probes per sample for the backward bound.
    pub backward_probes: usize,
    /// Skip the masked-product spectral norms (the expensive part).
    pub products: bool,
    pub product_tol: f64,
    pub product_max_steps: usize,
}

impl Default for InitProbeOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            output_bound: 5.0,
            separation_ratio: 0.25,
            product_bound: 4.0,
            backward_probes: 16,
            products: true,
            product_tol: 1e-4,
            product_max_steps: 150,
        }
    }
}

fn mask_rows(m: &mut Matrix, trace: &ForwardTrace, layer: usize) {
    for r in 0..m.rows() {
        if !trace.masks[layer].get(r) {
            m.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// `‖W_b D_{i,b−1} W_{b−1} ⋯ D_{i,a} W_a‖₂` for every `1 ≤ a ≤ b ≤ L−1` and
/// every sample `i`, all in one Lanczos run. Column `c = pair·n + i` of the
/// batch belongs to chain `pairs[pair]` of sample `i`; each application
/// walks the layers once, multiplying every chain that passes through layer
/// `l` with a single wide product.
fn chain_norms(p: &Params, traces: &[ForwardTrace], tol: f64, max_steps: usize) -> Result<Vec<(f64, bool)>> {
    let depth = p.shape().depth;
    let m = p.shape().width;
    let n = traces.len();
    let pairs: Vec<(usize, usize)> = (1..depth).flat_map(|a| (a..depth).map(move |b| (a, b))).collect();
    let batch = pairs.len() * n;
    // columns whose chain passes through layer l, in ascending column order
    let through = |l: usize| -> Vec<usize> {
        pairs
            .iter()
            .enumerate()
            .filter(|(_, &(a, b))| a <= l && l <= b)
            .flat_map(|(k, _)| (0..n).map(move |i| k * n + i))
            .collect()
    };
    let gather = |src: &Matrix, cols: &[usize]| {
        let mut out = Matrix::zeros(m, cols.len());
        for r in 0..m {
            let s = src.row(r);
            let o = out.row_mut(r);
            for (j, &c) in cols.iter().enumerate() {
                o[j] = s[c];
            }
        }
        out
    };
    let scatter = |dst: &mut Matrix, cols: &[usize], src: &Matrix| {
        for r in 0..m {
            let s = src.row(r);
            let d = dst.row_mut(r);
            for (j, &c) in cols.iter().enumerate() {
                d[c] = s[j];
            }
        }
    };
    // D_l applies to chains that continue past layer l (l < b)
    let mask_chains = |y: &mut Matrix, cols: &[usize], l: usize| {
        for r in 0..m {
            let row = y.row_mut(r);
            for (j, &c) in cols.iter().enumerate() {
                if pairs[c / n].1 > l && !traces[c % n].masks[l].get(r) {
                    row[j] = 0.0;
                }
            }
        }
    };
    let forward = |x: &Matrix| {
        // state holds, per column, the running image of its chain
        let mut state = x.clone();
        for l in 1..depth {
            let cols = through(l);
            let input = gather(&state, &cols);
            let mut y = Matrix::zeros(m, cols.len());
            gemm(1.0, p.layer(l), false, &input, false, 0.0, &mut y);
            mask_chains(&mut y, &cols, l);
            scatter(&mut state, &cols, &y);
        }
        state
    };
    let adjoint = |z: &Matrix| {
        let mut state = z.clone();
        for l in (1..depth).rev() {
            let cols = through(l);
            let mut input = gather(&state, &cols);
            mask_chains(&mut input, &cols, l);
            let mut y = Matrix::zeros(m, cols.len());
            gemm(1.0, p.layer(l), true, &input, false, 0.0, &mut y);
            scatter(&mut state, &cols, &y);
        }
        state
    };
    Ok(lanczos_top_singular(m, batch, forward, adjoint, tol, max_steps)?
        .into_iter()
        .map(|e| (e.value, e.converged))
        .collect())
}

struct EncoderStats {
    hidden_dev: f64,
    output_max: f64,
    separation: f64,
    product: Option<(f64, usize)>,
    backward: Option<f64>,
    zero_layers: usize,
}

fn encoder_stats(p: &Params, data: &Dataset, options: &InitProbeOptions, rng: &RngState) -> Result<EncoderStats> {
    let shape = p.shape();
    let depth = shape.depth;
    let traces = data.points().par_iter().map(|x| p.forward_trace(x)).collect::<Result<Vec<_>>>()?;
    let mut hidden_dev: f64 = 0.0;
    let mut zero_layers = 0;
    for t in &traces {
        for h in &t.hidden {
            let nh = norm(h);
            if nh == 0.0 {
                zero_layers += 1;
            }
            hidden_dev = hidden_dev.max((nh - 1.0).abs());
        }
    }
    let output_max = traces.iter().map(|t| norm(&t.output)).fold(0.0, f64::max);
    let mut separation = f64::INFINITY;
    for l in 0..depth {
        for i in 0..traces.len() {
            for j in i + 1..traces.len() {
                let dist = norm(&sub(&traces[i].hidden[l], &traces[j].hidden[l]));
                separation = separation.min(dist / data.delta());
            }
        }
    }

    let mut product = None;
    let mut backward = None;
    if depth >= 2 {
        if options.products {
            let mut worst: f64 = 0.0;
            let mut unconverged = 0;
            for (value, converged) in chain_norms(p, &traces, options.product_tol, options.product_max_steps)? {
                worst = worst.max(value);
                if !converged {
                    unconverged += 1;
                }
            }
            product = Some((worst / (depth as f64).sqrt(), unconverged));
        }
        if options.backward_probes > 0 {
            let (m, d) = (shape.width, shape.output_dim);
            let scale = (m as f64 / d as f64).sqrt();
            let mut worst: f64 = 0.0;
            for (i, t) in traces.iter().enumerate() {
                let mut sampler = rng.child_index(i as u64).sampler();
                let mut probes = Matrix::zeros(d, options.backward_probes);
                for c in 0..options.backward_probes {
                    for (r, x) in sampler.unit_vector(d).into_iter().enumerate() {
                        probes.set(r, c, x);
                    }
                }
                // z = W_Lᵀ u, then z ← W_aᵀ D_a z for a = L−1 … 1
                let mut z = Matrix::zeros(m, options.backward_probes);
                gemm(1.0, p.layer(depth), true, &probes, false, 0.0, &mut z);
                for a in (1..depth).rev() {
                    mask_rows(&mut z, t, a);
                    let mut next = Matrix::zeros(m, options.backward_probes);
                    gemm(1.0, p.layer(a), true, &z, false, 0.0, &mut next);
                    z = next;
                    for c in 0..options.backward_probes {
                        let col: Vec<f64> = (0..m).map(|r| z.get(r, c)).collect();
                        worst = worst.max(norm(&col) / scale);
                    }
                }
            }
            backward = Some(worst);
        }
    }
    Ok(EncoderStats {
        hidden_dev,
        output_max,
        separation: if separation.is_finite() { separation } else { 0.0 },
        product,
        backward,
        zero_layers,
    })
}

/// Statistics of both encoders at initialization: hidden-norm concentration,
/// output size, propagated separation of the inputs, spectral norms of masked
/// weight products and the size of back-propagated output directions.
///
/// `reference`, when given, is the stored initialization; the probe then
/// also records how far the inspected parameters are from it.
pub fn init_probe(
    query: &Params,
    key: &Params,
    data: &Dataset,
    options: &InitProbeOptions,
    reference: Option<(&Params, &Params)>,
    rng: &RngState,
) -> Result<ProbeReport> {
    if query.shape() != key.shape() {
        return Err(Error::Shape("query and key encoders must share a shape".into()));
    }
    let shape = query.shape();
    let mut report = ProbeReport::new(
        "init_probe",
        "at initialization hidden norms are within 1 +- eps, outputs are O(1), hidden states stay delta/2-separated, masked weight products have spectral norm O(sqrt L) and back-propagated directions are O(sqrt(m/d))",
        json!({
            "n": data.n(), "L": shape.depth, "m": shape.width, "d": shape.output_dim, "b": shape.input_dim,
            "delta": data.delta(), "options": options,
        }),
    );
    if let Some((q0, k0)) = reference {
        report.measure("query.distance_from_reference", query.distance_to(q0)?);
        report.measure("key.distance_from_reference", key.distance_to(k0)?);
    }
    if shape.depth < 2 {
        report.note("L < 2: masked products and backward bounds need intermediate layers and were skipped");
    }
    for (name, p) in [("query", query), ("key", key)] {
        let s = encoder_stats(p, data, options, &rng.child(name))?;
        if s.zero_layers > 0 {
            report.mark_degenerate(format!("{name} encoder has {} all-zero hidden states", s.zero_layers));
        }
        report.measure(&format!("{name}.hidden_norm_max_dev"), s.hidden_dev);
        report.measure(&format!("{name}.output_norm_max"), s.output_max);
        report.measure(&format!("{name}.separation_min_ratio"), s.separation);
        report.check(&format!("{name}.hidden_norm_max_dev"), s.hidden_dev, None, Some(options.epsilon));
        report.check(&format!("{name}.output_norm_max"), s.output_max, None, Some(options.output_bound));
        report.check(
            &format!("{name}.separation_min_ratio"),
            s.separation,
            Some(options.separation_ratio),
            None,
        );
        if let Some((ratio, unconverged)) = s.product {
            report.measure(&format!("{name}.product_max_ratio"), ratio);
            if unconverged > 0 {
                report.note(format!(
                    "{name}: {unconverged} product norms hit the step cap; their estimates are lower bounds"
                ));
            }
            report.check(&format!("{name}.product_max_ratio"), ratio, None, Some(options.product_bound));
        }
        if let Some(ratio) = s.backward {
            report.measure(&format!("{name}.backward_max_ratio"), ratio);
        }
    }
    Ok(report)
}
