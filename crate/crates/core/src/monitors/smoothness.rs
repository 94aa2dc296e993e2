use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ProbeReport, MIN_FIT_R_SQUARED};
use crate::contrastive::{grad_params, total_loss, Gradients, HyperParams};
use crate::dataset::Dataset;
use crate::encoder::Params;
use crate::error::{Error, Result};
use crate::linalg::gaussian_matrix;
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessProbeOptions {
    /// Perturbation scales, ascending.
    pub rhos: Vec<f64>,
    /// Random direction pairs averaged per scale.
    pub directions: usize,
    pub min_exponent: f64,
    pub min_r_squared: f64,
}

impl Default for SmoothnessProbeOptions {
    fn default() -> Self {
        Self {
            rhos: vec![1e-4, 2.5e-4, 1e-3, 2.5e-3, 1e-2],
            directions: 3,
            min_exponent: 1.25,
            min_r_squared: MIN_FIT_R_SQUARED,
        }
    }
}

/// Gaussian direction with unit Frobenius norm across all layers.
pub(crate) fn unit_direction(rng: &RngState, like: &Params) -> Result<Params> {
    let layers = like
        .layers()
        .iter()
        .enumerate()
        .map(|(l, w)| gaussian_matrix(&rng.child_index(l as u64), w.rows(), w.cols(), 1.0))
        .collect::<Result<Vec<_>>>()?;
    let mut p = Params::from_weights(like.shape(), layers)?;
    let norm = p.frobenius_norm();
    p.scale(1.0 / norm);
    Ok(p)
}

/// First-order Taylor residual
/// `L_S(W+ρU, θ+ρV) − L_S(W, θ) − ρ(⟨∇_W L_S, U⟩ + ⟨∇_θ L_S, V⟩)`,
/// with `grads` evaluated at `(W, θ)`.
#[allow(clippy::too_many_arguments)]
pub fn taylor_residual(
    query: &Params,
    key: &Params,
    data: &Dataset,
    hp: &HyperParams,
    grads: &Gradients,
    u: &Params,
    v: &Params,
    rho: f64,
) -> Result<f64> {
    let mut q = query.clone();
    q.add_scaled(rho, u)?;
    let mut k = key.clone();
    k.add_scaled(rho, v)?;
    let moved = total_loss(&q, &k, data, hp.k, &hp.estimation)?;
    if !moved.is_finite() {
        return Err(Error::Evaluation(format!("perturbed loss is {moved} at rho={rho}")));
    }
    let linear = grads.query.dot(u)? + grads.key.dot(v)?;
    Ok(moved - grads.loss - rho * linear)
}

/// Measures how fast the first-order Taylor residual of the loss vanishes
/// under joint perturbations `(ρU, ρV)` with unit-Frobenius random `U, V`.
/// Semi-smoothness bounds it by a `ρ^{4/3}` term plus a `ρ²` term, so the
/// fitted exponent of `|R(ρ)|` should be at least 4/3.
pub fn smoothness_probe(
    query: &Params,
    key: &Params,
    data: &Dataset,
    hp: &HyperParams,
    options: &SmoothnessProbeOptions,
    rng: &RngState,
) -> Result<ProbeReport> {
    if options.rhos.is_empty() || options.rhos.windows(2).any(|w| w[0] >= w[1]) || options.rhos[0] < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "rhos must be non-negative and strictly ascending, got {:?}",
            options.rhos
        )));
    }
    if options.directions == 0 {
        return Err(Error::InvalidArgument("directions must be ≥ 1".into()));
    }
    let shape = query.shape();
    let mut report = ProbeReport::new(
        "smoothness_probe",
        "the loss is semi-smooth: the first-order Taylor error is O(rho^(4/3)) + O(rho^2) for perturbations of size rho",
        json!({
            "n": data.n(), "k": hp.k, "L": shape.depth, "m": shape.width, "d": shape.output_dim,
            "rhos": options.rhos, "directions": options.directions,
            "min_exponent": options.min_exponent, "min_r_squared": options.min_r_squared,
        }),
    );
    let grads = grad_params(query, key, data, hp)?;
    let lv = grads.loss_vectors.norm();
    let mut residuals = vec![0.0; options.rhos.len()];
    for s in 0..options.directions {
        let dir = rng.child("direction").child_index(s as u64);
        let u = unit_direction(&dir.child("query"), query)?;
        let v = unit_direction(&dir.child("key"), key)?;
        for (slot, &rho) in residuals.iter_mut().zip(&options.rhos) {
            *slot += taylor_residual(query, key, data, hp, &grads, &u, &v, rho)?.abs();
        }
    }
    residuals.iter_mut().for_each(|r| *r /= options.directions as f64);

    let (n, k, l, m, d) = (
        data.n() as f64,
        hp.k as f64,
        shape.depth as f64,
        shape.width as f64,
        shape.output_dim as f64,
    );
    let first_scale = (m * m.ln() / (n * d)).sqrt() * lv;
    let second_scale = k * l * l * m * m / (d * d);
    let mut first_coeff: f64 = 0.0;
    let mut second_coeff: f64 = 0.0;
    for (&rho, &r) in options.rhos.iter().zip(&residuals) {
        report.measure(&format!("residual@{rho:e}"), r);
        if rho > 0.0 {
            if first_scale > 0.0 {
                first_coeff = first_coeff.max(r / (rho.powf(4.0 / 3.0) * first_scale));
            }
            second_coeff = second_coeff.max(r / (rho * rho * second_scale));
        }
    }
    report.measure("loss", grads.loss);
    report.measure("loss_vec_norm", lv);
    report.measure("first_order_coefficient", first_coeff);
    report.measure("second_order_coefficient", second_coeff);
    report.note("joint perturbation of both encoders: the residual is reported as a whole, not attributed to individual error terms");

    let (rhos, rs): (Vec<f64>, Vec<f64>) = options
        .rhos
        .iter()
        .zip(&residuals)
        .filter(|(rho, _)| **rho > 0.0)
        .map(|(a, b)| (*a, *b))
        .unzip();
    if rs.iter().all(|&r| r == 0.0) {
        report.mark_degenerate("the loss is exactly linear along the probed directions");
    }
    if let Some(slope) = report.fit("residual_vs_rho", &rhos, &rs) {
        report.measure("exponent", slope);
    }
    report.check_fit("residual_vs_rho", Some(options.min_exponent), None, options.min_r_squared);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::Estimation;
    use crate::encoder::Shape;
    use crate::monitors::Outcome;

    fn setup() -> (Params, Params, Dataset, HyperParams) {
        let root = RngState::new(8);
        let shape = Shape::new(2, 128, 8, 6).unwrap();
        let data = Dataset::generate_separated(&root.child("data"), 5, 6, 0.3, None).unwrap();
        let hp = HyperParams {
            k: 2,
            eta: 0.0,
            gamma: 0.0,
            iterations: 1,
            epsilon: 0.5,
            estimation: Estimation::default(),
        };
        (
            Params::init(&root.child("query"), shape).unwrap(),
            Params::init(&root.child("key"), shape).unwrap(),
            data,
            hp,
        )
    }

    #[test]
    fn zero_scale_has_zero_residual() {
        let (q, k, data, hp) = setup();
        let g = grad_params(&q, &k, &data, &hp).unwrap();
        let u = unit_direction(&RngState::new(1), &q).unwrap();
        let v = unit_direction(&RngState::new(2), &k).unwrap();
        assert_eq!(taylor_residual(&q, &k, &data, &hp, &g, &u, &v, 0.0).unwrap(), 0.0);
        assert!((u.frobenius_norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reparameterization_identity() {
        let (q, k, data, hp) = setup();
        let g = grad_params(&q, &k, &data, &hp).unwrap();
        let u = unit_direction(&RngState::new(1), &q).unwrap();
        let v = unit_direction(&RngState::new(2), &k).unwrap();
        let mut u2 = u.clone();
        u2.scale(2.0);
        let mut v2 = v.clone();
        v2.scale(2.0);
        let a = taylor_residual(&q, &k, &data, &hp, &g, &u2, &v2, 1e-3).unwrap();
        let b = taylor_residual(&q, &k, &data, &hp, &g, &u, &v, 2e-3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn residual_is_superlinear() {
        let (q, k, data, hp) = setup();
        let r = smoothness_probe(&q, &k, &data, &hp, &SmoothnessProbeOptions::default(), &RngState::new(4)).unwrap();
        assert_eq!(r.status, Outcome::Pass, "{}", r.render_table());
    }

    #[test]
    fn rejects_unsorted_rhos() {
        let (q, k, data, hp) = setup();
        let opts = SmoothnessProbeOptions {
            rhos: vec![1e-2, 1e-3],
            ..SmoothnessProbeOptions::default()
        };
        assert!(smoothness_probe(&q, &k, &data, &hp, &opts, &RngState::new(4)).is_err());
    }
}
