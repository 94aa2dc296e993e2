//! Oracle-equivalence suites run by `verify`: closed forms against finite
//! differences and brute-force enumeration, Monte-Carlo coverage and the
//! softplus smoothness bound. Each suite returns a [`ProbeReport`].

use rayon::prelude::*;
use serde_json::json;

use contrast_lab::contrastive::{binomial, relative_error};
use contrast_lab::linalg::logsumexp;
use contrast_lab::oracle::{compare_gradients, enumerate_subsets, fd_gradient, kink_mask};
use contrast_lab::{
    ce_smoothness_check, grad_params, losshat_all, losshat_pair, losstilde, total_loss, total_loss_exact, total_loss_mc,
    Dataset, EncodedBatch, Estimation, HyperParams, Outcome, Params, ProbeReport, Result, RngState, Shape,
    DEFAULT_ENUMERATION_CAP,
};

/// Problem size of the fixed verification instance.
pub const VERIFY_N: usize = 6;
pub const VERIFY_K: usize = 2;
pub const VERIFY_DEPTH: usize = 3;
pub const VERIFY_WIDTH: usize = 64;
pub const VERIFY_OUTPUT_DIM: usize = 8;
pub const VERIFY_INPUT_DIM: usize = 8;
pub const VERIFY_DELTA_MIN: f64 = 0.5;

/// Finite-difference step on the weights.
pub const WEIGHT_FD_STEP: f64 = 1e-5;
/// Coordinates whose gradient is below this fraction of the largest entry
/// of the same encoder are compared on that absolute scale.
pub const GRADIENT_FLOOR_FRACTION: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const MAX_KINK_FRACTION: f64 = 0.05;

/// Finite-difference step on the encoder outputs.
pub const OUTPUT_FD_STEP: f64 = 1e-5;
pub const LOSS_VECTOR_TOLERANCE: f64 = 1e-7;
pub const LOSSHAT_SUM_TOLERANCE: f64 = 1e-10;

pub const ENUMERATION_TOLERANCE: f64 = 1e-14;
pub const ENUMERATION_MAX_N: usize = 10;
pub const ENUMERATION_MAX_K: usize = 4;

pub const MC_N: usize = 10;
pub const MC_K: usize = 3;
pub const MC_SAMPLES: usize = 10_000;
pub const MC_SEEDS: usize = 1000;
pub const MC_MIN_COVERAGE: f64 = 0.99;

pub const CE_TRIALS: usize = 100_000;
pub const CE_MAX_K: usize = 16;

/// Dataset and both encoders of the verification instance for `seed`.
pub fn verify_instance(seed: u64) -> Result<(Dataset, Params, Params)> {
    let root = RngState::new(seed).child("verify");
    let data = Dataset::generate_separated(&root.child("data"), VERIFY_N, VERIFY_INPUT_DIM, VERIFY_DELTA_MIN, None)?;
    let shape = Shape::new(VERIFY_DEPTH, VERIFY_WIDTH, VERIFY_OUTPUT_DIM, VERIFY_INPUT_DIM)?;
    let query = Params::init(&root.child("query"), shape)?;
    let key = Params::init(&root.child("key"), shape)?;
    Ok((data, query, key))
}

fn instance_config(seed: u64) -> serde_json::Value {
    json!({
        "seed": seed, "n": VERIFY_N, "k": VERIFY_K, "L": VERIFY_DEPTH, "m": VERIFY_WIDTH,
        "d": VERIFY_OUTPUT_DIM, "b": VERIFY_INPUT_DIM, "delta_min": VERIFY_DELTA_MIN,
    })
}

/// Closed-form weight gradients against central differences of the exact
/// total loss, skipping coordinates whose probe step crosses a ReLU kink.
pub fn gradient_certification(seed: u64) -> Result<ProbeReport> {
    let (data, query, key) = verify_instance(seed)?;
    let hp = HyperParams {
        k: VERIFY_K,
        eta: 0.0,
        gamma: 0.0,
        iterations: 1,
        epsilon: 0.5,
        estimation: Estimation::default(),
    };
    let analytic = grad_params(&query, &key, &data, &hp)?;
    let loss = |q: &Params, k: &Params| total_loss(q, k, &data, VERIFY_K, &hp.estimation);
    let (fd_q, fd_k) = fd_gradient(loss, &query, &key, WEIGHT_FD_STEP)?;
    let mask = kink_mask(&query, &key, &data, WEIGHT_FD_STEP)?;
    let cmp = compare_gradients(
        (&analytic.query, &analytic.key),
        (&fd_q, &fd_k),
        Some(&mask),
        GRADIENT_FLOOR_FRACTION,
    );
    let mut config = instance_config(seed);
    config["fd_step"] = json!(WEIGHT_FD_STEP);
    config["floor_fraction"] = json!(GRADIENT_FLOOR_FRACTION);
    let mut report = ProbeReport::new(
        "gradient_certification",
        "closed-form gradients of both encoders match central finite differences on kink-free coordinates",
        config,
    );
    report.measure("max_relative_error", cmp.max_relative_error);
    report.measure("compared", cmp.compared as f64);
    report.measure("masked", cmp.masked as f64);
    report.measure("kink_fraction", mask.fraction());
    report.check("max_relative_error", cmp.max_relative_error, None, Some(GRADIENT_TOLERANCE));
    report.check("kink_fraction", mask.fraction(), None, Some(MAX_KINK_FRACTION));
    Ok(report)
}

/// Central differences of `n·L_S` with respect to every coordinate of every
/// query (or key) output.
fn output_fd(batch: &EncodedBatch, keys: bool) -> Result<Vec<Vec<f64>>> {
    let n = batch.n() as f64;
    let base = if keys { batch.keys() } else { batch.queries() };
    let mut grads = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut g = Vec::with_capacity(base[i].len());
        for c in 0..base[i].len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut moved = base.to_vec();
                moved[i][c] += delta;
                let b = if keys {
                    EncodedBatch::from_outputs(batch.queries().to_vec(), moved)?
                } else {
                    EncodedBatch::from_outputs(moved, batch.keys().to_vec())?
                };
                Ok(n * total_loss_exact(&b, VERIFY_K, DEFAULT_ENUMERATION_CAP)?)
            };
            g.push((eval(OUTPUT_FD_STEP)? - eval(-OUTPUT_FD_STEP)?) / (2.0 * OUTPUT_FD_STEP));
        }
        grads.push(g);
    }
    Ok(grads)
}

/// The query-side and key-side loss vectors against finite differences of
/// the total loss in the encoder outputs, and the zero-sum identity of the
/// key-side vectors.
pub fn loss_vector_certification(seed: u64) -> Result<ProbeReport> {
    let (data, query, key) = verify_instance(seed)?;
    let batch = EncodedBatch::encode(&query, &key, &data)?;
    let lt = losstilde(&batch, VERIFY_K, DEFAULT_ENUMERATION_CAP)?;
    let lh = losshat_all(&batch, VERIFY_K, DEFAULT_ENUMERATION_CAP)?;
    let fd_q = output_fd(&batch, false)?;
    let fd_k = output_fd(&batch, true)?;
    let flat = |v: &[Vec<f64>]| v.concat();
    let err_tilde = relative_error(&flat(&lt), &flat(&fd_q));
    let err_hat = relative_error(&flat(&lh), &flat(&fd_k));
    let mut sum = vec![0.0; batch.dim()];
    for v in &lh {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let scale: f64 = lh.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).sum();
    let sum_norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sum_relative = if scale > 0.0 { sum_norm / scale } else { sum_norm };

    let mut config = instance_config(seed);
    config["fd_step"] = json!(OUTPUT_FD_STEP);
    let mut report = ProbeReport::new(
        "loss_vector_certification",
        "query-side and key-side loss vectors equal the gradients of n*L_S in the encoder outputs, and the key-side vectors sum to zero",
        config,
    );
    report.measure("losstilde_relative_error", err_tilde);
    report.measure("losshat_relative_error", err_hat);
    report.measure("losshat_sum_relative", sum_relative);
    report.check("losstilde_relative_error", err_tilde, None, Some(LOSS_VECTOR_TOLERANCE));
    report.check("losshat_relative_error", err_hat, None, Some(LOSS_VECTOR_TOLERANCE));
    report.check("losshat_sum_relative", sum_relative, None, Some(LOSSHAT_SUM_TOLERANCE));
    Ok(report)
}

fn random_batch(rng: &RngState, n: usize, dim: usize) -> Result<EncodedBatch> {
    let mut s = rng.sampler();
    let mut draw = || (0..n).map(|_| (0..dim).map(|_| s.standard_normal()).collect::<Vec<f64>>()).collect::<Vec<_>>();
    let queries = draw();
    let keys = draw();
    EncodedBatch::from_outputs(queries, keys)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logits `qᵢᵀ(kⱼ − kᵢ)` of one anchor against a subset, with the fixed
/// zero logit first.
fn subset_logits(batch: &EncodedBatch, i: usize, subset: &[usize]) -> Vec<f64> {
    let q = &batch.queries()[i];
    let own = dot(q, &batch.keys()[i]);
    let mut logits = vec![0.0];
    logits.extend(subset.iter().map(|&j| dot(q, &batch.keys()[j]) - own));
    logits
}

/// Plain enumeration of the total loss: every anchor, every subset.
fn enumerated_total_loss(batch: &EncodedBatch, k: usize) -> Result<f64> {
    let n = batch.n();
    let mut total = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        let mut count = 0usize;
        for subset in enumerate_subsets(n, k, i)? {
            acc += logsumexp(&subset_logits(batch, i, &subset))?;
            count += 1;
        }
        total += acc / count as f64;
    }
    Ok(total / n as f64)
}

/// Average over subsets containing `j` of `j`'s softmax weight, times `qᵢ`,
/// normalised by the number of all subsets.
fn enumerated_losshat_pair(batch: &EncodedBatch, i: usize, j: usize, k: usize) -> Result<Vec<f64>> {
    let n = batch.n();
    let mut weight = 0.0;
    for subset in enumerate_subsets(n, k, i)?.filter(|s| s.contains(&j)) {
        let logits = subset_logits(batch, i, &subset);
        let lse = logsumexp(&logits)?;
        let pos = subset.iter().position(|&x| x == j).expect("filtered on containment");
        weight += (logits[pos + 1] - lse).exp();
    }
    let c = weight / binomial(n - 1, k) as f64;
    Ok(batch.queries()[i].iter().map(|q| c * q).collect())
}

/// Exact total loss and pairwise key-side terms against brute-force
/// enumeration over every `n ≤ 10`, `k ≤ 4`.
pub fn enumeration_consistency(seed: u64) -> Result<ProbeReport> {
    let root = RngState::new(seed).child("enumeration");
    let mut worst_loss: f64 = 0.0;
    let mut worst_pair: f64 = 0.0;
    let mut cases = 0usize;
    for n in 2..=ENUMERATION_MAX_N {
        for k in 1..=ENUMERATION_MAX_K.min(n - 1) {
            let batch = random_batch(&root.child_index(n as u64).child_index(k as u64), n, 4)?;
            let exact = total_loss_exact(&batch, k, DEFAULT_ENUMERATION_CAP)?;
            let oracle = enumerated_total_loss(&batch, k)?;
            worst_loss = worst_loss.max((exact - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE));
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let a = losshat_pair(&batch, i, j, k, DEFAULT_ENUMERATION_CAP)?;
                    let b = enumerated_losshat_pair(&batch, i, j, k)?;
                    worst_pair = worst_pair.max(relative_error(&a, &b));
                }
            }
            cases += 1;
        }
    }
    let mut report = ProbeReport::new(
        "enumeration_consistency",
        "the exact expectation over negative subsets equals plain subset enumeration",
        json!({"seed": seed, "max_n": ENUMERATION_MAX_N, "max_k": ENUMERATION_MAX_K, "dim": 4}),
    );
    report.measure("cases", cases as f64);
    report.measure("total_loss_max_relative_error", worst_loss);
    report.measure("losshat_pair_max_relative_error", worst_pair);
    report.check("total_loss_max_relative_error", worst_loss, None, Some(ENUMERATION_TOLERANCE));
    report.check("losshat_pair_max_relative_error", worst_pair, None, Some(ENUMERATION_TOLERANCE));
    Ok(report)
}

/// Monte-Carlo estimates of the total loss against the exact value: one
/// run must land within three standard errors and the band must cover the
/// exact value on at least 99% of independent seeds.
pub fn monte_carlo_coverage(seed: u64, seeds: usize) -> Result<ProbeReport> {
    let root = RngState::new(seed).child("monte-carlo");
    let batch = random_batch(&root.child("batch"), MC_N, 8)?;
    let exact = total_loss_exact(&batch, MC_K, DEFAULT_ENUMERATION_CAP)?;
    let draws = root.child("draws");
    let z_scores = (0..seeds as u64)
        .into_par_iter()
        .map(|s| {
            let est = total_loss_mc(&batch, MC_K, &draws.child_index(s), MC_SAMPLES)?;
            Ok((est.estimate - exact).abs() / est.stderr)
        })
        .collect::<Result<Vec<f64>>>()?;
    let covered = z_scores.iter().filter(|&&z| z <= 3.0).count();
    let coverage = covered as f64 / seeds as f64;
    let mut report = ProbeReport::new(
        "monte_carlo_coverage",
        "Monte-Carlo loss estimates are unbiased: the 3-standard-error band covers the exact loss",
        json!({"seed": seed, "n": MC_N, "k": MC_K, "samples": MC_SAMPLES, "seeds": seeds}),
    );
    report.measure("exact_loss", exact);
    report.measure("first_z_score", z_scores[0]);
    report.measure("max_z_score", z_scores.iter().cloned().fold(0.0, f64::max));
    report.measure("coverage", coverage);
    report.check("first_z_score", z_scores[0], None, Some(3.0));
    report.check("coverage", coverage, Some(MC_MIN_COVERAGE), None);
    Ok(report)
}

/// The softplus quadratic upper bound over `k = 1..=16`, with the trial
/// budget split evenly across `k`.
pub fn cross_entropy_smoothness(seed: u64) -> Result<ProbeReport> {
    let root = RngState::new(seed).child("cross-entropy");
    let per_k = CE_TRIALS.div_ceil(CE_MAX_K);
    let mut report = ProbeReport::new(
        "cross_entropy_smoothness",
        "log(1 + sum exp(y)) has a 1-Lipschitz gradient for every k up to 16",
        json!({"seed": seed, "trials": per_k * CE_MAX_K, "max_k": CE_MAX_K}),
    );
    let mut violations = 0.0;
    let mut max_violation = f64::NEG_INFINITY;
    let mut zero_gap: f64 = 0.0;
    for k in 1..=CE_MAX_K {
        let r = ce_smoothness_check(&root.child_index(k as u64), per_k, k)?;
        violations += r.measured.get("violations").copied().unwrap_or(0.0);
        max_violation = max_violation.max(r.measured.get("max_violation").copied().unwrap_or(f64::NEG_INFINITY));
        zero_gap = zero_gap.max(r.measured.get("zero_step_abs_gap").copied().unwrap_or(0.0));
        if r.status != Outcome::Pass {
            report.note(format!("k={k}: {:?}", r.status));
        }
    }
    report.measure("violations", violations);
    report.measure("max_violation", max_violation);
    report.measure("zero_step_abs_gap", zero_gap);
    report.check("violations", violations, None, Some(0.0));
    report.check("zero_step_abs_gap", zero_gap, None, Some(0.0));
    Ok(report)
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<ProbeReport>> {
    Ok(vec![
        gradient_certification(seed)?,
        loss_vector_certification(seed)?,
        enumeration_consistency(seed)?,
        monte_carlo_coverage(seed, MC_SEEDS)?,
        cross_entropy_smoothness(seed)?,
    ])
}
