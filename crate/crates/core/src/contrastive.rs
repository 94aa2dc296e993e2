//! Contrastive loss with the exact expectation over negative subsets.
//!
//! For anchor `i` and a negative subset `S ⊂ [n]∖{i}` of size `k` the sample
//! loss is `log(1 + Σ_{j∈S} exp(qᵢᵀ(kⱼ − kᵢ)))`. The total loss averages it
//! over all `C(n−1, k)` subsets and then over anchors.
//!
//! Everything downstream is driven by the expected softmax weight matrix
//! `c[i][j] = E_S[1{j ∈ S} · w_j(S)]` with
//! `w_j(S) = exp(qᵢᵀz_j) / (1 + Σ_{s∈S} exp(qᵢᵀz_s))`:
//!
//! * `ℓ̃ᵢ = Σ_j c[i][j] (kⱼ − kᵢ)`
//! * the pair vector `ℓ̂(xᵢ, xⱼ) = c[i][j] qᵢ`
//! * `ℓ̂ᵢ = Σ_{j≠i} (ℓ̂(xⱼ, xᵢ) − ℓ̂(xᵢ, xⱼ))`
//!
//! `ℓ̃ᵢ` and `ℓ̂ᵢ` are the gradients of `n · L_S` with respect to `qᵢ` and
//! `kᵢ`; the parameter gradients apply the remaining `1/n`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoder::{ForwardTrace, Params};
use crate::error::{Error, Result};
use crate::format::f64_17;
use crate::linalg::{dot, gemm, logsumexp, norm, sub, Matrix};
use crate::rng::RngState;

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// How the expectation over negative subsets is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Estimation {
    /// Enumerate all `C(n−1, k)` subsets; fail above `cap` subsets per anchor.
    Exact { cap: u64 },
    /// Draw `samples` uniform subsets per anchor.
    MonteCarlo { samples: usize, rng: RngState },
}

impl Default for Estimation {
    fn default() -> Self {
        Estimation::Exact {
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Negative-sample count.
    pub k: usize,
    /// Query step size.
    pub eta: f64,
    /// Key step size.
    pub gamma: f64,
    /// Iteration budget `T`.
    pub iterations: usize,
    pub epsilon: f64,
    pub estimation: Estimation,
}

impl HyperParams {
    pub fn check(&self, n: usize) -> Result<()> {
        check_k(n, self.k)?;
        if !(self.eta >= 0.0 && self.gamma >= 0.0 && self.eta.is_finite() && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step sizes must be finite and non-negative, got eta={}, gamma={}",
                self.eta, self.gamma
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("T must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n ≥ 2, got {n}")));
    }
    if k == 0 || k > n - 1 {
        return Err(Error::InvalidArgument(format!("k must be in 1..={}, got {k}", n - 1)));
    }
    Ok(())
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc · (n − i) / (i + 1) stays integral at every step
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Query and key outputs of every training point, with their traces.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    queries: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    query_traces: Vec<ForwardTrace>,
    key_traces: Vec<ForwardTrace>,
}

impl EncodedBatch {
    pub fn encode(query: &Params, key: &Params, data: &Dataset) -> Result<Self> {
        let query_traces = data
            .points()
            .par_iter()
            .map(|x| query.forward_trace(x))
            .collect::<Result<Vec<_>>>()?;
        let key_traces = data
            .points()
            .par_iter()
            .map(|x| key.forward_trace(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries: query_traces.iter().map(|t| t.output.clone()).collect(),
            keys: key_traces.iter().map(|t| t.output.clone()).collect(),
            query_traces,
            key_traces,
        })
    }

    /// A batch made directly from output vectors; it carries no traces.
    pub fn from_outputs(queries: Vec<Vec<f64>>, keys: Vec<Vec<f64>>) -> Result<Self> {
        if queries.len() < 2 || queries.len() != keys.len() {
            return Err(Error::Shape(format!(
                "need n ≥ 2 matching queries and keys, got {} and {}",
                queries.len(),
                keys.len()
            )));
        }
        let d = queries[0].len();
        if d == 0 || queries.iter().chain(&keys).any(|v| v.len() != d) {
            return Err(Error::Shape("all outputs must share one positive dimension".into()));
        }
        Ok(Self {
            queries,
            keys,
            query_traces: Vec::new(),
            key_traces: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.queries.len()
    }

    pub fn dim(&self) -> usize {
        self.queries[0].len()
    }

    pub fn queries(&self) -> &[Vec<f64>] {
        &self.queries
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn query_traces(&self) -> &[ForwardTrace] {
        &self.query_traces
    }

    pub fn key_traces(&self) -> &[ForwardTrace] {
        &self.key_traces
    }

    /// `gap[i][j] = qᵢᵀ(kⱼ − kᵢ)`; the diagonal is zero.
    fn logit_gaps(&self) -> Matrix {
        let n = self.n();
        let mut gaps = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if j != i {
                    gaps.set(i, j, dot(&self.queries[i], &sub(&self.keys[j], &self.keys[i])));
                }
            }
        }
        gaps
    }
}

/// Expected per-anchor loss and the expected softmax weights `c[i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeExpectation {
    pub anchor_loss: Vec<f64>,
    pub weights: Matrix,
}

impl NegativeExpectation {
    pub fn total_loss(&self) -> f64 {
        self.anchor_loss.iter().sum::<f64>() / self.anchor_loss.len() as f64
    }
}

/// Loss and softmax weights of one anchor against one negative subset.
fn subset_terms(gaps: &[f64], negatives: &[usize], weights_out: &mut [f64]) -> f64 {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(0.0);
    logits.extend(negatives.iter().map(|&j| gaps[j]));
    let lse = logsumexp(&logits).expect("nonempty");
    for slot in 0..negatives.len() {
        weights_out[slot] = (logits[slot + 1] - lse).exp();
    }
    lse
}

/// Walk all k-subsets of `[n]∖{anchor}` as bitmasks over the `n − 1`
/// remaining positions (Gosper's next-combination step).
fn for_each_subset(n: usize, k: usize, anchor: usize, mut visit: impl FnMut(&[usize])) {
    let width = n - 1;
    let others: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
    let limit: u64 = if width == 64 { u64::MAX } else { 1u64 << width };
    let mut bits: u64 = if k == 64 { u64::MAX } else { (1u64 << k) - 1 };
    let mut members = Vec::with_capacity(k);
    loop {
        members.clear();
        let mut rest = bits;
        while rest != 0 {
            let pos = rest.trailing_zeros() as usize;
            members.push(others[pos]);
            rest &= rest - 1;
        }
        visit(&members);
        let lowest = bits & bits.wrapping_neg();
        let ripple = bits.wrapping_add(lowest);
        if ripple == 0 || ripple >= limit {
            break;
        }
        bits = (((ripple ^ bits) >> 2) / lowest) | ripple;
        if bits >= limit {
            break;
        }
    }
}

fn exact_expectation(gaps: &Matrix, k: usize, cap: u64) -> Result<NegativeExpectation> {
    let n = gaps.rows();
    let count = binomial(n - 1, k);
    if count > u128::from(cap) || n > 64 {
        return Err(Error::EnumerationCap {
            required: count,
            cap,
        });
    }
    let per_anchor: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = gaps.row(i);
            let mut loss = 0.0;
            let mut weight_sums = vec![0.0; n];
            let mut w = vec![0.0; k];
            for_each_subset(n, k, i, |negs| {
                loss += subset_terms(row, negs, &mut w);
                for (slot, &j) in negs.iter().enumerate() {
                    weight_sums[j] += w[slot];
                }
            });
            let scale = 1.0 / count as f64;
            weight_sums.iter_mut().for_each(|x| *x *= scale);
            (loss * scale, weight_sums)
        })
        .collect();
    assemble(n, per_anchor)
}

fn assemble(n: usize, per_anchor: Vec<(f64, Vec<f64>)>) -> Result<NegativeExpectation> {
    let mut weights = Matrix::zeros(n, n);
    let mut anchor_loss = Vec::with_capacity(n);
    for (i, (loss, row)) in per_anchor.into_iter().enumerate() {
        anchor_loss.push(loss);
        weights.row_mut(i).copy_from_slice(&row);
    }
    Ok(NegativeExpectation { anchor_loss, weights })
}

/// Per-draw losses `(1/n) Σᵢ ℓ(i, Sᵢ)` and summed weights, with one uniform
/// subset per anchor per draw. Draws are taken draw-major, anchor-minor.
fn monte_carlo_draws(gaps: &Matrix, k: usize, samples: usize, rng: &RngState) -> (Vec<f64>, Matrix, Vec<f64>) {
    let n = gaps.rows();
    let mut sampler = rng.sampler();
    let mut draw_values = Vec::with_capacity(samples);
    let mut weight_sums = Matrix::zeros(n, n);
    let mut anchor_sums = vec![0.0; n];
    let mut w = vec![0.0; k];
    let mut negs = Vec::with_capacity(k);
    for _ in 0..samples {
        let mut value = 0.0;
        for i in 0..n {
            negs.clear();
            negs.extend(sampler.distinct(n - 1, k).into_iter().map(|p| if p >= i { p + 1 } else { p }));
            let loss = subset_terms(gaps.row(i), &negs, &mut w);
            value += loss;
            anchor_sums[i] += loss;
            let row = weight_sums.row_mut(i);
            for (slot, &j) in negs.iter().enumerate() {
                row[j] += w[slot];
            }
        }
        draw_values.push(value / n as f64);
    }
    (draw_values, weight_sums, anchor_sums)
}

pub fn negative_expectation(batch: &EncodedBatch, k: usize, estimation: &Estimation) -> Result<NegativeExpectation> {
    check_k(batch.n(), k)?;
    let gaps = batch.logit_gaps();
    match *estimation {
        Estimation::Exact { cap } => exact_expectation(&gaps, k, cap),
        Estimation::MonteCarlo { samples, ref rng } => {
            if samples == 0 {
                return Err(Error::InvalidArgument("monte-carlo mode needs samples ≥ 1".into()));
            }
            let (_, mut weights, mut anchor_loss) = monte_carlo_draws(&gaps, k, samples, rng);
            let scale = 1.0 / samples as f64;
            weights.scale(scale);
            anchor_loss.iter_mut().for_each(|x| *x *= scale);
            Ok(NegativeExpectation { anchor_loss, weights })
        }
    }
}

/// `log(1 + Σ_{j∈negs} exp(qᵢᵀ(kⱼ − kᵢ)))`
pub fn sample_loss(batch: &EncodedBatch, i: usize, negatives: &[usize]) -> Result<f64> {
    let n = batch.n();
    if i >= n {
        return Err(Error::Index(format!("anchor {i} out of range for n={n}")));
    }
    let mut seen = vec![false; n];
    for &j in negatives {
        if j >= n || j == i || seen[j] {
            return Err(Error::Index(format!(
                "negatives must be distinct indices in [0, {n}) other than the anchor {i}: {negatives:?}"
            )));
        }
        seen[j] = true;
    }
    let q = &batch.queries[i];
    let mut logits = vec![0.0];
    logits.extend(negatives.iter().map(|&j| dot(q, &sub(&batch.keys[j], &batch.keys[i]))));
    logsumexp(&logits)
}

pub fn total_loss_exact(batch: &EncodedBatch, k: usize, cap: u64) -> Result<f64> {
    Ok(negative_expectation(batch, k, &Estimation::Exact { cap })?.total_loss())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Unbiased estimate of the total loss. Each draw samples one negative
/// subset per anchor; the standard error is over draws.
pub fn total_loss_mc(batch: &EncodedBatch, k: usize, rng: &RngState, samples: usize) -> Result<McEstimate> {
    check_k(batch.n(), k)?;
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {samples}")));
    }
    let (values, _, _) = monte_carlo_draws(&batch.logit_gaps(), k, samples, rng);
    let s = samples as f64;
    let mean = values.iter().sum::<f64>() / s;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0);
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / s).sqrt(),
    })
}

fn losstilde_from(batch: &EncodedBatch, weights: &Matrix) -> Vec<Vec<f64>> {
    let n = batch.n();
    (0..n)
        .map(|i| {
            let mut v = vec![0.0; batch.dim()];
            for j in (0..n).filter(|&j| j != i) {
                let c = weights.get(i, j);
                for ((out, kj), ki) in v.iter_mut().zip(&batch.keys[j]).zip(&batch.keys[i]) {
                    *out += c * (kj - ki);
                }
            }
            v
        })
        .collect()
}

fn losshat_from(batch: &EncodedBatch, weights: &Matrix) -> Vec<Vec<f64>> {
    let n = batch.n();
    (0..n)
        .map(|i| {
            let mut v = vec![0.0; batch.dim()];
            for j in (0..n).filter(|&j| j != i) {
                // ℓ̂(xⱼ, xᵢ) − ℓ̂(xᵢ, xⱼ)
                let incoming = weights.get(j, i);
                let outgoing = weights.get(i, j);
                for ((out, qj), qi) in v.iter_mut().zip(&batch.queries[j]).zip(&batch.queries[i]) {
                    *out += incoming * qj - outgoing * qi;
                }
            }
            v
        })
        .collect()
}

/// `ℓ̃ᵢ = ∂(n·L_S)/∂qᵢ` for every anchor.
pub fn losstilde(batch: &EncodedBatch, k: usize, cap: u64) -> Result<Vec<Vec<f64>>> {
    let e = negative_expectation(batch, k, &Estimation::Exact { cap })?;
    Ok(losstilde_from(batch, &e.weights))
}

/// `ℓ̂(xᵢ, xⱼ)`: the average over subsets containing `j` of `w_j(S) qᵢ`,
/// normalised by the total subset count `C(n−1, k)`.
pub fn losshat_pair(batch: &EncodedBatch, i: usize, j: usize, k: usize, cap: u64) -> Result<Vec<f64>> {
    let n = batch.n();
    if i >= n || j >= n || i == j {
        return Err(Error::Index(format!("need distinct indices below {n}, got ({i}, {j})")));
    }
    let e = negative_expectation(batch, k, &Estimation::Exact { cap })?;
    let c = e.weights.get(i, j);
    Ok(batch.queries[i].iter().map(|q| c * q).collect())
}

/// `ℓ̂ᵢ = ∂(n·L_S)/∂kᵢ` for every anchor.
pub fn losshat_all(batch: &EncodedBatch, k: usize, cap: u64) -> Result<Vec<Vec<f64>>> {
    let e = negative_expectation(batch, k, &Estimation::Exact { cap })?;
    Ok(losshat_from(batch, &e.weights))
}

/// The stacked output gradients `ℓ = (ℓ̃, ℓ̂)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossVectors {
    pub losstilde: Vec<Vec<f64>>,
    pub losshat: Vec<Vec<f64>>,
}

fn stacked_norm(vs: &[Vec<f64>]) -> f64 {
    vs.iter().map(|v| dot(v, v)).sum::<f64>().sqrt()
}

impl LossVectors {
    pub fn losstilde_norm(&self) -> f64 {
        stacked_norm(&self.losstilde)
    }

    pub fn losshat_norm(&self) -> f64 {
        stacked_norm(&self.losshat)
    }

    /// `‖ℓ‖₂ = (‖ℓ̃‖² + ‖ℓ̂‖²)^{1/2}`
    pub fn norm(&self) -> f64 {
        self.losstilde_norm().hypot(self.losshat_norm())
    }

    pub fn losstilde_sq_sum(&self) -> f64 {
        self.losstilde.iter().map(|v| dot(v, v)).sum()
    }

    pub fn losshat_sq_sum(&self) -> f64 {
        self.losshat.iter().map(|v| dot(v, v)).sum()
    }

    /// `Σᵢ ℓ̂ᵢ`, which vanishes up to rounding.
    pub fn losshat_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.losshat.first().map_or(0, Vec::len)];
        for v in &self.losshat {
            crate::linalg::axpy(&mut acc, 1.0, v);
        }
        acc
    }

    /// `{"convention":…,"losstilde":[[…]],"losshat":[[…]]}` with 17 significant digits.
    pub fn to_json(&self) -> String {
        let arr = |vs: &[Vec<f64>]| {
            let rows: Vec<String> = vs
                .iter()
                .map(|v| format!("[{}]", v.iter().map(|&x| f64_17(x)).collect::<Vec<_>>().join(",")))
                .collect();
            format!("[{}]", rows.join(","))
        };
        format!(
            "{{\"convention\":\"{}\",\"losstilde\":{},\"losshat\":{}}}",
            LOSS_VECTOR_CONVENTION,
            arr(&self.losstilde),
            arr(&self.losshat)
        )
    }
}

/// Normalisation recorded alongside exported loss-vectors.
pub const LOSS_VECTOR_CONVENTION: &str = "gradient of n*L_S with respect to each query and key output";

pub fn loss_vectors(batch: &EncodedBatch, k: usize, estimation: &Estimation) -> Result<(LossVectors, f64)> {
    let e = negative_expectation(batch, k, estimation)?;
    let lv = LossVectors {
        losstilde: losstilde_from(batch, &e.weights),
        losshat: losshat_from(batch, &e.weights),
    };
    Ok((lv, e.total_loss()))
}

/// Total loss `L_S(W, θ)` of the two encoders on `data`.
pub fn total_loss(query: &Params, key: &Params, data: &Dataset, k: usize, estimation: &Estimation) -> Result<f64> {
    let queries = data.points().par_iter().map(|x| query.forward(x)).collect::<Result<Vec<_>>>()?;
    let keys = data.points().par_iter().map(|x| key.forward(x)).collect::<Result<Vec<_>>>()?;
    let batch = EncodedBatch::from_outputs(queries, keys)?;
    Ok(negative_expectation(&batch, k, estimation)?.total_loss())
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub query: Params,
    pub key: Params,
    pub loss_vectors: LossVectors,
    pub loss: f64,
}

/// `(1/n) Σᵢ D_{i,l}(b_{i,l+1}ᵀ vᵢ) h_{i,l−1}ᵀ` for every layer, where `vᵢ` is
/// the per-sample output gradient.
fn network_gradient(params: &Params, traces: &[ForwardTrace], output_grads: &[Vec<f64>]) -> Result<Params> {
    let n = traces.len();
    let shape = params.shape();
    let signals: Vec<Vec<Vec<f64>>> = traces
        .par_iter()
        .zip(output_grads.par_iter())
        .map(|(t, v)| params.backward_signals(t, v))
        .collect();
    let mut grad = params.zeros_like();
    for l in 0..=shape.depth {
        let (rows, cols) = shape.layer_shape(l);
        let mut stacked_signals = Matrix::zeros(n, rows);
        let mut stacked_inputs = Matrix::zeros(n, cols);
        for i in 0..n {
            stacked_signals.row_mut(i).copy_from_slice(&signals[i][l]);
            stacked_inputs.row_mut(i).copy_from_slice(traces[i].layer_input(l));
        }
        gemm(1.0 / n as f64, &stacked_signals, true, &stacked_inputs, false, 0.0, grad.layer_mut(l));
    }
    Ok(grad)
}

/// Closed-form gradients of the total loss with respect to both encoders.
pub fn grad_params(query: &Params, key: &Params, data: &Dataset, hp: &HyperParams) -> Result<Gradients> {
    if query.shape() != key.shape() {
        return Err(Error::Shape("query and key encoders must share a shape".into()));
    }
    let batch = EncodedBatch::encode(query, key, data)?;
    let (loss_vectors, loss) = loss_vectors(&batch, hp.k, &hp.estimation)?;
    let grad_query = network_gradient(query, batch.query_traces(), &loss_vectors.losstilde)?;
    let grad_key = network_gradient(key, batch.key_traces(), &loss_vectors.losshat)?;
    Ok(Gradients {
        query: grad_query,
        key: grad_key,
        loss_vectors,
        loss,
    })
}

/// Euclidean norm of the difference between two vectors, relative to `‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = norm(b);
    let diff = norm(&sub(a, b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
