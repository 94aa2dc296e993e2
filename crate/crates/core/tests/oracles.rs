//! Independent references for the closed-form gradients and estimators:
//! a scalar reverse-mode autodiff tape, finite differences, a dense SVD and
//! brute-force sampling statistics.

use contrast_lab::contrastive::binomial;
use contrast_lab::monitors::InitProbeOptions;
use contrast_lab::oracle::{compare_gradients, enumerate_subsets, fd_gradient, kink_mask, DEFAULT_FD_STEP};
use contrast_lab::{
    gaussian_matrix, gd_step, grad_params, init_probe, spectral_norm, total_loss, total_loss_exact, total_loss_mc,
    Dataset, EncodedBatch, Estimation, HyperParams, Params, RngState, Shape,
};

/// Minimal tape for reverse accumulation over scalars.
#[derive(Default)]
struct Tape {
    values: Vec<f64>,
    parents: Vec<Vec<(usize, f64)>>,
}

impl Tape {
    fn push(&mut self, value: f64, parents: Vec<(usize, f64)>) -> usize {
        self.values.push(value);
        self.parents.push(parents);
        self.values.len() - 1
    }
    fn var(&mut self, v: f64) -> usize {
        self.push(v, vec![])
    }
    fn sub(&mut self, a: usize, b: usize) -> usize {
        let v = self.values[a] - self.values[b];
        self.push(v, vec![(a, 1.0), (b, -1.0)])
    }
    fn mul(&mut self, a: usize, b: usize) -> usize {
        let (x, y) = (self.values[a], self.values[b]);
        self.push(x * y, vec![(a, y), (b, x)])
    }
    fn scale(&mut self, a: usize, c: f64) -> usize {
        let v = c * self.values[a];
        self.push(v, vec![(a, c)])
    }
    fn exp(&mut self, a: usize) -> usize {
        let e = self.values[a].exp();
        self.push(e, vec![(a, e)])
    }
    fn ln(&mut self, a: usize) -> usize {
        let x = self.values[a];
        self.push(x.ln(), vec![(a, 1.0 / x)])
    }
    fn relu(&mut self, a: usize) -> usize {
        let x = self.values[a];
        // a zero pre-activation counts as active
        let (v, d) = if x >= 0.0 { (x, 1.0) } else { (0.0, 0.0) };
        self.push(v, vec![(a, d)])
    }
    fn sum(&mut self, items: &[usize]) -> usize {
        let v = items.iter().map(|&i| self.values[i]).sum();
        self.push(v, items.iter().map(|&i| (i, 1.0)).collect())
    }
    fn dot(&mut self, a: &[usize], b: &[usize]) -> usize {
        let terms: Vec<usize> = a.iter().zip(b).map(|(&x, &y)| self.mul(x, y)).collect();
        self.sum(&terms)
    }
    fn gradient(&self, output: usize) -> Vec<f64> {
        let mut adj = vec![0.0; self.values.len()];
        adj[output] = 1.0;
        for node in (0..=output).rev() {
            let a = adj[node];
            if a == 0.0 {
                continue;
            }
            for &(p, d) in &self.parents[node] {
                adj[p] += a * d;
            }
        }
        adj
    }
}

fn tape_weights(tape: &mut Tape, p: &Params) -> Vec<Vec<Vec<usize>>> {
    p.layers()
        .iter()
        .map(|w| (0..w.rows()).map(|r| (0..w.cols()).map(|c| tape.var(w.get(r, c))).collect()).collect())
        .collect()
}

fn tape_forward(tape: &mut Tape, weights: &[Vec<Vec<usize>>], x: &[f64]) -> Vec<usize> {
    let mut h: Vec<usize> = x.iter().map(|&v| tape.var(v)).collect();
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        let pre: Vec<usize> = w.iter().map(|row| tape.dot(row, &h)).collect();
        h = if l == last { pre } else { pre.iter().map(|&z| tape.relu(z)).collect() };
    }
    h
}

fn subsets(pool: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &first) in pool.iter().enumerate() {
        for mut rest in subsets(&pool[i + 1..], k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Total loss built node by node: mean over anchors of the mean over
/// subsets of `log(1 + Σ exp(qᵢᵀ(kⱼ − kᵢ)))`.
fn tape_total_loss(tape: &mut Tape, qw: &[Vec<Vec<usize>>], kw: &[Vec<Vec<usize>>], data: &Dataset, k: usize) -> usize {
    let n = data.n();
    let qs: Vec<Vec<usize>> = data.points().iter().map(|x| tape_forward(tape, qw, x)).collect();
    let ks: Vec<Vec<usize>> = data.points().iter().map(|x| tape_forward(tape, kw, x)).collect();
    let one = tape.var(1.0);
    let mut anchors = Vec::new();
    for i in 0..n {
        let pool: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let all = subsets(&pool, k);
        let count = all.len() as f64;
        let mut terms = Vec::new();
        for s in all {
            let mut inner = vec![one];
            for j in s {
                let diff: Vec<usize> = ks[j].iter().zip(&ks[i]).map(|(&a, &b)| tape.sub(a, b)).collect();
                let z = tape.dot(&qs[i], &diff);
                inner.push(tape.exp(z));
            }
            let total = tape.sum(&inner);
            terms.push(tape.ln(total));
        }
        let s = tape.sum(&terms);
        anchors.push(tape.scale(s, 1.0 / count));
    }
    let s = tape.sum(&anchors);
    tape.scale(s, 1.0 / n as f64)
}

fn small_problem(seed: u64, n: usize, depth: usize, m: usize, d: usize, b: usize) -> (Dataset, Params, Params) {
    let root = RngState::new(seed);
    let data = Dataset::generate_separated(&root.child("data"), n, b, 0.3, None).unwrap();
    let shape = Shape::new(depth, m, d, b).unwrap();
    (
        data,
        Params::init(&root.child("query"), shape).unwrap(),
        Params::init(&root.child("key"), shape).unwrap(),
    )
}

fn hp(k: usize) -> HyperParams {
    HyperParams {
        k,
        eta: 0.0,
        gamma: 0.0,
        iterations: 1,
        epsilon: 0.5,
        estimation: Estimation::default(),
    }
}

#[test]
fn closed_form_gradients_match_reverse_accumulation() {
    for (seed, n, k, depth) in [(1, 5, 2, 2), (2, 4, 3, 1), (3, 6, 1, 3)] {
        let (data, q, key) = small_problem(seed, n, depth, 6, 3, 3);
        let mut tape = Tape::default();
        let qw = tape_weights(&mut tape, &q);
        let kw = tape_weights(&mut tape, &key);
        let loss = tape_total_loss(&mut tape, &qw, &kw, &data, k);
        let adj = tape.gradient(loss);
        let g = grad_params(&q, &key, &data, &hp(k)).unwrap();
        assert!((g.loss - tape.values[loss]).abs() <= 1e-13 * tape.values[loss].abs());
        for (ids, closed) in [(&qw, &g.query), (&kw, &g.key)] {
            let reference: Vec<f64> = ids.iter().flatten().flatten().map(|&i| adj[i]).collect();
            let got: Vec<f64> = closed.layers().iter().flat_map(|w| w.as_slice().to_vec()).collect();
            let scale = reference.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let diff = got.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff <= 1e-10 * norm, "seed {seed}: relative {}", diff / norm);
            for (a, b) in got.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn closed_form_gradients_match_finite_differences() {
    let (data, q, key) = small_problem(4, 6, 2, 24, 5, 6);
    let h = hp(2);
    let g = grad_params(&q, &key, &data, &h).unwrap();
    let step = 1e-5;
    let (fq, fk) = fd_gradient(|a, b| total_loss(a, b, &data, 2, &h.estimation), &q, &key, step).unwrap();
    let mask = kink_mask(&q, &key, &data, step).unwrap();
    let cmp = compare_gradients((&g.query, &g.key), (&fq, &fk), Some(&mask), 1e-4);
    assert!(cmp.max_relative_error <= 1e-5, "{cmp:?}");
    assert!(mask.fraction() < 0.05);
    assert_eq!(cmp.compared + cmp.masked, 2 * q.num_params());
}

#[test]
fn output_jacobian_rows_match_finite_differences() {
    let (data, q, _) = small_problem(5, 3, 3, 12, 4, 5);
    let x = data.point(0);
    let trace = q.forward_trace(x).unwrap();
    let mask = kink_mask(&q, &q, &data, DEFAULT_FD_STEP).unwrap();
    for r in 0..4 {
        let mut e = vec![0.0; 4];
        e[r] = 1.0;
        let analytic = q.output_gradient(&trace, &e);
        let (fd, _) = fd_gradient(|a, _| Ok(a.forward(x)?[r]), &q, &q, DEFAULT_FD_STEP).unwrap();
        for l in 0..q.layers().len() {
            for (idx, (a, f)) in analytic.layer(l).as_slice().iter().zip(fd.layer(l).as_slice()).enumerate() {
                if mask.layers(contrast_lab::oracle::Net::Query)[l][idx] {
                    continue;
                }
                assert!((a - f).abs() <= 1e-9, "layer {l} entry {idx}: {a} vs {f}");
            }
        }
    }
}

#[test]
fn finite_differences_converge_quadratically() {
    let shape = Shape::new(1, 3, 2, 2).unwrap();
    let q = Params::init(&RngState::new(9), shape).unwrap();
    let k = Params::init(&RngState::new(10), shape).unwrap();
    let f = |a: &Params, b: &Params| -> contrast_lab::Result<f64> {
        Ok(a.layers().iter().chain(b.layers()).flat_map(|w| w.as_slice().to_vec()).map(|x| (1.3 * x).sin() + x.exp()).sum())
    };
    let exact = |x: f64| 1.3 * (1.3 * x).cos() + x.exp();
    let errors: Vec<f64> = [1e-2, 1e-3]
        .iter()
        .map(|&h| {
            let (gq, _) = fd_gradient(f, &q, &k, h).unwrap();
            gq.layers()
                .iter()
                .zip(q.layers())
                .flat_map(|(g, w)| g.as_slice().iter().zip(w.as_slice()).map(|(a, x)| (a - exact(*x)).abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max)
        })
        .collect();
    let ratio = errors[0] / errors[1];
    assert!((80.0..120.0).contains(&ratio), "error ratio {ratio}, errors {errors:?}");
    let (g5, _) = fd_gradient(f, &q, &k, 1e-5).unwrap();
    let e5 = g5
        .layers()
        .iter()
        .zip(q.layers())
        .flat_map(|(g, w)| g.as_slice().iter().zip(w.as_slice()).map(|(a, x)| (a - exact(*x)).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    assert!(e5 < errors[1]);
}

#[test]
fn spectral_norm_matches_dense_svd() {
    for seed in 0..3 {
        let a = gaussian_matrix(&RngState::new(seed), 50, 80, 1.0).unwrap();
        let dense = nalgebra::DMatrix::from_row_slice(50, 80, a.as_slice());
        let top = dense.singular_values().max();
        let ours = spectral_norm(&a, 1e-12).unwrap();
        assert!((ours - top).abs() <= 1e-6 * top, "{ours} vs {top}");
    }
}

#[test]
fn monte_carlo_mean_is_unbiased() {
    let mut s = RngState::new(77).sampler();
    let mut draw = || (0..10).map(|_| (0..6).map(|_| s.standard_normal()).collect()).collect::<Vec<Vec<f64>>>();
    let batch = EncodedBatch::from_outputs(draw(), draw()).unwrap();
    let exact = total_loss_exact(&batch, 3, 1_000_000).unwrap();
    let root = RngState::new(78);
    let estimates: Vec<f64> = (0..1000)
        .map(|i| total_loss_mc(&batch, 3, &root.child_index(i), 100).unwrap().estimate)
        .collect();
    let mean = estimates.iter().sum::<f64>() / 1000.0;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 999.0;
    let stderr = (var / 1000.0).sqrt();
    assert!((mean - exact).abs() <= 4.0 * stderr, "mean {mean}, exact {exact}, stderr {stderr}");
}

#[test]
fn updates_use_gradients_frozen_at_the_current_iterate() {
    let (data, q, key) = small_problem(11, 6, 2, 32, 4, 6);
    let mut h = hp(2);
    h.eta = 0.5;
    h.gamma = 0.5;
    let step = gd_step(&q, &key, &data, &h, 0, (&q, &key), false).unwrap();
    let g = grad_params(&q, &key, &data, &h).unwrap();
    let mut q1 = q.clone();
    q1.add_scaled(-h.eta, &g.query).unwrap();
    let mut k1 = key.clone();
    k1.add_scaled(-h.gamma, &g.key).unwrap();
    assert!(step.query.distance_to(&q1).unwrap() <= 1e-15 * q1.frobenius_norm());
    assert!(step.key.distance_to(&k1).unwrap() <= 1e-15 * k1.frobenius_norm());
    // alternating: the key step sees the already-updated query encoder
    let g_alt = grad_params(&q1, &key, &data, &h).unwrap();
    let mut k_alt = key.clone();
    k_alt.add_scaled(-h.gamma, &g_alt.key).unwrap();
    let gap = k_alt.distance_to(&step.key).unwrap();
    assert!(gap > 1e-6 * step.key.distance_to(&key).unwrap(), "alternating update is indistinguishable: {gap}");
}

#[test]
fn hidden_norm_deviation_tightens_with_width() {
    let options = InitProbeOptions {
        products: false,
        backward_probes: 2,
        ..InitProbeOptions::default()
    };
    let median = |m: usize| {
        let mut devs: Vec<f64> = (0..20u64)
            .map(|seed| {
                let (data, q, k) = small_problem(1000 + seed, 8, 2, m, 8, 16);
                let r = init_probe(&q, &k, &data, &options, None, &RngState::new(seed)).unwrap();
                r.measured["query.hidden_norm_max_dev"].max(r.measured["key.hidden_norm_max_dev"])
            })
            .collect();
        devs.sort_by(f64::total_cmp);
        (devs[9] + devs[10]) / 2.0
    };
    let narrow = median(256);
    let wide = median(4096);
    assert!(wide <= narrow, "median deviation {wide} at m=4096 vs {narrow} at m=256");
}

#[test]
fn realized_separation_shrinks_with_n() {
    let mean_delta = |n: usize| {
        (0..100u64)
            .map(|s| Dataset::generate_separated(&RngState::new(s).child_index(n as u64), n, 8, 0.05, None).unwrap().delta())
            .sum::<f64>()
            / 100.0
    };
    let deltas: Vec<f64> = [4, 8, 16, 32].iter().map(|&n| mean_delta(n)).collect();
    assert!(deltas.windows(2).all(|w| w[1] < w[0]), "{deltas:?}");
}

#[test]
fn enumerated_subsets_are_distinct_and_complete() {
    for n in 2..=12 {
        for k in 1..n {
            for exclude in [0, n - 1] {
                let all: Vec<Vec<usize>> = enumerate_subsets(n, k, exclude).unwrap().collect();
                let distinct: std::collections::HashSet<Vec<usize>> = all.iter().cloned().collect();
                assert_eq!(all.len() as u128, binomial(n - 1, k));
                assert_eq!(distinct.len(), all.len());
                assert!(all.iter().all(|s| s.len() == k && !s.contains(&exclude) && s.iter().all(|&j| j < n)));
            }
        }
    }
}
