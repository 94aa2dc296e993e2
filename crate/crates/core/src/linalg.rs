//! Dense row-major matrices and the numerical primitives built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &ui) in u.iter().enumerate() {
            for (dst, &vj) in m.row_mut(i).iter_mut().zip(v) {
                *dst = ui * vj;
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        self.data.chunks_exact(self.cols.max(1)).take(self.rows).map(|row| dot(row, x)).collect()
    }

    /// `Aᵀ y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.data.chunks_exact(self.cols.max(1)).zip(y) {
            if yr != 0.0 {
                axpy(&mut out, yr, row);
            }
        }
        out
    }

    /// `A B`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// Multiply column `j` by `scale[j]`, i.e. `A · diag(scale)`.
    pub fn scale_columns(&mut self, scale: &[f64]) {
        assert_eq!(scale.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, &s) in row.iter_mut().zip(scale) {
                *x *= s;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        axpy(&mut self.data, s, &other.data);
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Trace inner product `tr(Aᵀ B)`.
    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `C ← alpha · op(A) op(B) + beta · C` where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers of `a`,
    // `b` and `c`, whose dimensions were checked against (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Dot product with four independent accumulators; the summation order is
/// fixed so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Matrix with i.i.d. `N(0, variance)` entries, filled row-major from `rng`.
pub fn gaussian_matrix(rng: &RngState, rows: usize, cols: usize, variance: f64) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("gaussian matrix needs positive shape, got {rows}x{cols}")));
    }
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::InvalidArgument(format!("variance must be finite and ≥ 0, got {variance}")));
    }
    let mut sampler = rng.sampler();
    let sd = variance.sqrt();
    let data = (0..rows * cols).map(|_| sd * sampler.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

/// `log Σ exp(vᵢ)`, shifted by the maximum so it never overflows.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or_else(|| Error::Shape("logsumexp of an empty sequence".into()))?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

pub const SPECTRAL_MAX_STEPS: usize = 10_000;

/// Spectral norm by power iteration on `AᵀA` from a fixed pseudo-random start.
pub fn spectral_norm(a: &Matrix, tol: f64) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Shape("spectral norm of an empty matrix".into()));
    }
    power_iteration(a.cols, |x| a.matvec(x), |y| a.matvec_t(y), tol, SPECTRAL_MAX_STEPS)
}

/// Largest singular value of the linear map given by `apply` (and its
/// adjoint `apply_t`) acting on vectors of length `dim`.
///
/// Stops when two successive estimates agree to relative `tol`. On hitting
/// `max_steps` the error carries the last estimate, which is a lower bound.
pub fn power_iteration<F, G>(dim: usize, apply: F, apply_t: G, tol: f64, max_steps: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let mut v = RngState::new(0x5eed_0f_c0de).sampler().unit_vector(dim);
    let mut estimate = 0.0;
    for step in 0..max_steps {
        let av = apply(&v);
        let sigma = norm(&av);
        if sigma == 0.0 {
            // v sits in the kernel; A = 0 unless the start was unlucky, which
            // the pseudo-random start makes a measure-zero event.
            return Ok(0.0);
        }
        let mut w = apply_t(&av);
        let wn = norm(&w);
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
        // ‖Aᵀ A v‖ / ‖A v‖ is a sharper estimate than ‖A v‖ alone.
        let next = wn / sigma;
        if step > 0 && (next - estimate).abs() <= tol * next {
            return Ok(next);
        }
        estimate = next;
    }
    Err(Error::NoConvergence {
        iterations: max_steps,
        estimate,
    })
}

/// Largest-singular-value estimate for one map in a batched Lanczos run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularEstimate {
    pub value: f64,
    pub converged: bool,
    pub steps: usize,
}

/// Largest eigenvalue of the symmetric tridiagonal matrix with `diag` and
/// `off` (sub/super-diagonal), by Sturm-count bisection.
fn tridiagonal_max_eigenvalue(diag: &[f64], off: &[f64]) -> f64 {
    let k = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for j in 0..k {
        let r = if j > 0 { off[j - 1].abs() } else { 0.0 } + if j + 1 < k { off[j].abs() } else { 0.0 };
        lo = lo.min(diag[j] - r);
        hi = hi.max(diag[j] + r);
    }
    let below = |x: f64| {
        let mut count = 0;
        let mut q = 1.0;
        for j in 0..k {
            let e2 = if j > 0 { off[j - 1] * off[j - 1] } else { 0.0 };
            q = diag[j] - x - if j > 0 { e2 / q } else { 0.0 };
            if q == 0.0 {
                q = -f64::EPSILON * (x.abs() + 1.0);
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-15 * hi.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        if below(mid) == k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn column(m: &Matrix, c: usize) -> Vec<f64> {
    (0..m.rows).map(|r| m.data[r * m.cols + c]).collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // two passes of classical Gram-Schmidt
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            axpy(v, -p, b);
        }
    }
}

struct LanczosColumn {
    alphas: Vec<f64>,
    betas: Vec<f64>,
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    estimate: f64,
    done: bool,
    converged: bool,
}

impl LanczosColumn {
    fn bidiagonal_norm(&self) -> f64 {
        let k = self.alphas.len();
        let diag: Vec<f64> = (0..k)
            .map(|j| self.alphas[j].powi(2) + if j > 0 { self.betas[j - 1].powi(2) } else { 0.0 })
            .collect();
        let off: Vec<f64> = (0..k.saturating_sub(1)).map(|j| self.alphas[j] * self.betas[j]).collect();
        tridiagonal_max_eigenvalue(&diag, &off).max(0.0).sqrt()
    }
}

/// Largest singular values of `batch` linear maps `Aᶜ: ℝ^dim → ℝ^out` at once,
/// by Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization.
///
/// `apply` receives a `dim × batch` matrix whose column `c` is an input for
/// map `c` and must return the `out × batch` images; `apply_t` is the adjoint.
/// Batching lets callers evaluate all maps with matrix-matrix products.
/// A column stops once two successive estimates agree to relative `tol`;
/// estimates are lower bounds that increase monotonically with the step count.
pub fn lanczos_top_singular<F, G>(
    dim: usize,
    batch: usize,
    apply: F,
    apply_t: G,
    tol: f64,
    max_steps: usize,
) -> Result<Vec<SingularEstimate>>
where
    F: Fn(&Matrix) -> Matrix,
    G: Fn(&Matrix) -> Matrix,
{
    if dim == 0 || batch == 0 {
        return Err(Error::Shape("lanczos needs a nonempty batch of nonempty maps".into()));
    }
    if !(tol > 0.0) || max_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "need tol > 0 and max_steps ≥ 1, got {tol}, {max_steps}"
        )));
    }
    let start = RngState::new(0x5eed_0f_c0de).sampler().unit_vector(dim);
    let mut cols: Vec<LanczosColumn> = (0..batch)
        .map(|_| LanczosColumn {
            alphas: Vec::new(),
            betas: Vec::new(),
            left: Vec::new(),
            right: vec![start.clone()],
            estimate: 0.0,
            done: false,
            converged: false,
        })
        .collect();

    let stack = |vectors: Vec<Option<&Vec<f64>>>, len: usize| {
        let mut m = Matrix::zeros(len, batch);
        for (c, v) in vectors.into_iter().enumerate() {
            if let Some(v) = v {
                for (r, &x) in v.iter().enumerate() {
                    m.data[r * batch + c] = x;
                }
            }
        }
        m
    };

    // u₁ = A v₁ / α₁
    let images = apply(&stack(cols.iter().map(|c| c.right.last()).collect(), dim));
    let out_dim = images.rows;
    for (c, col) in cols.iter_mut().enumerate() {
        let mut u = column(&images, c);
        let alpha = norm(&u);
        if alpha == 0.0 {
            col.done = true;
            col.converged = true;
            continue;
        }
        u.iter_mut().for_each(|x| *x /= alpha);
        col.alphas.push(alpha);
        col.left.push(u);
        col.estimate = alpha;
    }

    let mut steps = 1;
    while steps < max_steps && cols.iter().any(|c| !c.done) {
        steps += 1;
        let back = apply_t(&stack(
            cols.iter().map(|c| if c.done { None } else { c.left.last() }).collect(),
            out_dim,
        ));
        for (c, col) in cols.iter_mut().enumerate() {
            if col.done {
                continue;
            }
            let mut w = column(&back, c);
            axpy(&mut w, -col.alphas[col.alphas.len() - 1], col.right.last().unwrap());
            orthogonalize(&mut w, &col.right);
            let beta = norm(&w);
            if beta <= 1e-13 * col.estimate {
                col.done = true;
                col.converged = true;
                continue;
            }
            w.iter_mut().for_each(|x| *x /= beta);
            col.betas.push(beta);
            col.right.push(w);
        }
        let forward = apply(&stack(
            cols.iter().map(|c| if c.done { None } else { c.right.last() }).collect(),
            dim,
        ));
        for (c, col) in cols.iter_mut().enumerate() {
            if col.done {
                continue;
            }
            let mut u = column(&forward, c);
            axpy(&mut u, -col.betas[col.betas.len() - 1], col.left.last().unwrap());
            orthogonalize(&mut u, &col.left);
            let alpha = norm(&u);
            if alpha <= 1e-13 * col.estimate {
                col.alphas.push(0.0);
                col.estimate = col.bidiagonal_norm();
                col.done = true;
                col.converged = true;
                continue;
            }
            u.iter_mut().for_each(|x| *x /= alpha);
            col.alphas.push(alpha);
            col.left.push(u);
            let next = col.bidiagonal_norm();
            if (next - col.estimate).abs() <= tol * next {
                col.converged = true;
                col.done = true;
            }
            col.estimate = next;
        }
    }
    Ok(cols
        .into_iter()
        .map(|c| SingularEstimate {
            value: c.estimate,
            converged: c.converged,
            steps: c.alphas.len(),
        })
        .collect())
}
