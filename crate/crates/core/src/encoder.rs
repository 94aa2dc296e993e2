//! Bias-free fully connected ReLU encoders.
//!
//! A network with depth parameter `L` has `L + 1` weight matrices: `W₀`
//! (`m×b`), hidden `W₁…W_{L−1}` (`m×m`) and output `W_L` (`d×m`). The
//! forward pass is `f(x) = W_L σ(W_{L−1} ⋯ σ(W₀ x))`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, spectral_norm, Matrix};
use crate::mask::SignMask;
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    /// `L`; the network has `L + 1` weight matrices.
    pub depth: usize,
    /// Hidden width `m`.
    pub width: usize,
    /// Output dimension `d`.
    pub output_dim: usize,
    /// Input dimension `b`.
    pub input_dim: usize,
}

impl Shape {
    pub fn new(depth: usize, width: usize, output_dim: usize, input_dim: usize) -> Result<Self> {
        let shape = Self {
            depth,
            width,
            output_dim,
            input_dim,
        };
        shape.check()?;
        Ok(shape)
    }

    pub fn check(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.output_dim == 0 || self.input_dim == 0 {
            return Err(Error::Shape(format!("all of L, m, d, b must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.depth + 1
    }

    /// `(rows, cols)` of weight matrix `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        assert!(l <= self.depth, "layer {l} out of range for L={}", self.depth);
        if l == self.depth {
            (self.output_dim, self.width)
        } else if l == 0 {
            (self.width, self.input_dim)
        } else {
            (self.width, self.width)
        }
    }

    pub fn num_params(&self) -> usize {
        (0..=self.depth)
            .map(|l| {
                let (r, c) = self.layer_shape(l);
                r * c
            })
            .sum()
    }
}

/// A full weight stack. Gradients and perturbations reuse this type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    shape: Shape,
    weights: Vec<Matrix>,
}

/// Activations recorded during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// `h_0 … h_{L−1}`
    pub hidden: Vec<Vec<f64>>,
    /// `D_0 … D_{L−1}`
    pub masks: Vec<SignMask>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// Input to weight matrix `l`: `x` for `l = 0`, else `h_{l−1}`.
    pub fn layer_input(&self, l: usize) -> &[f64] {
        if l == 0 {
            &self.input
        } else {
            &self.hidden[l - 1]
        }
    }
}

/// Norms of the increment applied by [`Params::apply_perturbation`].
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationNorms {
    pub layer_spectral: Vec<f64>,
    pub frobenius: f64,
}

impl Params {
    /// He initialization: hidden and input layers `N(0, 2/m)`, output layer `N(0, 1/d)`.
    pub fn init(rng: &RngState, shape: Shape) -> Result<Self> {
        shape.check()?;
        let weights = (0..=shape.depth)
            .map(|l| {
                let (rows, cols) = shape.layer_shape(l);
                let variance = if l == shape.depth {
                    1.0 / shape.output_dim as f64
                } else {
                    2.0 / shape.width as f64
                };
                gaussian_matrix(&rng.child_index(l as u64), rows, cols, variance)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shape, weights })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        shape.check()?;
        let weights = (0..=shape.depth)
            .map(|l| {
                let (r, c) = shape.layer_shape(l);
                Matrix::zeros(r, c)
            })
            .collect();
        Ok(Self { shape, weights })
    }

    pub fn from_weights(shape: Shape, weights: Vec<Matrix>) -> Result<Self> {
        shape.check()?;
        if weights.len() != shape.num_layers() {
            return Err(Error::Shape(format!(
                "expected {} weight matrices, got {}",
                shape.num_layers(),
                weights.len()
            )));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.shape() != shape.layer_shape(l) {
                return Err(Error::Shape(format!(
                    "layer {l} is {:?}, expected {:?}",
                    w.shape(),
                    shape.layer_shape(l)
                )));
            }
            if !w.is_finite() {
                return Err(Error::InvalidArgument(format!("layer {l} has non-finite entries")));
            }
        }
        Ok(Self { shape, weights })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape).expect("shape already validated")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.weights[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.weights[l]
    }

    pub fn into_layers(self) -> Vec<Matrix> {
        self.weights
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
    }

    fn check_same_shape(&self, other: &Params) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// `⟨self, other⟩ = Σ_l tr(W_lᵀ W'_l)`
    pub fn dot(&self, other: &Params) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.weights.iter().zip(&other.weights).map(|(a, b)| a.frobenius_dot(b)).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| {
                let f = w.frobenius_norm();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance_to(&self, other: &Params) -> Result<f64> {
        let mut diff = self.clone();
        diff.add_scaled(-1.0, other)?;
        Ok(diff.frobenius_norm())
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, s: f64, other: &Params) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(s, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| w.scale(s));
    }

    /// Returns `self + scale · delta` and the norms of `scale · delta`.
    pub fn apply_perturbation(&self, delta: &Params, scale: f64) -> Result<(Params, PerturbationNorms)> {
        self.check_same_shape(delta)?;
        let mut out = self.clone();
        out.add_scaled(scale, delta)?;
        let layer_spectral = delta
            .weights
            .iter()
            .map(|w| {
                if scale == 0.0 {
                    return Ok(0.0);
                }
                spectral_norm(w, 1e-10).map(|s| s * scale.abs())
            })
            .collect::<Result<Vec<_>>>()?;
        let norms = PerturbationNorms {
            layer_spectral,
            frobenius: scale.abs() * delta.frobenius_norm(),
        };
        Ok((out, norms))
    }

    pub fn num_params(&self) -> usize {
        self.shape.num_params()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.shape.input_dim {
            return Err(Error::Shape(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.shape.input_dim
            )));
        }
        let depth = self.shape.depth;
        let mut hidden = Vec::with_capacity(depth);
        let mut masks = Vec::with_capacity(depth);
        let mut current = x.to_vec();
        for l in 0..depth {
            let mut pre = self.weights[l].matvec(&current);
            let mask = SignMask::from_preactivations(&pre);
            pre.iter_mut().for_each(|z| *z = z.max(0.0));
            masks.push(mask);
            hidden.push(pre.clone());
            current = pre;
        }
        let output = self.weights[depth].matvec(&current);
        Ok(ForwardTrace {
            input: x.to_vec(),
            hidden,
            masks,
            output,
        })
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let ok = trace.masks.len() == self.shape.depth
            && trace.hidden.len() == self.shape.depth
            && trace.input.len() == self.shape.input_dim
            && trace.output.len() == self.shape.output_dim
            && trace.masks.iter().all(|m| m.len() == self.shape.width);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("forward trace does not match these params".into()))
        }
    }

    /// `b_l = W_L D_{L−1} W_{L−1} ⋯ D_l W_l`, with `b_L = W_L`.
    pub fn backprop_matrix(&self, trace: &ForwardTrace, l: usize) -> Result<Matrix> {
        self.check_trace(trace)?;
        let depth = self.shape.depth;
        if l > depth {
            return Err(Error::Index(format!("layer {l} out of range 0..={depth}")));
        }
        let mut acc = self.weights[depth].clone();
        for j in (l..depth).rev() {
            acc.scale_columns(&trace.masks[j].to_f64());
            acc = acc.matmul(&self.weights[j])?;
        }
        Ok(acc)
    }

    /// Back-propagated signals `δ_l = D_l b_{l+1}ᵀ v` for `l = 0 … L−1`,
    /// followed by `δ_L = v`. These are the gradients of `⟨v, f(x)⟩` with
    /// respect to the pre-activations of each layer (and the output).
    pub fn backward_signals(&self, trace: &ForwardTrace, v: &[f64]) -> Vec<Vec<f64>> {
        let depth = self.shape.depth;
        let mut signals = vec![Vec::new(); depth + 1];
        signals[depth] = v.to_vec();
        for l in (0..depth).rev() {
            let mut s = self.weights[l + 1].matvec_t(&signals[l + 1]);
            trace.masks[l].apply(&mut s);
            signals[l] = s;
        }
        signals
    }

    /// Gradient of `⟨v, f(x)⟩` with respect to every weight matrix.
    pub fn output_gradient(&self, trace: &ForwardTrace, v: &[f64]) -> Params {
        let signals = self.backward_signals(trace, v);
        let weights = signals
            .iter()
            .enumerate()
            .map(|(l, s)| Matrix::outer(s, trace.layer_input(l)))
            .collect();
        Params {
            shape: self.shape,
            weights,
        }
    }

    const MAGIC: &'static [u8; 8] = b"CLPARAMS";
    const VERSION: u32 = 1;

    /// Binary container: magic, version, shape (L, m, d, b as u64), optional
    /// seed provenance (flag byte, seed, stream), then each layer's entries as
    /// little-endian `f64`, row-major, in layer order.
    pub fn write_binary<W: Write>(&self, out: &mut W, provenance: Option<RngState>) -> Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&Self::VERSION.to_le_bytes())?;
        for v in [self.shape.depth, self.shape.width, self.shape.output_dim, self.shape.input_dim] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        match provenance {
            Some(state) => {
                out.write_all(&[1])?;
                out.write_all(&state.seed.to_le_bytes())?;
                out.write_all(&state.stream.to_le_bytes())?;
            }
            None => {
                out.write_all(&[0])?;
                out.write_all(&[0u8; 16])?;
            }
        }
        for w in &self.weights {
            for x in w.as_slice() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(input: &mut R) -> Result<(Params, Option<RngState>)> {
        fn u64_from<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not a params container".into()));
        }
        let mut version = [0u8; 4];
        input.read_exact(&mut version)?;
        if u32::from_le_bytes(version) != Self::VERSION {
            return Err(Error::Format(format!("unsupported version {}", u32::from_le_bytes(version))));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(u64_from(input)?).map_err(|_| Error::Format("dimension overflow".into()))?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let seed = u64_from(input)?;
        let stream = u64_from(input)?;
        let provenance = match flag[0] {
            0 => None,
            1 => Some(RngState { seed, stream }),
            other => return Err(Error::Format(format!("bad provenance flag {other}"))),
        };
        let mut weights = Vec::with_capacity(shape.num_layers());
        for l in 0..=shape.depth {
            let (r, c) = shape.layer_shape(l);
            let mut bytes = vec![0u8; r * c * 8];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            weights.push(Matrix::from_vec(r, c, data)?);
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last layer".into()));
        }
        Ok((Params::from_weights(shape, weights)?, provenance))
    }
}

/// Diagonal `D''` such that `σ(a) − σ(b) = (D + D'')(a − b)` with
/// `D_kk = 1{a_k ≥ 0}`. Entries are nonzero only where the activation
/// indicators of `a` and `b` disagree, and `|D_kk + D''_kk| ≤ 1`.
pub fn sign_correction(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(&ak, &bk)| {
            if !ak.is_finite() || !bk.is_finite() {
                return Err(Error::InvalidArgument("sign correction needs finite entries".into()));
            }
            let active_a = ak >= 0.0;
            let active_b = bk >= 0.0;
            if active_a == active_b || ak == bk {
                return Ok(0.0);
            }
            let d = if active_a { 1.0 } else { 0.0 };
            let ratio = (ak.max(0.0) - bk.max(0.0)) / (ak - bk);
            Ok(ratio - d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> Shape {
        Shape::new(3, 12, 4, 5).unwrap()
    }

    #[test]
    fn init_variances() {
        let shape = Shape::new(2, 10_000, 1, 2).unwrap();
        let p = Params::init(&RngState::new(17), shape).unwrap();
        let w = p.layer(1).as_slice();
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 10_000.0;
        assert!((var / target - 1.0).abs() < 0.02, "hidden variance {var}");

        let shape = Shape::new(1, 1000, 100, 2).unwrap();
        let p = Params::init(&RngState::new(18), shape).unwrap();
        let w = p.layer(1).as_slice();
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var / 0.01 - 1.0).abs() < 0.05, "output variance {var}");
    }

    #[test]
    fn init_is_deterministic() {
        let s = RngState::new(4).child("query");
        assert_eq!(Params::init(&s, small_shape()).unwrap(), Params::init(&s, small_shape()).unwrap());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = Params::zeros(small_shape()).unwrap();
        let t = p.forward_trace(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(t.hidden.iter().flatten().all(|&h| h == 0.0));
        assert!(t.output.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn hand_evaluated_network() {
        let shape = Shape::new(1, 2, 1, 2).unwrap();
        let w0 = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let w1 = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let p = Params::from_weights(shape, vec![w0, w1]).unwrap();
        let t = p.forward_trace(&[1.0, 0.0]).unwrap();
        assert_eq!(t.hidden[0], vec![1.0, 0.0]);
        assert_eq!(t.output, vec![1.0]);
    }

    #[test]
    fn negated_first_layer_complements_masks() {
        let p = Params::init(&RngState::new(5), small_shape()).unwrap();
        let x = [0.3, -0.2, 0.5, 0.1, 0.7];
        let t = p.forward_trace(&x).unwrap();
        let mut neg = p.clone();
        neg.layer_mut(0).scale(-1.0);
        let tn = neg.forward_trace(&x).unwrap();
        let pre = p.layer(0).matvec(&x);
        for (u, z) in pre.iter().enumerate() {
            if *z != 0.0 {
                assert_ne!(t.masks[0].get(u), tn.masks[0].get(u));
            }
        }
    }

    #[test]
    fn wrong_input_dimension() {
        let p = Params::zeros(small_shape()).unwrap();
        assert!(matches!(p.forward_trace(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn backprop_matrix_edge_cases() {
        let p = Params::init(&RngState::new(6), small_shape()).unwrap();
        let t = p.forward_trace(&[0.1, 0.2, -0.3, 0.4, 0.5]).unwrap();
        assert_eq!(p.backprop_matrix(&t, 3).unwrap(), *p.layer(3));
        assert!(matches!(p.backprop_matrix(&t, 4), Err(Error::Index(_))));

        // with every unit active the product is the plain linear chain
        let mut linear = t.clone();
        linear.masks = (0..3).map(|_| SignMask::ones(12)).collect();
        let b0 = p.backprop_matrix(&linear, 0).unwrap();
        let plain = p
            .layer(3)
            .matmul(p.layer(2))
            .unwrap()
            .matmul(p.layer(1))
            .unwrap()
            .matmul(p.layer(0))
            .unwrap();
        for (x, y) in b0.as_slice().iter().zip(plain.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backprop_chain_identity() {
        let p = Params::init(&RngState::new(7), small_shape()).unwrap();
        let t = p.forward_trace(&[0.5, -0.1, 0.2, 0.3, -0.4]).unwrap();
        for l in 0..3 {
            let mut lhs = p.backprop_matrix(&t, l + 1).unwrap();
            lhs.scale_columns(&t.masks[l].to_f64());
            let lhs = lhs.matmul(p.layer(l)).unwrap();
            let rhs = p.backprop_matrix(&t, l).unwrap();
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn apply_perturbation_examples() {
        let p = Params::init(&RngState::new(8), small_shape()).unwrap();
        let q = Params::init(&RngState::new(9), small_shape()).unwrap();
        let (same, norms) = p.apply_perturbation(&q, 0.0).unwrap();
        assert_eq!(same, p);
        assert_eq!(norms.frobenius, 0.0);
        assert!(norms.layer_spectral.iter().all(|&s| s == 0.0));

        let (zero, _) = p.apply_perturbation(&p, -1.0).unwrap();
        assert!(zero.layers().iter().all(|w| w.max_abs() == 0.0));

        let (_, one) = p.apply_perturbation(&q, 1.0).unwrap();
        let (_, two) = p.apply_perturbation(&q, 2.0).unwrap();
        assert!((two.frobenius - 2.0 * one.frobenius).abs() < 1e-12);
        for (a, b) in one.layer_spectral.iter().zip(&two.layer_spectral) {
            assert!((b - 2.0 * a).abs() < 1e-8 * b);
        }

        let other = Params::zeros(Shape::new(2, 12, 4, 5).unwrap()).unwrap();
        assert!(matches!(p.apply_perturbation(&other, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn sign_correction_examples() {
        assert_eq!(sign_correction(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(sign_correction(&[1.0], &[-1.0]).unwrap(), vec![-0.5]);
        assert!(matches!(sign_correction(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn binary_round_trip_is_bitwise() {
        let p = Params::init(&RngState::new(10), small_shape()).unwrap();
        let prov = RngState::new(10).child("query");
        let mut buf = Vec::new();
        p.write_binary(&mut buf, Some(prov)).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 32 + 17 + 8 * p.num_params());
        let (back, got) = Params::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(got, Some(prov));
        for (a, b) in back.layers().iter().zip(p.layers()) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let mut truncated = &buf[..buf.len() - 3];
        assert!(Params::read_binary(&mut truncated).is_err());
    }
}
