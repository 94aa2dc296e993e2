//! ReLU activation patterns packed as bit vectors.

use serde::{Deserialize, Serialize};

/// One bit per unit: set when the unit's pre-activation is `≥ 0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignMask {
    len: usize,
    words: Vec<u64>,
}

impl SignMask {
    pub fn from_preactivations(pre: &[f64]) -> Self {
        let mut words = vec![0u64; pre.len().div_ceil(64)];
        for (i, &z) in pre.iter().enumerate() {
            if z >= 0.0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self { len: pre.len(), words }
    }

    pub fn ones(len: usize) -> Self {
        let mut words = vec![u64::MAX; len.div_ceil(64)];
        if len % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (len % 64)) - 1;
            }
        }
        Self { len, words }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_active(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of units whose activation differs between the two patterns.
    pub fn flips(&self, other: &SignMask) -> usize {
        assert_eq!(self.len, other.len, "mask length mismatch");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// `D v`: zero the inactive coordinates in place.
    pub fn apply(&self, v: &mut [f64]) {
        assert_eq!(v.len(), self.len);
        for (i, x) in v.iter_mut().enumerate() {
            if !self.get(i) {
                *x = 0.0;
            }
        }
    }

    /// Diagonal as 0/1 floats.
    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_count_as_active() {
        let m = SignMask::from_preactivations(&[0.0, -0.0, -1e-300, 2.0]);
        assert_eq!(m.to_f64(), vec![1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn flips_is_xor_popcount() {
        let pre: Vec<f64> = (0..150).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = pre.iter().map(|x| -x).collect();
        let a = SignMask::from_preactivations(&pre);
        let b = SignMask::from_preactivations(&neg);
        let nonzero = pre.iter().filter(|&&x| x != 0.0).count();
        assert_eq!(a.flips(&b), nonzero);
        assert_eq!(SignMask::ones(150).count_active(), 150);
    }
}
