//! Brute-force references used to check the closed forms: central finite
//! differences, plain lexicographic subset enumeration, and detection of
//! coordinates whose probe step crosses a ReLU boundary.

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::encoder::{ForwardTrace, Params};
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Which of the two encoders a coordinate belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    Query,
    Key,
}

/// Central-difference gradient of `loss` with respect to every coordinate
/// of both parameter stacks.
pub fn fd_gradient<F>(loss: F, query: &Params, key: &Params, h: f64) -> Result<(Params, Params)>
where
    F: Fn(&Params, &Params) -> Result<f64> + Sync,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let grad_q = fd_one_net(&loss, query, key, Net::Query, h)?;
    let grad_k = fd_one_net(&loss, query, key, Net::Key, h)?;
    Ok((grad_q, grad_k))
}

fn fd_one_net<F>(loss: &F, query: &Params, key: &Params, net: Net, h: f64) -> Result<Params>
where
    F: Fn(&Params, &Params) -> Result<f64> + Sync,
{
    let target = match net {
        Net::Query => query,
        Net::Key => key,
    };
    let mut grad = target.zeros_like();
    for l in 0..target.layers().len() {
        let len = target.layer(l).len();
        let column: Vec<f64> = (0..len)
            .into_par_iter()
            .map_init(
                || (query.clone(), key.clone()),
                |(q, k), idx| {
                    let probe = |q: &mut Params, k: &mut Params, delta: f64| -> Result<f64> {
                        let w = match net {
                            Net::Query => q.layer_mut(l),
                            Net::Key => k.layer_mut(l),
                        };
                        let orig = w.as_slice()[idx];
                        w.as_mut_slice()[idx] = orig + delta;
                        let value = loss(q, k);
                        let w = match net {
                            Net::Query => q.layer_mut(l),
                            Net::Key => k.layer_mut(l),
                        };
                        w.as_mut_slice()[idx] = orig;
                        let value = value?;
                        if value.is_finite() {
                            Ok(value)
                        } else {
                            Err(Error::Evaluation(format!("{net:?} layer {l} entry {idx}")))
                        }
                    };
                    let plus = probe(q, k, h)?;
                    let minus = probe(q, k, -h)?;
                    Ok((plus - minus) / (2.0 * h))
                },
            )
            .collect::<Result<Vec<_>>>()?;
        grad.layer_mut(l).as_mut_slice().copy_from_slice(&column);
    }
    Ok(grad)
}

/// Lexicographic k-subsets of `{0..n}∖{exclude}`.
pub struct Subsets {
    pool: Vec<usize>,
    positions: Vec<usize>,
    done: bool,
}

impl Iterator for Subsets {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let current: Vec<usize> = self.positions.iter().map(|&p| self.pool[p]).collect();
        // advance: find the rightmost position that can still move right
        let k = self.positions.len();
        let m = self.pool.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.positions[i] < m - k + i {
                self.positions[i] += 1;
                for j in i + 1..k {
                    self.positions[j] = self.positions[j - 1] + 1;
                }
                break;
            }
        }
        Some(current)
    }
}

pub fn enumerate_subsets(n: usize, k: usize, exclude: usize) -> Result<Subsets> {
    if n < 2 || k == 0 || k > n - 1 {
        return Err(Error::InvalidArgument(format!("need 1 ≤ k ≤ n−1, got n={n}, k={k}")));
    }
    if exclude >= n {
        return Err(Error::Index(format!("excluded index {exclude} out of range for n={n}")));
    }
    Ok(Subsets {
        pool: (0..n).filter(|&j| j != exclude).collect(),
        positions: (0..k).collect(),
        done: false,
    })
}

/// Per-coordinate flags for both encoders: `true` where a `±h` step of that
/// single weight changes any activation bit of any sample.
#[derive(Clone, Debug, PartialEq)]
pub struct KinkMask {
    pub query: Vec<Vec<bool>>,
    pub key: Vec<Vec<bool>>,
}

impl KinkMask {
    pub fn layers(&self, net: Net) -> &[Vec<bool>] {
        match net {
            Net::Query => &self.query,
            Net::Key => &self.key,
        }
    }

    pub fn marked(&self) -> usize {
        self.query.iter().chain(&self.key).flatten().filter(|&&b| b).count()
    }

    pub fn total(&self) -> usize {
        self.query.iter().chain(&self.key).map(Vec::len).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.marked() as f64 / self.total() as f64
    }
}

fn net_kinks(params: &Params, data: &Dataset, h: f64) -> Result<Vec<Vec<bool>>> {
    let base: Vec<ForwardTrace> = data
        .points()
        .iter()
        .map(|x| params.forward_trace(x))
        .collect::<Result<_>>()?;
    (0..params.layers().len())
        .map(|l| {
            (0..params.layer(l).len())
                .into_par_iter()
                .map_init(
                    || params.clone(),
                    |p, idx| -> Result<bool> {
                        if h == 0.0 {
                            return Ok(false);
                        }
                        let orig = p.layer(l).as_slice()[idx];
                        let mut flipped = false;
                        for delta in [h, -h] {
                            p.layer_mut(l).as_mut_slice()[idx] = orig + delta;
                            for (x, t) in data.points().iter().zip(&base) {
                                let moved = p.forward_trace(x)?;
                                if moved.masks.iter().zip(&t.masks).any(|(a, b)| a.flips(b) > 0) {
                                    flipped = true;
                                    break;
                                }
                            }
                            if flipped {
                                break;
                            }
                        }
                        p.layer_mut(l).as_mut_slice()[idx] = orig;
                        Ok(flipped)
                    },
                )
                .collect()
        })
        .collect()
}

pub fn kink_mask(query: &Params, key: &Params, data: &Dataset, h: f64) -> Result<KinkMask> {
    if !(h >= 0.0) {
        return Err(Error::InvalidArgument(format!("probe step must be non-negative, got {h}")));
    }
    Ok(KinkMask {
        query: net_kinks(query, data, h)?,
        key: net_kinks(key, data, h)?,
    })
}

/// Result of comparing an analytic gradient with a finite-difference one.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientComparison {
    pub max_relative_error: f64,
    pub compared: usize,
    pub masked: usize,
}

/// Coordinate-wise relative error `|a − f| / max(|a|, |f|, floor)` over the
/// unmasked coordinates of both encoders. `floor` is `floor_fraction` times
/// the largest finite-difference entry of the same encoder, so coordinates
/// whose true gradient is numerically zero are judged on an absolute scale.
pub fn compare_gradients(
    analytic: (&Params, &Params),
    numeric: (&Params, &Params),
    mask: Option<&KinkMask>,
    floor_fraction: f64,
) -> GradientComparison {
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut masked = 0;
    for (net, a, f) in [(Net::Query, analytic.0, numeric.0), (Net::Key, analytic.1, numeric.1)] {
        let scale = f.layers().iter().map(|w| w.max_abs()).fold(0.0, f64::max);
        let floor = (floor_fraction * scale).max(f64::MIN_POSITIVE);
        for l in 0..a.layers().len() {
            for (idx, (x, y)) in a.layer(l).as_slice().iter().zip(f.layer(l).as_slice()).enumerate() {
                if mask.is_some_and(|m| m.layers(net)[l][idx]) {
                    masked += 1;
                    continue;
                }
                compared += 1;
                let denom = x.abs().max(y.abs()).max(floor);
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    GradientComparison {
        max_relative_error: worst,
        compared,
        masked,
    }
}
