//! Unit-norm, pairwise-separated training sets.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::format::f64_17;
use crate::linalg::{norm, sub};
use crate::rng::RngState;

/// `n` points on the unit sphere of `R^b` with stored separation `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    points: Vec<Vec<f64>>,
    delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub max_norm_deviation: f64,
    pub min_distance: f64,
    pub stored_delta: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

pub const NORM_TOLERANCE: f64 = 1e-12;

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(norm(&sub(&points[i], &points[j])));
        }
    }
    best
}

impl Dataset {
    /// Wrap points with an explicit stored delta. Only the shape is checked;
    /// use [`Dataset::validate`] for the norm and separation assumptions.
    pub fn from_parts(points: Vec<Vec<f64>>, delta: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Shape(format!("dataset needs n ≥ 2, got {}", points.len())));
        }
        let b = points[0].len();
        if b == 0 || points.iter().any(|p| p.len() != b) {
            return Err(Error::Shape("points must share one positive dimension".into()));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        Ok(Self { points, delta })
    }

    /// Wrap points, storing their realized minimum pairwise distance.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let delta = if points.len() >= 2 { min_pairwise_distance(&points) } else { 0.0 };
        if delta == 0.0 && points.len() >= 2 {
            return Err(Error::InvalidArgument("dataset contains coincident points".into()));
        }
        Self::from_parts(points, delta)
    }

    /// Rejection sampler: points are drawn uniformly on the sphere one at a
    /// time and the whole set is redrawn whenever the newest point lands
    /// within `delta_min` of an earlier one. Each redraw is one attempt;
    /// `max_attempts` defaults to `10·n²`.
    pub fn generate_separated(
        rng: &RngState,
        n: usize,
        b: usize,
        delta_min: f64,
        max_attempts: Option<usize>,
    ) -> Result<Self> {
        if n < 2 || b < 2 {
            return Err(Error::InvalidArgument(format!("need n ≥ 2 and b ≥ 2, got n={n}, b={b}")));
        }
        if !(delta_min > 0.0 && delta_min < 2.0) {
            return Err(Error::InvalidArgument(format!("delta_min must lie in (0, 2), got {delta_min}")));
        }
        let budget = max_attempts.unwrap_or(10 * n * n);
        let mut sampler = rng.sampler();
        'attempt: for _ in 0..budget {
            let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
            while points.len() < n {
                let candidate = sampler.unit_vector(b);
                if points.iter().any(|p| norm(&sub(p, &candidate)) < delta_min) {
                    continue 'attempt;
                }
                points.push(candidate);
            }
            return Self::from_points(points);
        }
        Err(Error::Generation { attempts: budget })
    }

    /// Vertices of a centred regular simplex, normalised to the sphere and
    /// embedded in the first `n` coordinates of `R^b`. Requires `n ≤ b`.
    /// Pairwise distances are all `sqrt(2n/(n−1))`.
    pub fn simplex(n: usize, b: usize) -> Result<Self> {
        if n < 2 || n > b {
            return Err(Error::InvalidArgument(format!("simplex needs 2 ≤ n ≤ b, got n={n}, b={b}")));
        }
        let inv_n = 1.0 / n as f64;
        let scale = (n as f64 / (n as f64 - 1.0)).sqrt();
        let points = (0..n)
            .map(|i| {
                let mut p = vec![0.0; b];
                for (j, x) in p.iter_mut().take(n).enumerate() {
                    let centred = if i == j { 1.0 - inv_n } else { -inv_n };
                    *x = centred * scale;
                }
                p
            })
            .collect();
        Self::from_points(points)
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn validate(&self) -> ValidationReport {
        let max_norm_deviation = self
            .points
            .iter()
            .map(|p| (norm(p) - 1.0).abs())
            .fold(0.0, f64::max);
        let min_distance = min_pairwise_distance(&self.points);
        let mut failures = Vec::new();
        if max_norm_deviation > NORM_TOLERANCE {
            failures.push(format!("norm deviation {max_norm_deviation:e} exceeds {NORM_TOLERANCE:e}"));
        }
        if !(min_distance >= self.delta) {
            failures.push(format!("min pairwise distance {min_distance} below stored delta {}", self.delta));
        }
        ValidationReport {
            max_norm_deviation,
            min_distance,
            stored_delta: self.delta,
            passed: failures.is_empty(),
            failures,
        }
    }

    /// `{"n":…,"b":…,"delta":…,"points":[[…],…]}` with 17 significant digits.
    pub fn to_json(&self) -> String {
        let rows: Vec<String> = self
            .points
            .iter()
            .map(|p| format!("[{}]", p.iter().map(|&x| f64_17(x)).collect::<Vec<_>>().join(",")))
            .collect();
        format!(
            "{{\"n\":{},\"b\":{},\"delta\":{},\"points\":[{}]}}",
            self.n(),
            self.dim(),
            f64_17(self.delta),
            rows.join(",")
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            n: usize,
            b: usize,
            delta: f64,
            points: Vec<Vec<f64>>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        if raw.points.len() != raw.n {
            return Err(Error::Format(format!("n={} but {} points", raw.n, raw.points.len())));
        }
        if raw.points.iter().any(|p| p.len() != raw.b) {
            return Err(Error::Format(format!("every point must have b={} coordinates", raw.b)));
        }
        Self::from_parts(raw.points, raw.delta)
    }
}
