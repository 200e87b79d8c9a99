//! Vector arithmetic, seeded Gaussian sampling and descriptive statistics.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), keyed by a 64-bit seed and
//! addressed by a 64-bit stream id. A stream id packs a domain tag in its top
//! 16 bits and an index (training step, trial number, ...) in the low 48
//! bits, so every draw in the toolkit is a pure function of
//! `(seed, domain, index)`. Gaussian variates use the ziggurat sampler of
//! `rand_distr::StandardNormal`; both algorithms are pinned through
//! `Cargo.lock`, and [`RNG_ALGORITHM`] names the combination.

use std::ops::{Deref, Index};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Versioned name of the generator stack, recorded in run metadata.
pub const RNG_ALGORITHM: &str = "chacha8-stream/ziggurat-normal/v1";

/// Quantile convention used by [`summarize`].
pub const QUANTILE_METHOD: &str = "linear interpolation between closest ranks (type 7)";

/// Domain tags used to derive stream ids.
pub mod streams {
    pub const NOISE: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const INIT: u64 = 3;
    pub const DATA: u64 = 4;
    pub const MOMENT_TRIAL: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const PROFILE: u64 = 7;
}

const INDEX_BITS: u32 = 48;

/// Packs a domain tag and an index into a stream id.
pub fn stream_id(domain: u64, index: u64) -> u64 {
    debug_assert!(index < (1 << INDEX_BITS));
    (domain << INDEX_BITS) | (index & ((1 << INDEX_BITS) - 1))
}

/// Generator for `(seed, stream_id)`.
pub fn stream_rng(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// A flat vector of parameters or of any gradient-shaped quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a vector, rejecting empty input and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("parameter vector must have dim >= 1"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Wraps values computed internally from finite inputs.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected,
                got: self.dim(),
            })
        }
    }

    pub(crate) fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|x| x * factor).collect())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Draws `dim` i.i.d. `N(0, std^2)` values from stream `(seed, stream_id)`.
pub fn gaussian_vector(seed: u64, stream_id: u64, dim: usize, std: f64) -> Result<ParamVector> {
    if dim == 0 {
        return Err(Error::invalid("gaussian_vector: dim must be >= 1"));
    }
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("gaussian_vector: std must be finite and >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(ParamVector::zeros(dim));
    }
    let mut rng = stream_rng(seed, stream_id);
    let values = (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Ok(ParamVector(values))
}

/// Euclidean norm, computed with max-abs rescaling so that very large or very
/// small entries neither overflow nor underflow.
pub fn l2_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * sum.sqrt()
}

/// Sums equal-length vectors in index-ascending pairwise order.
///
/// The tree is fixed by the input length alone, so the result is reproducible
/// for a given ordering of `items`.
pub fn pairwise_sum(items: &[&[f64]], dim: usize) -> Vec<f64> {
    match items.len() {
        0 => vec![0.0; dim],
        1 => items[0].to_vec(),
        n => {
            let (left, right) = items.split_at(n / 2);
            let mut acc = pairwise_sum(left, dim);
            let rhs = pairwise_sum(right, dim);
            for (a, b) in acc.iter_mut().zip(&rhs) {
                *a += b;
            }
            acc
        }
    }
}

/// Five-number summary plus the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Table-style summary statistics with type-7 quantiles.
pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::invalid("summarize: empty input"));
    }
    if values.iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("summarize: NaN in input"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    Ok(SummaryStats {
        min,
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max,
        // Summation round-off can push the mean of a near-constant input a
        // hair outside [min, max].
        mean: mean.clamp(min, max),
    })
}

/// Binned counts over fixed edges. Bins are `[e_i, e_{i+1})`, the last one
/// closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }
}

pub fn histogram(values: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 {
        return Err(Error::invalid("histogram: need at least two edges"));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("histogram: edges must be finite and strictly increasing"));
    }
    let bins = edges.len() - 1;
    let lo = edges[0];
    let hi = edges[bins];
    let mut counts = vec![0u64; bins];
    let (mut underflow, mut overflow) = (0, 0);
    for &x in values {
        if x.is_nan() {
            return Err(Error::invalid("histogram: NaN in input"));
        }
        if x < lo {
            underflow += 1;
        } else if x > hi {
            overflow += 1;
        } else if x == hi {
            counts[bins - 1] += 1;
        } else {
            // first edge strictly greater than x, minus one
            let idx = edges.partition_point(|&e| e <= x) - 1;
            counts[idx] += 1;
        }
    }
    Ok(Histogram {
        edges: edges.to_vec(),
        counts,
        underflow,
        overflow,
    })
}

pub fn linear_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect()
}

/// Edges evenly spaced in log10 between `lo > 0` and `hi`.
pub fn log_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..=bins)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / bins as f64))
        .collect()
}

/// Sample mean and unbiased standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, 0.5)
}
