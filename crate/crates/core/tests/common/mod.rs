//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dpadam_core::models::Dataset;
use dpadam_core::numerics::l2_norm;
use dpadam_core::{Model, ParamVector};

/// `log E_{z ~ N(0, s^2)} [(1 - q + q exp((2z - 1) / (2 s^2)))^alpha]` by
/// composite Simpson over `z` in `[-L, L]`, evaluated in log space.
pub fn log_moment_quadrature(alpha: f64, sigma: f64, q: f64) -> f64 {
    let s2 = sigma * sigma;
    let log_f = |z: f64| {
        let ratio = (2.0 * z - 1.0) / (2.0 * s2);
        // log(1 - q + q e^ratio), stable for both signs of ratio
        let mix = if ratio > 0.0 {
            ratio + (q + (1.0 - q) * (-ratio).exp()).ln()
        } else {
            (1.0 - q + q * ratio.exp()).ln()
        };
        alpha * mix - z * z / (2.0 * s2) - 0.5 * (2.0 * std::f64::consts::PI * s2).ln()
    };
    let half_width = 40.0 * sigma + alpha / sigma;
    let n = 200_000; // even
    let h = 2.0 * half_width / n as f64;
    let logs: Vec<f64> = (0..=n).map(|i| log_f(-half_width + i as f64 * h)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (l - max).exp();
    }
    max + (acc * h / 3.0).ln()
}

pub fn quadrature_rdp(alpha: f64, sigma: f64, q: f64) -> f64 {
    log_moment_quadrature(alpha, sigma, q) / (alpha - 1.0)
}

pub fn ln_binom(n: u32, k: u32) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// Integer-order accountant written out directly from the binomial expansion.
pub fn oracle_epsilon(sigma: f64, q: f64, delta: f64, steps: u64) -> f64 {
    (2..=64u32)
        .map(|a| {
            let terms: Vec<f64> = (0..=a)
                .map(|k| {
                    let k_f = k as f64;
                    ln_binom(a, k) + (a - k) as f64 * (1.0 - q).ln() + k_f * q.ln() + (k_f * k_f - k_f) / (2.0 * sigma * sigma)
                })
                .collect();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_a = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            steps as f64 * log_a / (a as f64 - 1.0) + (1.0 / delta).ln() / (a as f64 - 1.0)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn central_diff(model: &Model, theta: &ParamVector, data: &Dataset, idx: &[usize], h: f64) -> Vec<f64> {
    let base = theta.as_slice().to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let fp = model.loss(&ParamVector::new(plus).unwrap(), data, idx).unwrap();
            let fm = model.loss(&ParamVector::new(minus).unwrap(), data, idx).unwrap();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2_norm(&diff) / l2_norm(b).max(1e-12)
}
