//! Per-example clipping and the Gaussian mechanism on mini-batch gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::GradientBatch;
use crate::numerics::{gaussian_vector, l2_norm, pairwise_sum, stream_id, streams, ParamVector};

/// Clipping and noise parameters shared by the privatizer and the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    /// Per-example L2 clipping norm `C`.
    pub clip_norm: f64,
    /// Noise multiplier `sigma`; noise std on the summed gradient is `sigma * C`.
    pub noise_multiplier: f64,
    /// Nominal batch size `B`; the sampling rate is `B / N`.
    pub batch_size: usize,
    /// Training set size `N`.
    pub dataset_size: usize,
    pub delta: f64,
    pub target_epsilon: f64,
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::invalid("clip norm must be finite and > 0"));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::invalid("noise multiplier must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.batch_size > self.dataset_size {
            return Err(Error::invalid("batch size must satisfy 1 <= B <= N"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("delta must be in (0, 1)"));
        }
        if !(self.target_epsilon >= 0.0) {
            return Err(Error::invalid("target epsilon must be >= 0"));
        }
        Ok(())
    }

    /// Poisson sampling rate `q = B / N`.
    pub fn sampling_rate(&self) -> f64 {
        self.batch_size as f64 / self.dataset_size as f64
    }

    /// Per-coordinate standard deviation of the noise in the averaged
    /// gradient, `sigma * C / B`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm / self.batch_size as f64
    }
}

/// Free-function form of [`PrivacyConfig::noise_std`].
pub fn noise_std(cfg: &PrivacyConfig) -> f64 {
    cfg.noise_std()
}

/// Scales `g` down to norm `c` when it exceeds it; otherwise returns it as is.
pub fn clip(g: &ParamVector, c: f64) -> ParamVector {
    let norm = l2_norm(g);
    if norm <= c {
        return g.clone();
    }
    let mut factor = c / norm;
    let mut clipped = g.scaled(factor);
    // Rounding in the rescale can leave the norm a few ulps above c.
    while l2_norm(&clipped) > c {
        factor *= 1.0 - f64::EPSILON;
        clipped = g.scaled(factor);
    }
    clipped
}

/// Noised, averaged gradient for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedGradient {
    /// `(sum of clipped gradients + z) / B`, the only field an optimizer may consume.
    pub g_tilde: ParamVector,
    pub step: u64,
    /// Poisson sampling produced no examples; `g_tilde` is pure noise.
    pub empty_batch: bool,
    /// Present only when requested through [`privatize_with_diagnostics`].
    pub diagnostics: Option<Diagnostics>,
}

/// Un-noised components of a privatized gradient. Not privacy-safe.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Clipped mean `sum / B`.
    pub g_bar: ParamVector,
    /// Raw noise draw `z ~ N(0, sigma^2 C^2 I)` (not divided by `B`).
    pub z: ParamVector,
}

/// Noise stream of step `step`.
pub fn noise_stream(step: u64) -> u64 {
    stream_id(streams::NOISE, step)
}

fn privatize_inner(
    batch: &GradientBatch,
    dim: usize,
    cfg: &PrivacyConfig,
    seed: u64,
    step: u64,
    diagnostics: bool,
) -> Result<PrivatizedGradient> {
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::invalid("privatize: dim must be >= 1"));
    }
    let clipped: Vec<ParamVector> = batch
        .per_example
        .iter()
        .map(|g| {
            g.check_dim(dim)?;
            Ok(clip(g, cfg.clip_norm))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<&[f64]> = clipped.iter().map(|g| g.as_slice()).collect();
    let sum = pairwise_sum(&rows, dim);
    let z = gaussian_vector(seed, noise_stream(step), dim, cfg.noise_multiplier * cfg.clip_norm)?;
    let b = cfg.batch_size as f64;
    let g_tilde: Vec<f64> = sum.iter().zip(z.iter()).map(|(s, z)| (s + z) / b).collect();
    let g_tilde = ParamVector::new(g_tilde)?;
    let diagnostics = diagnostics.then(|| Diagnostics {
        g_bar: ParamVector::from_raw(sum.iter().map(|s| s / b).collect()),
        z,
    });
    Ok(PrivatizedGradient {
        g_tilde,
        step,
        empty_batch: batch.is_empty(),
        diagnostics,
    })
}

/// Clips every per-example gradient to `C`, sums them, adds
/// `z ~ N(0, sigma^2 C^2 I)` drawn from stream `(seed, step)`, and divides by
/// the nominal batch size `B`.
pub fn privatize(batch: &GradientBatch, dim: usize, cfg: &PrivacyConfig, seed: u64, step: u64) -> Result<PrivatizedGradient> {
    privatize_inner(batch, dim, cfg, seed, step, false)
}

/// As [`privatize`], additionally returning the clipped mean and noise draw.
pub fn privatize_with_diagnostics(
    batch: &GradientBatch,
    dim: usize,
    cfg: &PrivacyConfig,
    seed: u64,
    step: u64,
) -> Result<PrivatizedGradient> {
    privatize_inner(batch, dim, cfg, seed, step, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean_std;
    use proptest::prelude::*;

    fn cfg(c: f64, sigma: f64, b: usize) -> PrivacyConfig {
        PrivacyConfig {
            clip_norm: c,
            noise_multiplier: sigma,
            batch_size: b,
            dataset_size: 60_000,
            delta: 1e-5,
            target_epsilon: 7.0,
        }
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn clip_examples() {
        let c = clip(&pv(&[3.0, 4.0]), 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&pv(&[0.3, 0.4]), 1.0), pv(&[0.3, 0.4]));
        assert_eq!(clip(&pv(&[3.0, 4.0]), 10.0), pv(&[3.0, 4.0]));
    }

    #[test]
    fn noise_std_examples() {
        assert!((noise_std(&cfg(0.1, 0.4, 256)) - 1.5625e-4).abs() < 1e-18);
        assert_eq!(noise_std(&cfg(1.0, 0.0, 256)), 0.0);
        assert_eq!(noise_std(&cfg(1.0, 1.0, 1)), 1.0);
        assert!((noise_std(&cfg(1.0, 1.0, 2048)) - 4.8828125e-4).abs() < 1e-18);
    }

    #[test]
    fn noiseless_mean() {
        let batch = GradientBatch {
            per_example: vec![pv(&[1.0, 0.0]), pv(&[0.0, 1.0])],
            batch_indices: vec![0, 1],
        };
        let out = privatize(&batch, 2, &cfg(1.0, 0.0, 2), 1, 1).unwrap();
        assert_eq!(out.g_tilde, pv(&[0.5, 0.5]));
        assert!(out.diagnostics.is_none());
    }

    #[test]
    fn deterministic_per_seed_and_step() {
        let batch = GradientBatch {
            per_example: vec![pv(&[1.0, 2.0, 3.0])],
            batch_indices: vec![0],
        };
        let c = cfg(1.0, 1.0, 4);
        let a = privatize(&batch, 3, &c, 11, 5).unwrap();
        let b = privatize(&batch, 3, &c, 11, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.g_tilde, privatize(&batch, 3, &c, 11, 6).unwrap().g_tilde);
    }

    #[test]
    fn empty_batch_is_pure_noise() {
        let c = cfg(1.0, 1.0, 8);
        let out = privatize_with_diagnostics(&GradientBatch::empty(), 3, &c, 2, 9).unwrap();
        assert!(out.empty_batch);
        let diag = out.diagnostics.unwrap();
        assert_eq!(diag.g_bar, ParamVector::zeros(3));
        for i in 0..3 {
            assert_eq!(out.g_tilde[i], diag.z[i] / 8.0);
        }
    }

    #[test]
    fn decomposition_holds() {
        let batch = GradientBatch {
            per_example: (0..5).map(|i| pv(&[i as f64, -0.5 * i as f64, 2.0])).collect(),
            batch_indices: (0..5).collect(),
        };
        let out = privatize_with_diagnostics(&batch, 3, &cfg(1.5, 1.3, 4), 3, 2).unwrap();
        let diag = out.diagnostics.unwrap();
        for i in 0..3 {
            let recomposed = diag.g_bar[i] + diag.z[i] / 4.0;
            assert!((out.g_tilde[i] - recomposed).abs() <= 4.0 * f64::EPSILON * out.g_tilde[i].abs().max(1.0));
        }
    }

    #[test]
    fn noise_variance_matches_sigma_c_over_b() {
        // 10^5 draws of a 2-coordinate step with a fixed gradient.
        let batch = GradientBatch {
            per_example: vec![pv(&[0.3, -0.1])],
            batch_indices: vec![0],
        };
        let c = cfg(1.0, 2.0, 64);
        let expected = c.noise_std().powi(2);
        let mut diffs = vec![Vec::new(), Vec::new()];
        for step in 0..100_000u64 {
            let out = privatize_with_diagnostics(&batch, 2, &c, 17, step).unwrap();
            let g_bar = out.diagnostics.unwrap().g_bar;
            for j in 0..2 {
                diffs[j].push(out.g_tilde[j] - g_bar[j]);
            }
        }
        for d in &diffs {
            let (_, std) = mean_std(d);
            assert!((std * std / expected - 1.0).abs() < 0.02, "variance ratio {}", std * std / expected);
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_config() {
        let batch = GradientBatch {
            per_example: vec![pv(&[1.0, 2.0])],
            batch_indices: vec![0],
        };
        assert!(privatize(&batch, 3, &cfg(1.0, 1.0, 1), 0, 0).is_err());
        assert!(privatize(&batch, 2, &cfg(0.0, 1.0, 1), 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn clip_bounds_norm_and_is_idempotent(
            v in prop::collection::vec(-1e6f64..1e6, 1..64),
            c in 1e-3f64..1e3,
        ) {
            let g = pv(&v);
            let once = clip(&g, c);
            prop_assert!(l2_norm(&once) <= c * (1.0 + 4.0 * f64::EPSILON));
            prop_assert_eq!(clip(&once, c), once.clone());
            // direction preserved
            let n = l2_norm(&g);
            if n > 0.0 {
                let scale = l2_norm(&once) / n;
                for (a, b) in once.iter().zip(g.iter()) {
                    prop_assert!((a - b * scale).abs() <= 1e-12 * c);
                }
            }
        }

        #[test]
        fn sigma_zero_equals_clipped_mean(
            rows in prop::collection::vec(prop::collection::vec(-10f64..10.0, 3), 1..12),
        ) {
            let batch = GradientBatch {
                per_example: rows.iter().map(|r| pv(r)).collect(),
                batch_indices: (0..rows.len()).collect(),
            };
            let c = cfg(2.0, 0.0, rows.len());
            let out = privatize_with_diagnostics(&batch, 3, &c, 1, 1).unwrap();
            prop_assert_eq!(out.g_tilde, out.diagnostics.unwrap().g_bar);
        }
    }
}
