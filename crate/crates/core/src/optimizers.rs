//! SGD and Adam updates, including the two DP variants of Adam.
//!
//! The biased variant is textbook Adam fed with privatized gradients:
//! `m_hat / (sqrt(v_hat) + gamma)`. The corrected variant removes the
//! noise-variance floor from the bias-corrected second moment before taking
//! the root: `m_hat / sqrt(max(v_hat - (sigma C / B)^2, gamma'))`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::privatizer::PrivacyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdamMode {
    Standard,
    DpBiased,
    DpCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    /// Added to `sqrt(v_hat)` in the standard and biased updates.
    pub gamma: f64,
    /// Floor under `v_hat - (sigma C / B)^2` in the corrected update.
    pub gamma_prime: f64,
    pub mode: AdamMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            lr: 1e-3,
            gamma: 1e-8,
            gamma_prime: 1e-8,
            mode: AdamMode::DpCorrected,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be >= 0"));
        }
        if self.mode == AdamMode::DpCorrected && !(self.gamma_prime > 0.0) {
            return Err(Error::invalid("gamma' must be > 0 in corrected mode"));
        }
        Ok(())
    }

    /// `beta2` paired with `beta1` through `1 - beta1 = sqrt(1 - beta2)`.
    pub fn coupled_beta2(beta1: f64) -> f64 {
        1.0 - (1.0 - beta1) * (1.0 - beta1)
    }
}

/// Step counter, both moment EMAs and the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: ParamVector,
    pub v: ParamVector,
    pub theta: ParamVector,
}

impl OptimizerState {
    pub fn new(theta: ParamVector) -> Self {
        let dim = theta.dim();
        Self {
            t: 0,
            m: ParamVector::zeros(dim),
            v: ParamVector::zeros(dim),
            theta,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }
}

/// Update direction `Delta_t` together with the moments it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection {
    pub delta: ParamVector,
    pub m_hat: ParamVector,
    pub v_hat: ParamVector,
    /// Coordinates where the `gamma'` floor was active (always 0 for the
    /// standard update).
    pub floored_count: usize,
}

/// `theta <- theta - lr * g`.
pub fn sgd_step(state: &mut OptimizerState, g: &ParamVector, lr: f64) -> Result<()> {
    g.check_dim(state.dim())?;
    let t = state.t.checked_add(1).ok_or(Error::StepOverflow)?;
    for (th, gi) in state.theta.as_mut_slice().iter_mut().zip(g.iter()) {
        *th -= lr * gi;
    }
    if !state.theta.is_finite() {
        return Err(Error::NonFinite("parameters after sgd step".into()));
    }
    state.t = t;
    Ok(())
}

fn bias_correction(beta: f64, t: u64) -> f64 {
    1.0 - beta.powf(t as f64)
}

/// Advances both EMAs with `g` and returns `(m_hat, v_hat)`.
pub fn adam_moments(state: &mut OptimizerState, g: &ParamVector, cfg: &AdamConfig) -> Result<(ParamVector, ParamVector)> {
    g.check_dim(state.dim())?;
    let t = state.t.checked_add(1).ok_or(Error::StepOverflow)?;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for i in 0..g.dim() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    }
    state.t = t;
    let (c1, c2) = (bias_correction(b1, t), bias_correction(b2, t));
    let m_hat = ParamVector::new(state.m.iter().map(|x| x / c1).collect())?;
    let v_hat = ParamVector::new(state.v.iter().map(|x| x / c2).collect())?;
    Ok((m_hat, v_hat))
}

/// `m_hat / (sqrt(v_hat) + gamma)`.
pub fn update_standard(m_hat: &ParamVector, v_hat: &ParamVector, gamma: f64) -> Result<UpdateDirection> {
    v_hat.check_dim(m_hat.dim())?;
    if let Some(bad) = v_hat.iter().find(|&&x| x < 0.0) {
        return Err(Error::invalid(format!("negative second moment {bad}")));
    }
    let delta = m_hat
        .iter()
        .zip(v_hat.iter())
        .map(|(&m, &v)| {
            let denom = v.sqrt() + gamma;
            match (m == 0.0, denom == 0.0) {
                (true, _) => Ok(0.0),
                (false, true) => Err(Error::NonFinite("update with zero denominator".into())),
                (false, false) => Ok(m / denom),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UpdateDirection {
        delta: ParamVector::new(delta)?,
        m_hat: m_hat.clone(),
        v_hat: v_hat.clone(),
        floored_count: 0,
    })
}

/// Noise-variance shift of the raw second-moment EMA after `t` steps,
/// `(1 - beta2^t) (sigma C / B)^2`.
pub fn compute_phi(cfg: &PrivacyConfig, beta2: f64, t: u64) -> Result<f64> {
    if t == 0 {
        return Err(Error::invalid("compute_phi needs t >= 1"));
    }
    Ok(bias_correction(beta2, t) * phi_hat(cfg))
}

/// The same shift on the bias-corrected scale: `(sigma C / B)^2`.
pub fn phi_hat(cfg: &PrivacyConfig) -> f64 {
    let s = cfg.noise_std();
    s * s
}

/// `m_hat / sqrt(max(v_hat - (sigma C / B)^2, gamma'))`.
pub fn update_corrected(
    m_hat: &ParamVector,
    v_hat: &ParamVector,
    cfg: &PrivacyConfig,
    gamma_prime: f64,
) -> Result<UpdateDirection> {
    update_corrected_with(m_hat, v_hat, phi_hat(cfg), gamma_prime)
}

/// Corrected update subtracting an arbitrary `subtract` from `v_hat`.
pub fn update_corrected_with(
    m_hat: &ParamVector,
    v_hat: &ParamVector,
    subtract: f64,
    gamma_prime: f64,
) -> Result<UpdateDirection> {
    v_hat.check_dim(m_hat.dim())?;
    if !(gamma_prime > 0.0) {
        return Err(Error::invalid("gamma' must be > 0"));
    }
    let mut floored_count = 0;
    let delta: Vec<f64> = m_hat
        .iter()
        .zip(v_hat.iter())
        .map(|(&m, &v)| {
            let shifted = v - subtract;
            let denom = if shifted > gamma_prime {
                shifted
            } else {
                floored_count += 1;
                gamma_prime
            };
            m / denom.sqrt()
        })
        .collect();
    Ok(UpdateDirection {
        delta: ParamVector::new(delta)?,
        m_hat: m_hat.clone(),
        v_hat: v_hat.clone(),
        floored_count,
    })
}

/// `theta <- theta - lr * delta`. Does not touch the step counter.
pub fn apply_update(state: &mut OptimizerState, update: &UpdateDirection, lr: f64) -> Result<()> {
    update.delta.check_dim(state.dim())?;
    for (th, d) in state.theta.as_mut_slice().iter_mut().zip(update.delta.iter()) {
        *th -= lr * d;
    }
    if !state.theta.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(())
}

/// One complete Adam step in the configured mode. `subtract` overrides the
/// corrected mode's `(sigma C / B)^2`.
pub fn adam_step(
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &AdamConfig,
    privacy: &PrivacyConfig,
    subtract: Option<f64>,
) -> Result<UpdateDirection> {
    let (m_hat, v_hat) = adam_moments(state, g, cfg)?;
    let update = match cfg.mode {
        AdamMode::Standard | AdamMode::DpBiased => update_standard(&m_hat, &v_hat, cfg.gamma)?,
        AdamMode::DpCorrected => {
            let sub = subtract.unwrap_or_else(|| phi_hat(privacy));
            update_corrected_with(&m_hat, &v_hat, sub, cfg.gamma_prime)?
        }
    };
    apply_update(state, &update, cfg.lr)?;
    Ok(update)
}

const CHECKPOINT_FORMAT: &str = "dpadam-optimizer-state";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    state: OptimizerState,
}

impl OptimizerState {
    /// JSON dump of `(t, m, v, theta)`. Reals are written in shortest
    /// round-trip form, so loading reproduces every bit.
    pub fn to_checkpoint_string(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            state: self.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("optimizer state serializes")
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let st = ck.state;
        let dim = st.theta.dim();
        st.m.check_dim(dim)?;
        st.v.check_dim(dim)?;
        for v in [&st.m, &st.v, &st.theta] {
            ParamVector::new(v.to_vec())?;
        }
        Ok(st)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn snli_privacy() -> PrivacyConfig {
        PrivacyConfig {
            clip_norm: 0.1,
            noise_multiplier: 0.4,
            batch_size: 256,
            dataset_size: 550_000,
            delta: 1e-5,
            target_epsilon: 7.0,
        }
    }

    fn adam(beta1: f64, beta2: f64) -> AdamConfig {
        AdamConfig {
            beta1,
            beta2,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn sgd_examples() {
        let mut st = OptimizerState::new(pv(&[1.0]));
        sgd_step(&mut st, &pv(&[1.0]), 0.5).unwrap();
        assert_eq!(st.theta, pv(&[0.5]));
        sgd_step(&mut st, &pv(&[0.0]), 0.5).unwrap();
        assert_eq!(st.theta, pv(&[0.5]));
        let mut st = OptimizerState::new(pv(&[3.0]));
        sgd_step(&mut st, &pv(&[1.0]), 1.0).unwrap();
        sgd_step(&mut st, &pv(&[1.0]), 1.0).unwrap();
        assert_eq!((st.theta[0], st.t), (1.0, 2));
        assert_eq!(st.m, ParamVector::zeros(1));
        assert!(sgd_step(&mut st, &pv(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn first_step_bias_correction() {
        let mut st = OptimizerState::new(pv(&[0.0]));
        let (m_hat, _) = adam_moments(&mut st, &pv(&[1.0]), &adam(0.9, 0.999)).unwrap();
        assert!((st.m[0] - 0.1).abs() < 1e-16);
        assert_eq!(m_hat[0], 1.0);

        let mut st = OptimizerState::new(pv(&[0.0]));
        let (_, v_hat) = adam_moments(&mut st, &pv(&[2.0]), &adam(0.9, 0.99)).unwrap();
        assert!((st.v[0] - 0.04).abs() < 1e-15);
        assert!((v_hat[0] - 4.0).abs() < 1e-12);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn constant_stream_converges_to_moments() {
        let c = -0.37;
        let mut st = OptimizerState::new(pv(&[0.0]));
        let cfg = adam(0.9, 0.999);
        let mut last = (ParamVector::zeros(1), ParamVector::zeros(1));
        for _ in 0..5000 {
            last = adam_moments(&mut st, &pv(&[c]), &cfg).unwrap();
        }
        assert!((last.0[0] - c).abs() < 1e-9);
        assert!((last.1[0] - c * c).abs() < 1e-9);
    }

    #[test]
    fn step_overflow_is_an_error() {
        let mut st = OptimizerState::new(pv(&[0.0]));
        st.t = u64::MAX;
        assert!(matches!(
            adam_moments(&mut st, &pv(&[1.0]), &adam(0.9, 0.999)),
            Err(Error::StepOverflow)
        ));
    }

    #[test]
    fn standard_update_examples() {
        assert_eq!(update_standard(&pv(&[1.0]), &pv(&[1.0]), 0.0).unwrap().delta, pv(&[1.0]));
        assert_eq!(update_standard(&pv(&[0.0]), &pv(&[3.0]), 1e-8).unwrap().delta, pv(&[0.0]));
        assert_eq!(update_standard(&pv(&[1e-8]), &pv(&[0.0]), 1e-8).unwrap().delta, pv(&[1.0]));
        assert!(update_standard(&pv(&[1.0]), &pv(&[-1.0]), 1e-8).is_err());
    }

    #[test]
    fn phi_examples() {
        let p = snli_privacy();
        let phi = compute_phi(&p, 0.999, 20_000).unwrap();
        assert!((phi - 2.4414e-8).abs() < 5e-13, "phi {phi}");
        let phi1 = compute_phi(&p, 0.999, 1).unwrap();
        assert!((phi1 - 2.44140625e-11).abs() < 1e-22, "phi1 {phi1}");
        let quiet = PrivacyConfig { noise_multiplier: 0.0, ..p };
        for t in [1, 10, 10_000] {
            assert_eq!(compute_phi(&quiet, 0.999, t).unwrap(), 0.0);
        }
        assert!(compute_phi(&p, 0.999, 0).is_err());
    }

    #[test]
    fn corrected_update_examples() {
        // (sigma C / B)^2 = 2.44140625e-8; v_hat - that = 5.859375e-10 < gamma' = 1e-9
        let up = update_corrected(&pv(&[1e-5]), &pv(&[2.5e-8]), &snli_privacy(), 1e-9).unwrap();
        assert!((up.delta[0] - 1e-5 / 1e-9f64.sqrt()).abs() < 1e-12);
        assert!((up.delta[0] - 0.316_227_766).abs() < 1e-8);
        assert_eq!(up.floored_count, 1);

        let quiet = PrivacyConfig {
            noise_multiplier: 0.0,
            ..snli_privacy()
        };
        let m = pv(&[0.3, -2.0]);
        let v = pv(&[0.5, 4.0]);
        let a = update_corrected(&m, &v, &quiet, 1e-300).unwrap();
        assert_eq!(a.delta, update_standard(&m, &v, 0.0).unwrap().delta);
        assert_eq!(a.floored_count, 0);

        let s2 = phi_hat(&snli_privacy());
        let up = update_corrected(&pv(&[1.0]), &pv(&[s2 + 1.0]), &snli_privacy(), 1.0).unwrap();
        assert!((up.delta[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn apply_update_examples() {
        let dir = UpdateDirection {
            delta: pv(&[1.0, 1.0]),
            m_hat: pv(&[0.0, 0.0]),
            v_hat: pv(&[0.0, 0.0]),
            floored_count: 0,
        };
        let mut st = OptimizerState::new(pv(&[1.0, 2.0]));
        apply_update(&mut st, &dir, 0.0).unwrap();
        assert_eq!(st.theta, pv(&[1.0, 2.0]));
        apply_update(&mut st, &dir, 0.001).unwrap();
        assert_eq!(st.theta, pv(&[0.999, 1.999]));
        apply_update(&mut st, &dir, 0.001).unwrap();
        assert!((st.theta[0] - 0.998).abs() < 1e-15);
        let mut small = OptimizerState::new(pv(&[1.0]));
        assert!(apply_update(&mut small, &dir, 1.0).is_err());
    }

    #[test]
    fn corrected_matches_standard_without_noise() {
        let quiet = PrivacyConfig {
            noise_multiplier: 0.0,
            ..snli_privacy()
        };
        let std_cfg = AdamConfig {
            gamma: 0.0,
            mode: AdamMode::Standard,
            ..AdamConfig::default()
        };
        let cor_cfg = AdamConfig {
            gamma_prime: 1e-300,
            mode: AdamMode::DpCorrected,
            ..std_cfg
        };
        let mut a = OptimizerState::new(pv(&[0.5, -0.5, 1.0]));
        let mut b = a.clone();
        for k in 0..100 {
            let x = k as f64;
            let g = pv(&[(x * 0.37).sin(), (x * 0.11).cos() * 0.01, 1.0 + 0.1 * (x * 0.7).sin()]);
            adam_step(&mut a, &g, &std_cfg, &quiet, None).unwrap();
            adam_step(&mut b, &g, &cor_cfg, &quiet, None).unwrap();
        }
        for i in 0..3 {
            assert!((a.theta[i] - b.theta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_format() {
        assert!(OptimizerState::from_checkpoint_str("{}").is_err());
        let st = OptimizerState::new(pv(&[1.0]));
        let s = st.to_checkpoint_string().replace("\"version\": 1", "\"version\": 9");
        assert!(OptimizerState::from_checkpoint_str(&s).is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..16).prop_flat_map(|n| {
            (
                prop::collection::vec(-1e-2f64..1e-2, n),
                prop::collection::vec(0f64..1e-4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn updates_preserve_sign((m, v) in vec_strategy(), gp in 1e-12f64..1e-6) {
            let m = pv(&m);
            let v = pv(&v);
            let p = snli_privacy();
            for up in [update_standard(&m, &v, 1e-8).unwrap(), update_corrected(&m, &v, &p, gp).unwrap()] {
                for (d, mh) in up.delta.iter().zip(m.iter()) {
                    prop_assert_eq!(d.signum() * (d != &0.0) as i32 as f64, mh.signum() * (mh != &0.0) as i32 as f64);
                }
            }
            let cor = update_corrected(&m, &v, &p, gp).unwrap();
            for (d, mh) in cor.delta.iter().zip(m.iter()) {
                prop_assert!(d.abs() <= mh.abs() / gp.sqrt() * (1.0 + 1e-12));
            }
        }

        #[test]
        fn corrected_dominates_biased_above_floor((m, v) in vec_strategy(), gp in 1e-12f64..1e-6) {
            let p = snli_privacy();
            let floor = phi_hat(&p) + gp;
            let v: Vec<f64> = v.iter().map(|x| x + floor * 1.0001).collect();
            let m = pv(&m);
            let v = pv(&v);
            let cor = update_corrected(&m, &v, &p, gp).unwrap();
            let bia = update_standard(&m, &v, 1e-8).unwrap();
            for (c, b) in cor.delta.iter().zip(bia.delta.iter()) {
                prop_assert!(c.abs() >= b.abs());
            }
        }

        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            t in any::<u64>(),
            vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 3..30),
        ) {
            let n = vals.len() / 3;
            let st = OptimizerState {
                t,
                m: pv(&vals[..n]),
                v: pv(&vals[n..2 * n]),
                theta: pv(&vals[2 * n..3 * n]),
            };
            let back = OptimizerState::from_checkpoint_str(&st.to_checkpoint_string()).unwrap();
            let bits = |p: &ParamVector| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(back.t, st.t);
            prop_assert_eq!(bits(&back.m), bits(&st.m));
            prop_assert_eq!(bits(&back.v), bits(&st.v));
            prop_assert_eq!(bits(&back.theta), bits(&st.theta));
        }
    }
}
