//! Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP at integer order `a` comes from the binomial expansion
//!
//! ```text
//! A_a = sum_{k=0}^{a} C(a, k) (1 - q)^(a - k) q^k exp((k^2 - k) / (2 sigma^2))
//! eps_a = ln(A_a) / (a - 1)
//! ```
//!
//! evaluated with log-sum-exp. For fractional orders the subsampled value is
//! bounded by the value at the next integer order (RDP is nondecreasing in
//! the order); without subsampling the exact `a / (2 sigma^2)` is used.
//! Conversion to `(eps, delta)` is the standard
//! `eps = min_a [ rdp(a) + ln(1 / delta) / (a - 1) ]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privatizer::PrivacyConfig;

/// Default order grid: a few fractional orders below 4, every integer
/// 2..=64, then a coarse tail up to 512.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75, 2.5, 3.5];
    orders.extend((2..=64).map(f64::from));
    orders.extend([72.0, 80.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0]);
    orders.sort_by(f64::total_cmp);
    orders
}

/// RDP of the Gaussian mechanism with sensitivity 1 and noise std `sigma`.
pub fn rdp_gaussian(alpha: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::invalid(format!("Renyi order must be > 1, got {alpha}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("noise multiplier must be > 0 for RDP"));
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP of the Poisson-subsampled Gaussian mechanism at integer order `alpha`.
pub fn rdp_subsampled_gaussian(alpha: u32, sigma: f64, q: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::invalid("integer Renyi order must be >= 2"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("noise multiplier must be > 0 for RDP"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must be in (0, 1], got {q}")));
    }
    if q == 1.0 {
        return rdp_gaussian(f64::from(alpha), sigma);
    }
    let a = f64::from(alpha);
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let mut log_a = f64::NEG_INFINITY;
    let mut log_binom = 0.0;
    for k in 0..=alpha {
        let kf = f64::from(k);
        if k > 0 {
            log_binom += (a - kf + 1.0).ln() - kf.ln();
        }
        let term = log_binom + (a - kf) * ln_1mq + kf * ln_q + (kf * kf - kf) / (2.0 * sigma * sigma);
        log_a = log_add_exp(log_a, term);
    }
    // log_a >= 0 mathematically; round-off can push it slightly below.
    Ok(log_a.max(0.0) / (a - 1.0))
}

/// Per-step RDP of one subsampled Gaussian invocation on every order in `orders`.
pub fn subsampled_gaussian_curve(orders: &[f64], sigma: f64, q: f64) -> Result<Vec<f64>> {
    orders
        .iter()
        .map(|&a| {
            if q == 1.0 {
                rdp_gaussian(a, sigma)
            } else if a <= 1.0 {
                Err(Error::invalid(format!("Renyi order must be > 1, got {a}")))
            } else {
                let int_order = a.ceil().max(2.0) as u32;
                rdp_subsampled_gaussian(int_order, sigma, q)
            }
        })
        .collect()
}

/// Accumulated RDP per order over composed mechanism invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpLedger {
    orders: Vec<f64>,
    totals: Vec<f64>,
    steps: u64,
}

/// `(eps, delta)` guarantee and the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
    pub best_order: f64,
}

impl Default for RdpLedger {
    fn default() -> Self {
        Self::new(default_orders()).expect("default grid is valid")
    }
}

impl RdpLedger {
    pub fn new(orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::invalid("ledger needs at least one order"));
        }
        if orders.iter().any(|&a| !(a > 1.0) || !a.is_finite()) || orders.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("orders must be finite, > 1 and strictly increasing"));
        }
        let totals = vec![0.0; orders.len()];
        Ok(Self {
            orders,
            totals,
            steps: 0,
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn totals(&self) -> &[f64] {
        &self.totals
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adds `steps` invocations of a mechanism with per-order RDP `per_step`.
    pub fn compose(&self, per_step: &[f64], steps: u64) -> Result<Self> {
        if per_step.len() != self.orders.len() {
            return Err(Error::ShapeMismatch {
                expected: self.orders.len(),
                got: per_step.len(),
            });
        }
        if per_step.iter().any(|&r| !(r >= 0.0)) {
            return Err(Error::invalid("per-step RDP must be >= 0"));
        }
        let mut next = self.clone();
        if steps == 0 {
            return Ok(next);
        }
        for (t, r) in next.totals.iter_mut().zip(per_step) {
            *t += steps as f64 * r;
        }
        next.steps = self.steps.checked_add(steps).ok_or(Error::StepOverflow)?;
        Ok(next)
    }

    pub fn to_epsilon(&self, delta: f64) -> Result<PrivacySpend> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta must be in (0, 1)"));
        }
        let log_inv_delta = -delta.ln();
        let (mut epsilon, mut best_order) = (f64::INFINITY, self.orders[0]);
        for (&a, &total) in self.orders.iter().zip(&self.totals) {
            let eps = total + log_inv_delta / (a - 1.0);
            if eps < epsilon {
                epsilon = eps;
                best_order = a;
            }
        }
        Ok(PrivacySpend {
            epsilon: epsilon.max(0.0),
            delta,
            best_order,
        })
    }

    /// Plain-text audit dump, one `order total` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# rdp-ledger v1\n");
        writeln!(s, "steps {}", self.steps).unwrap();
        for (a, t) in self.orders.iter().zip(&self.totals) {
            writeln!(s, "{a} {t}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            path: "<ledger>".into(),
            line: line as u64 + 1,
            msg: msg.into(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, "# rdp-ledger v1")) => {}
            Some((i, _)) => return Err(bad(i, "missing ledger header")),
            None => return Err(bad(0, "empty ledger")),
        }
        let steps = match lines.next() {
            Some((i, l)) => l
                .strip_prefix("steps ")
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| bad(i, "expected `steps <n>`"))?,
            None => return Err(bad(1, "missing steps line")),
        };
        let (mut orders, mut totals) = (Vec::new(), Vec::new());
        for (i, l) in lines {
            let mut parts = l.split_whitespace();
            let (Some(a), Some(t), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(i, "expected `<order> <total>`"));
            };
            orders.push(a.parse::<f64>().map_err(|_| bad(i, "bad order"))?);
            totals.push(t.parse::<f64>().map_err(|_| bad(i, "bad total"))?);
        }
        let mut ledger = Self::new(orders)?;
        if totals.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::invalid("ledger totals must be >= 0"));
        }
        ledger.totals = totals;
        ledger.steps = steps;
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Privacy spent after `steps` steps of DP-SGD/Adam under `cfg`.
pub fn epsilon_after(cfg: &PrivacyConfig, steps: u64) -> Result<PrivacySpend> {
    let ledger = RdpLedger::default();
    let curve = subsampled_gaussian_curve(ledger.orders(), cfg.noise_multiplier, cfg.sampling_rate())?;
    ledger.compose(&curve, steps)?.to_epsilon(cfg.delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetStatus {
    /// At least one step fits in the budget.
    Ok,
    /// A single step already exceeds the target epsilon.
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBudget {
    pub steps: u64,
    pub status: BudgetStatus,
}

/// Cap on the exponential search; budgets this loose are reported as the cap.
const MAX_STEP_SEARCH: u64 = 1 << 40;

/// Largest `T` with `eps(T) <= target_epsilon`.
pub fn max_steps(cfg: &PrivacyConfig) -> Result<StepBudget> {
    cfg.validate()?;
    if !(cfg.target_epsilon > 0.0) {
        return Err(Error::invalid("target epsilon must be > 0"));
    }
    let exhausted = StepBudget {
        steps: 0,
        status: BudgetStatus::Exhausted,
    };
    if cfg.noise_multiplier == 0.0 {
        return Ok(exhausted);
    }
    let ledger = RdpLedger::default();
    let curve = subsampled_gaussian_curve(ledger.orders(), cfg.noise_multiplier, cfg.sampling_rate())?;
    let fits = |t: u64| -> Result<bool> { Ok(ledger.compose(&curve, t)?.to_epsilon(cfg.delta)?.epsilon <= cfg.target_epsilon) };
    if !fits(1)? {
        return Ok(exhausted);
    }
    // exponential search for an upper bound, then bisection on [lo, hi)
    let mut lo = 1;
    let mut hi = 2;
    while fits(hi)? {
        lo = hi;
        if hi >= MAX_STEP_SEARCH {
            return Ok(StepBudget {
                steps: hi,
                status: BudgetStatus::Ok,
            });
        }
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(StepBudget {
        steps: lo,
        status: BudgetStatus::Ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(sigma: f64, b: usize, n: usize, eps: f64) -> PrivacyConfig {
        PrivacyConfig {
            clip_norm: 1.0,
            noise_multiplier: sigma,
            batch_size: b,
            dataset_size: n,
            delta: 1e-5,
            target_epsilon: eps,
        }
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(rdp_gaussian(2.0, 1.0).unwrap(), 1.0);
        assert!(rdp_gaussian(2.0, 1e12).unwrap() < 1e-23);
        let a = rdp_gaussian(7.5, 0.8).unwrap();
        let b = rdp_gaussian(7.5, 1.6).unwrap();
        assert!((a - 4.0 * b).abs() < 1e-15);
        assert!(rdp_gaussian(1.0, 1.0).is_err());
        assert!(rdp_gaussian(0.5, 1.0).is_err());
    }

    #[test]
    fn subsampled_full_rate_matches_gaussian() {
        for alpha in [2, 3, 10, 64, 512] {
            for sigma in [0.5, 1.0, 3.0] {
                let s = rdp_subsampled_gaussian(alpha, sigma, 1.0).unwrap();
                let g = rdp_gaussian(f64::from(alpha), sigma).unwrap();
                assert!((s - g).abs() < 1e-10);
            }
        }
        // the binomial sum itself, just below q = 1
        let near = rdp_subsampled_gaussian(8, 2.0, 1.0 - 1e-12).unwrap();
        assert!((near - rdp_gaussian(8.0, 2.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn subsampled_rejects_bad_rate() {
        assert!(rdp_subsampled_gaussian(4, 1.0, 0.0).is_err());
        assert!(rdp_subsampled_gaussian(4, 1.0, 1.5).is_err());
        assert!(rdp_subsampled_gaussian(1, 1.0, 0.5).is_err());
    }

    #[test]
    fn subsampled_vanishes_monotonically_as_rate_drops() {
        let mut prev = f64::INFINITY;
        for q in [1.0, 0.5, 0.1, 1e-2, 1e-3, 1e-4, 1e-6] {
            let r = rdp_subsampled_gaussian(16, 1.5, q).unwrap();
            assert!(r <= prev && r.is_finite());
            prev = r;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn composition_is_additive() {
        let l = RdpLedger::default();
        let curve = subsampled_gaussian_curve(l.orders(), 1.1, 0.01).unwrap();
        let twice = l.compose(&curve, 50).unwrap().compose(&curve, 50).unwrap();
        let once = l.compose(&curve, 100).unwrap();
        assert_eq!(twice.steps(), once.steps());
        for (a, b) in twice.totals().iter().zip(once.totals()) {
            assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
        }
        for (t, r) in once.totals().iter().zip(&curve) {
            assert!((t - 100.0 * r).abs() <= 1e-12 * t.max(1e-300));
        }
        assert_eq!(l.compose(&curve, 0).unwrap(), l);
        assert!(l.compose(&curve[1..], 1).is_err());
    }

    #[test]
    fn dense_grid_single_gaussian_step() {
        // minimizer of a/2 + ln(1e5)/(a - 1) is a = 1 + sqrt(2 ln 1e5)
        let mut oracle = f64::INFINITY;
        let mut a = 1.001;
        while a <= 200.0 {
            oracle = oracle.min(a / 2.0 + 1e5f64.ln() / (a - 1.0));
            a += 0.001;
        }
        assert!((oracle - 5.2986).abs() < 1e-3, "oracle {oracle}");
        let l = RdpLedger::default();
        let curve = subsampled_gaussian_curve(l.orders(), 1.0, 1.0).unwrap();
        let spend = l.compose(&curve, 1).unwrap().to_epsilon(1e-5).unwrap();
        assert!((spend.epsilon / oracle - 1.0).abs() < 5e-3, "eps {}", spend.epsilon);
        assert_eq!(spend.best_order, 6.0);
    }

    #[test]
    fn zero_ledger_epsilon() {
        let l = RdpLedger::default();
        let spend = l.to_epsilon(1e-5).unwrap();
        assert!((spend.epsilon - 1e5f64.ln() / 511.0).abs() < 1e-15);
        assert_eq!(spend.best_order, 512.0);
    }

    #[test]
    fn extending_the_grid_never_raises_epsilon() {
        let small = RdpLedger::new((2..=16).map(f64::from).collect()).unwrap();
        let big = RdpLedger::default();
        let spend = |l: &RdpLedger| {
            let c = subsampled_gaussian_curve(l.orders(), 0.9, 0.02).unwrap();
            l.compose(&c, 3000).unwrap().to_epsilon(1e-5).unwrap().epsilon
        };
        assert!(spend(&big) <= spend(&small));
    }

    #[test]
    fn max_steps_edges() {
        let tiny = cfg(1.0, 100, 10_000, 0.01);
        assert_eq!(
            max_steps(&tiny).unwrap(),
            StepBudget {
                steps: 0,
                status: BudgetStatus::Exhausted
            }
        );
        let base = cfg(0.8, 100, 10_000, 3.0);
        let t1 = max_steps(&base).unwrap().steps;
        let t2 = max_steps(&PrivacyConfig {
            noise_multiplier: 1.6,
            ..base
        })
        .unwrap()
        .steps;
        assert!(t1 > 0 && t2 >= t1);
        let spend = epsilon_after(&base, t1).unwrap().epsilon;
        assert!(spend <= 3.0);
        assert!(epsilon_after(&base, t1 + 1).unwrap().epsilon > 3.0);
    }

    #[test]
    fn ledger_text_round_trip() {
        let l = RdpLedger::default();
        let c = subsampled_gaussian_curve(l.orders(), 1.3, 0.004).unwrap();
        let l = l.compose(&c, 1234).unwrap();
        assert_eq!(RdpLedger::from_text(&l.to_text()).unwrap(), l);
        assert!(RdpLedger::from_text("steps 3\n2 0.1\n").is_err());
        assert!(RdpLedger::from_text("# rdp-ledger v1\nsteps 3\n2 x\n").is_err());
    }

    proptest! {
        #[test]
        fn subsampling_never_exceeds_full_rate(alpha in 2u32..128, sigma in 0.3f64..5.0, q in 1e-6f64..1.0) {
            let s = rdp_subsampled_gaussian(alpha, sigma, q).unwrap();
            let g = rdp_gaussian(f64::from(alpha), sigma).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert!(s <= g * (1.0 + 1e-12));
        }

        #[test]
        fn ledger_text_round_trips_exact(steps in 0u64..1_000_000, sigma in 0.5f64..4.0, q in 1e-4f64..0.5) {
            let l = RdpLedger::default();
            let c = subsampled_gaussian_curve(l.orders(), sigma, q).unwrap();
            let l = l.compose(&c, steps).unwrap();
            let back = RdpLedger::from_text(&l.to_text()).unwrap();
            prop_assert_eq!(back, l);
        }
    }
}
