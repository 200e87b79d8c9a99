//! Small analytic-gradient models over in-memory datasets.
//!
//! Parameter layouts (row-major throughout):
//! - linear regression: `w` (d); loss `(w.x - y)^2 / 2`
//! - logistic regression, 2 classes: `w` (d); class 1 iff `w.x > 0`
//! - logistic regression, k > 2 classes: `W` (k x d), softmax cross-entropy
//! - one-hidden-layer MLP: `W1` (h x d), `b1` (h), `W2` (k x h), `b2` (k);
//!   tanh hidden activation, softmax cross-entropy over k >= 2 logits
//!
//! There are no bias terms in the linear models.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_vector, stream_id, stream_rng, streams, ParamVector};

/// Targets of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes { labels: Vec<usize>, n_classes: usize },
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { labels, .. } => labels.len(),
            Labels::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Features (N x d, row-major) with matching labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n: usize,
    d: usize,
    labels: Labels,
}

impl Dataset {
    pub fn new(features: Vec<f64>, d: usize, labels: Labels) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("dataset feature dimension must be >= 1"));
        }
        if features.len() % d != 0 {
            return Err(Error::invalid("feature buffer length is not a multiple of d"));
        }
        let n = features.len() / d;
        if n != labels.len() {
            return Err(Error::invalid(format!(
                "feature rows ({n}) do not match label count ({})",
                labels.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        if let Labels::Classes { labels, n_classes } = &labels {
            if *n_classes < 2 {
                return Err(Error::invalid("classification needs at least 2 classes"));
            }
            if labels.iter().any(|&y| y >= *n_classes) {
                return Err(Error::invalid("class label out of range"));
            }
        }
        if let Labels::Targets(t) = &labels {
            if t.iter().any(|y| !y.is_finite()) {
                return Err(Error::NonFinite("dataset targets".into()));
            }
        }
        Ok(Self {
            features,
            n,
            d,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_features(&self) -> usize {
        self.d
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.labels {
            Labels::Classes { n_classes, .. } => Some(*n_classes),
            Labels::Targets(_) => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    fn class(&self, i: usize) -> usize {
        match &self.labels {
            Labels::Classes { labels, .. } => labels[i],
            Labels::Targets(_) => unreachable!("class() on regression data"),
        }
    }

    fn target(&self, i: usize) -> f64 {
        match &self.labels {
            Labels::Targets(t) => t[i],
            Labels::Classes { labels, .. } => labels[i] as f64,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        self.check_indices(indices)?;
        let mut features = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Classes { labels, n_classes } => Labels::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Labels::Targets(t) => Labels::Targets(indices.iter().map(|&i| t[i]).collect()),
        };
        Ok(Self {
            features,
            n: indices.len(),
            d: self.d,
            labels,
        })
    }

    /// Seeded shuffle split into `(train, held_out)`; the held-out part gets
    /// `round(n * held_out_fraction)` examples.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::invalid("held-out fraction must be in [0, 1)"));
        }
        let mut order: Vec<usize> = (0..self.n).collect();
        let mut rng = stream_rng(seed, stream_id(streams::SPLIT, 0));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n_eval = (self.n as f64 * held_out_fraction).round() as usize;
        let (eval_idx, train_idx) = order.split_at(n_eval);
        Ok((self.subset(train_idx)?, self.subset(eval_idx)?))
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        match indices.iter().find(|&&i| i >= self.n) {
            Some(i) => Err(Error::invalid(format!(
                "example index {i} out of range for dataset of {}",
                self.n
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    #[serde(rename = "mlp-1-hidden", alias = "mlp")]
    Mlp,
}

/// Model architecture. Parameters live outside, in a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Model {
    kind: ModelKind,
    n_features: usize,
    n_classes: usize,
    hidden: usize,
}

impl Model {
    pub fn linear_regression(n_features: usize) -> Result<Self> {
        Self::build(ModelKind::LinearRegression, n_features, 1, 0)
    }

    pub fn logistic_regression(n_features: usize, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid("logistic regression needs >= 2 classes"));
        }
        Self::build(ModelKind::LogisticRegression, n_features, n_classes, 0)
    }

    pub fn mlp(n_features: usize, hidden: usize, n_classes: usize) -> Result<Self> {
        if n_classes < 2 || hidden == 0 {
            return Err(Error::invalid("mlp needs hidden >= 1 and >= 2 classes"));
        }
        Self::build(ModelKind::Mlp, n_features, n_classes, hidden)
    }

    fn build(kind: ModelKind, n_features: usize, n_classes: usize, hidden: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::invalid("model needs n_features >= 1"));
        }
        Ok(Self {
            kind,
            n_features,
            n_classes,
            hidden,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != ModelKind::LinearRegression
    }

    pub fn param_dim(&self) -> usize {
        let (d, k, h) = (self.n_features, self.n_classes, self.hidden);
        match self.kind {
            ModelKind::LinearRegression => d,
            ModelKind::LogisticRegression if k == 2 => d,
            ModelKind::LogisticRegression => k * d,
            ModelKind::Mlp => h * d + h + k * h + k,
        }
    }

    /// Activation used by the hidden layer, recorded in run metadata.
    pub fn activation(&self) -> Option<&'static str> {
        (self.kind == ModelKind::Mlp).then_some("tanh")
    }

    fn check(&self, theta: &ParamVector, data: &Dataset, indices: &[usize]) -> Result<()> {
        theta.check_dim(self.param_dim())?;
        if data.n_features() != self.n_features {
            return Err(Error::ShapeMismatch {
                expected: self.n_features,
                got: data.n_features(),
            });
        }
        match (self.is_classifier(), data.n_classes()) {
            (true, Some(k)) if k == self.n_classes => {}
            (true, Some(k)) => {
                return Err(Error::invalid(format!(
                    "model has {} classes, data has {k}",
                    self.n_classes
                )))
            }
            (true, None) => return Err(Error::invalid("classifier given regression targets")),
            (false, _) => {}
        }
        data.check_indices(indices)
    }

    /// Loss of a single example and, when `grad` is given, its gradient
    /// (written into `grad`, which must be zeroed by the caller).
    fn example_loss(&self, theta: &[f64], data: &Dataset, i: usize, grad: Option<&mut [f64]>) -> f64 {
        let x = data.row(i);
        let d = self.n_features;
        match self.kind {
            ModelKind::LinearRegression => {
                let r = dot(theta, x) - data.target(i);
                if let Some(g) = grad {
                    axpy(g, r, x);
                }
                0.5 * r * r
            }
            ModelKind::LogisticRegression if self.n_classes == 2 => {
                let z = dot(theta, x);
                let y = data.class(i) as f64;
                if let Some(g) = grad {
                    axpy(g, sigmoid(z) - y, x);
                }
                softplus(z) - y * z
            }
            ModelKind::LogisticRegression => {
                let k = self.n_classes;
                let y = data.class(i);
                let logits: Vec<f64> = (0..k).map(|c| dot(&theta[c * d..(c + 1) * d], x)).collect();
                let (probs, lse) = softmax(&logits);
                if let Some(g) = grad {
                    for c in 0..k {
                        let coef = probs[c] - if c == y { 1.0 } else { 0.0 };
                        axpy(&mut g[c * d..(c + 1) * d], coef, x);
                    }
                }
                lse - logits[y]
            }
            ModelKind::Mlp => self.mlp_loss(theta, x, data.class(i), grad),
        }
    }

    fn mlp_loss(&self, theta: &[f64], x: &[f64], y: usize, grad: Option<&mut [f64]>) -> f64 {
        let (d, h, k) = (self.n_features, self.hidden, self.n_classes);
        let (w1, rest) = theta.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(k * h);
        let act: Vec<f64> = (0..h)
            .map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh())
            .collect();
        let logits: Vec<f64> = (0..k).map(|c| dot(&w2[c * h..(c + 1) * h], &act) + b2[c]).collect();
        let (probs, lse) = softmax(&logits);
        if let Some(g) = grad {
            let (gw1, rest) = g.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(k * h);
            let mut d_act = vec![0.0; h];
            for c in 0..k {
                let dl = probs[c] - if c == y { 1.0 } else { 0.0 };
                gb2[c] += dl;
                axpy(&mut gw2[c * h..(c + 1) * h], dl, &act);
                axpy(&mut d_act, dl, &w2[c * h..(c + 1) * h]);
            }
            for j in 0..h {
                let d_pre = d_act[j] * (1.0 - act[j] * act[j]);
                gb1[j] += d_pre;
                axpy(&mut gw1[j * d..(j + 1) * d], d_pre, x);
            }
        }
        lse - logits[y]
    }

    /// Class scores for example `i` (length `n_classes`).
    fn scores(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.n_features;
        match self.kind {
            ModelKind::LinearRegression => vec![dot(theta, x)],
            ModelKind::LogisticRegression if self.n_classes == 2 => vec![0.0, dot(theta, x)],
            ModelKind::LogisticRegression => (0..self.n_classes)
                .map(|c| dot(&theta[c * d..(c + 1) * d], x))
                .collect(),
            ModelKind::Mlp => {
                let (h, k) = (self.hidden, self.n_classes);
                let (w1, rest) = theta.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                let act: Vec<f64> = (0..h)
                    .map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh())
                    .collect();
                (0..k).map(|c| dot(&w2[c * h..(c + 1) * h], &act) + b2[c]).collect()
            }
        }
    }

    /// Mean per-example loss over `indices`.
    pub fn loss(&self, theta: &ParamVector, data: &Dataset, indices: &[usize]) -> Result<f64> {
        self.check(theta, data, indices)?;
        if indices.is_empty() {
            return Err(Error::invalid("loss over an empty index set"));
        }
        let total: f64 = indices
            .iter()
            .map(|&i| self.example_loss(theta, data, i, None))
            .sum();
        Ok(total / indices.len() as f64)
    }

    /// Mean loss over the whole dataset.
    pub fn full_loss(&self, theta: &ParamVector, data: &Dataset) -> Result<f64> {
        let all: Vec<usize> = (0..data.len()).collect();
        self.loss(theta, data, &all)
    }

    /// Analytic gradient of each example's loss.
    pub fn per_example_grads(&self, theta: &ParamVector, data: &Dataset, indices: &[usize]) -> Result<GradientBatch> {
        self.check(theta, data, indices)?;
        let p = self.param_dim();
        let per_example = indices
            .iter()
            .map(|&i| {
                let mut g = vec![0.0; p];
                self.example_loss(theta, data, i, Some(&mut g));
                ParamVector::from_raw(g)
            })
            .collect();
        Ok(GradientBatch {
            per_example,
            batch_indices: indices.to_vec(),
        })
    }

    /// Central-difference gradient of the mean loss over `indices`.
    pub fn finite_diff_grad(&self, theta: &ParamVector, data: &Dataset, indices: &[usize], h: f64) -> Result<ParamVector> {
        if !(h > 0.0) {
            return Err(Error::invalid("finite difference step must be > 0"));
        }
        let mut probe = theta.clone();
        let mut out = Vec::with_capacity(theta.dim());
        for j in 0..theta.dim() {
            let base = theta[j];
            probe.as_mut_slice()[j] = base + h;
            let up = self.loss(&probe, data, indices)?;
            probe.as_mut_slice()[j] = base - h;
            let down = self.loss(&probe, data, indices)?;
            probe.as_mut_slice()[j] = base;
            out.push((up - down) / (2.0 * h));
        }
        Ok(ParamVector::from_raw(out))
    }

    /// Predicted class for one feature row; ties go to the lowest index.
    pub fn predict(&self, theta: &ParamVector, x: &[f64]) -> usize {
        let scores = self.scores(theta, x);
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = c;
            }
        }
        best
    }

    /// Fraction of examples whose argmax prediction matches the label.
    pub fn accuracy(&self, theta: &ParamVector, data: &Dataset) -> Result<f64> {
        if !self.is_classifier() {
            return Err(Error::invalid("accuracy is undefined for regression models"));
        }
        self.check(theta, data, &[])?;
        if data.is_empty() {
            return Err(Error::invalid("accuracy over an empty dataset"));
        }
        let correct = (0..data.len())
            .filter(|&i| self.predict(theta, data.row(i)) == data.class(i))
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Gaussian initial parameters with standard deviation `scale`.
    pub fn init_params(&self, seed: u64, scale: f64) -> Result<ParamVector> {
        gaussian_vector(seed, stream_id(streams::INIT, 0), self.param_dim(), scale)
    }
}

/// Per-example gradients for one sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub per_example: Vec<ParamVector>,
    pub batch_indices: Vec<usize>,
}

impl GradientBatch {
    pub fn empty() -> Self {
        Self {
            per_example: Vec::new(),
            batch_indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.per_example.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_example.is_empty()
    }

    /// Plain mean of the per-example gradients.
    pub fn mean(&self) -> Option<ParamVector> {
        let first = self.per_example.first()?;
        let rows: Vec<&[f64]> = self.per_example.iter().map(|g| g.as_slice()).collect();
        let sum = crate::numerics::pairwise_sum(&rows, first.dim());
        let n = self.len() as f64;
        Some(ParamVector::from_raw(sum.into_iter().map(|x| x / n).collect()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Softmax probabilities and log-sum-exp of `logits`.
fn softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / sum).collect(), max + sum.ln())
}

/// Which kind of synthetic data to generate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticTask {
    Classification { n_classes: usize },
    Regression,
}

/// Generative process for synthetic data.
///
/// Latent points `z ~ N(0, I_d)`. Classification labels come from a random
/// linear teacher (`argmax W z`, or `w.z > 0` for two classes); points whose
/// top score gap is below `margin` are redrawn, so with `noise = 0` the data
/// is linearly separable with that margin. `noise` is then the probability of
/// replacing a label with a uniformly random other class. Regression targets
/// are `w.z + noise * N(0, 1)`.
///
/// Observed features are `x_j = z_j * 10^(-feature_decades * j / (d - 1))`:
/// the feature scales span `feature_decades` orders of magnitude, which makes
/// per-coordinate step-size adaptation matter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub noise: f64,
    pub margin: f64,
    pub feature_decades: f64,
}

impl SyntheticSpec {
    pub fn classification(n: usize, d: usize, seed: u64, noise: f64) -> Self {
        Self {
            task: SyntheticTask::Classification { n_classes: 2 },
            n,
            d,
            seed,
            noise,
            margin: 0.1,
            feature_decades: 0.0,
        }
    }

    pub fn regression(n: usize, d: usize, seed: u64, noise: f64) -> Self {
        Self {
            task: SyntheticTask::Regression,
            ..Self::classification(n, d, seed, noise)
        }
    }

    pub fn feature_scales(&self) -> Vec<f64> {
        let d = self.d;
        (0..d)
            .map(|j| {
                let frac = if d > 1 { j as f64 / (d - 1) as f64 } else { 0.0 };
                10f64.powf(-self.feature_decades * frac)
            })
            .collect()
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec { n, d, noise, margin, .. } = *spec;
    if n == 0 || d == 0 {
        return Err(Error::invalid("synthetic data needs N >= 1 and d >= 1"));
    }
    if !(noise >= 0.0) || !(margin >= 0.0) {
        return Err(Error::invalid("noise and margin must be >= 0"));
    }
    let mut rng = stream_rng(spec.seed, stream_id(streams::DATA, 0));
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let scales = spec.feature_scales();
    let mut features = Vec::with_capacity(n * d);
    let labels = match spec.task {
        SyntheticTask::Regression => {
            let w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let mut targets = Vec::with_capacity(n);
            for _ in 0..n {
                let z: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                targets.push(dot(&w, &z) + noise * normal(&mut rng));
                features.extend(z.iter().zip(&scales).map(|(z, s)| z * s));
            }
            Labels::Targets(targets)
        }
        SyntheticTask::Classification { n_classes } => {
            if n_classes < 2 {
                return Err(Error::invalid("classification needs >= 2 classes"));
            }
            if noise > 1.0 {
                return Err(Error::invalid("label noise is a probability"));
            }
            // Two classes use a single unit-norm direction; k classes use k rows.
            let rows = if n_classes == 2 { 1 } else { n_classes };
            let mut teacher: Vec<f64> = (0..rows * d).map(|_| normal(&mut rng)).collect();
            for r in 0..rows {
                let row = &mut teacher[r * d..(r + 1) * d];
                let norm = crate::numerics::l2_norm(row);
                row.iter_mut().for_each(|w| *w /= norm);
            }
            let mut labels = Vec::with_capacity(n);
            while labels.len() < n {
                let z: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                let (label, gap) = if n_classes == 2 {
                    let s = dot(&teacher, &z);
                    (usize::from(s > 0.0), s.abs())
                } else {
                    let scores: Vec<f64> = (0..rows).map(|r| dot(&teacher[r * d..(r + 1) * d], &z)).collect();
                    top_two_gap(&scores)
                };
                if gap < margin {
                    continue;
                }
                let label = if noise > 0.0 && rng.random::<f64>() < noise {
                    (label + rng.random_range(1..n_classes)) % n_classes
                } else {
                    label
                };
                labels.push(label);
                features.extend(z.iter().zip(&scales).map(|(z, s)| z * s));
            }
            Labels::Classes { labels, n_classes }
        }
    };
    Dataset::new(features, d, labels)
}

/// Parameters that fit noise-free regression data from `spec` exactly.
pub fn regression_teacher(spec: &SyntheticSpec) -> Option<ParamVector> {
    if spec.task != SyntheticTask::Regression || spec.d == 0 {
        return None;
    }
    let mut rng = stream_rng(spec.seed, stream_id(streams::DATA, 0));
    let w: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let theta = w.iter().zip(spec.feature_scales()).map(|(w, s)| w / s).collect();
    Some(ParamVector::from_raw(theta))
}

fn top_two_gap(scores: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for c in 1..scores.len() {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    let second = scores
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != best)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    (best, scores[best] - second)
}
