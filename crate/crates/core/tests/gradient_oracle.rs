//! Analytic gradients against test-local central differences and a scalar
//! re-evaluation of the MLP forward pass.

use dpadam_core::models::{make_synthetic, Dataset, Labels, SyntheticSpec, SyntheticTask};
use dpadam_core::numerics::{gaussian_vector, stream_id, stream_rng};
use dpadam_core::Model;
use rand::Rng;

mod common;
use common::{central_diff, rel_err};

fn check_model(model: Model, data: &Dataset, scale: f64) {
    let mut rng = stream_rng(99, stream_id(9, model.param_dim() as u64));
    for point in 0..10u64 {
        let theta = gaussian_vector(point + 1, 77, model.param_dim(), scale).unwrap();
        let i = rng.random_range(0..data.len());
        let analytic = model.per_example_grads(&theta, data, &[i]).unwrap().per_example[0].clone();
        let numeric = central_diff(&model, &theta, data, &[i], 1e-5);
        let err = rel_err(analytic.as_slice(), &numeric);
        assert!(err <= 1e-5, "{:?} point {point}: relative error {err:e}", model.kind());
    }
}

fn classification(k: usize) -> Dataset {
    make_synthetic(&SyntheticSpec {
        task: SyntheticTask::Classification { n_classes: k },
        ..SyntheticSpec::classification(64, 5, 3, 0.1)
    })
    .unwrap()
}

#[test]
fn linear_regression_matches_finite_differences() {
    let data = make_synthetic(&SyntheticSpec::regression(64, 5, 3, 0.3)).unwrap();
    check_model(Model::linear_regression(5).unwrap(), &data, 1.0);
}

#[test]
fn binary_logistic_matches_finite_differences() {
    check_model(Model::logistic_regression(5, 2).unwrap(), &classification(2), 1.0);
}

#[test]
fn multiclass_logistic_matches_finite_differences() {
    check_model(Model::logistic_regression(5, 4).unwrap(), &classification(4), 1.0);
}

#[test]
fn mlp_matches_finite_differences() {
    check_model(Model::mlp(5, 6, 3).unwrap(), &classification(3), 0.7);
}

#[test]
fn batch_mean_gradient_is_gradient_of_mean_loss() {
    let data = classification(3);
    let model = Model::mlp(5, 4, 3).unwrap();
    let theta = gaussian_vector(5, 5, model.param_dim(), 0.5).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let mean = model.per_example_grads(&theta, &data, &idx).unwrap().mean().unwrap();
    // linearity against the per-example sum computed here
    let mut sum = vec![0.0; model.param_dim()];
    for &i in &idx {
        let g = model.per_example_grads(&theta, &data, &[i]).unwrap().per_example[0].clone();
        for (s, x) in sum.iter_mut().zip(g.iter()) {
            *s += x;
        }
    }
    let manual: Vec<f64> = sum.iter().map(|s| s / idx.len() as f64).collect();
    assert!(rel_err(mean.as_slice(), &manual) < 1e-12);
    let numeric = central_diff(&model, &theta, &data, &idx, 1e-5);
    assert!(rel_err(mean.as_slice(), &numeric) < 1e-5);
}

/// Cross-entropy of a tanh MLP evaluated one scalar at a time.
fn scalar_mlp_loss(theta: &[f64], x: &[f64], y: usize, d: usize, h: usize, k: usize) -> f64 {
    let w1 = |j: usize, i: usize| theta[j * d + i];
    let b1 = |j: usize| theta[h * d + j];
    let w2 = |c: usize, j: usize| theta[h * d + h + c * h + j];
    let b2 = |c: usize| theta[h * d + h + k * h + c];
    let mut hidden = vec![0.0; h];
    for j in 0..h {
        let mut pre = b1(j);
        for i in 0..d {
            pre += w1(j, i) * x[i];
        }
        hidden[j] = pre.tanh();
    }
    let mut logits = vec![0.0; k];
    for c in 0..k {
        let mut z = b2(c);
        for j in 0..h {
            z += w2(c, j) * hidden[j];
        }
        logits[c] = z;
    }
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

#[test]
fn mlp_loss_matches_scalar_recomputation() {
    let (d, h, k) = (5, 7, 3);
    let data = classification(k);
    let model = Model::mlp(d, h, k).unwrap();
    let theta = gaussian_vector(11, 3, model.param_dim(), 0.8).unwrap();
    let idx: Vec<usize> = (10..18).collect();
    let Labels::Classes { labels, .. } = data.labels() else {
        panic!("classification data")
    };
    let expected: f64 = idx
        .iter()
        .map(|&i| scalar_mlp_loss(theta.as_slice(), data.row(i), labels[i], d, h, k))
        .sum::<f64>()
        / idx.len() as f64;
    let got = model.loss(&theta, &data, &idx).unwrap();
    assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{got} vs {expected}");
}

#[test]
fn library_finite_differences_agree_with_local_oracle() {
    let data = classification(2);
    let model = Model::logistic_regression(5, 2).unwrap();
    let theta = gaussian_vector(2, 2, 5, 1.0).unwrap();
    let lib = model.finite_diff_grad(&theta, &data, &[0, 1, 2], 1e-5).unwrap();
    let local = central_diff(&model, &theta, &data, &[0, 1, 2], 1e-5);
    assert!(rel_err(lib.as_slice(), &local) < 1e-9);
}
