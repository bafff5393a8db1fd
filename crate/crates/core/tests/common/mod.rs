#![allow(dead_code)]

use std::sync::Arc;

use implicitreg_core::{
    Activation, Dataset, GaussianClusters, MlpArch, Model, ParamVector, QuadraticEnsemble,
};

pub fn quadratic(n: usize, dim: usize, seed: u64) -> Model<f64> {
    Model::quadratic(QuadraticEnsemble::random(n, dim, seed).unwrap())
}

pub fn clusters(n: usize, dim: usize, seed: u64) -> Arc<Dataset<f64>> {
    let task = GaussianClusters::new(dim, 2, 2, 1.5, 0.6, 0.0, seed).unwrap();
    Arc::new(task.sample(n, seed.wrapping_add(1)).unwrap())
}

pub fn tanh_mlp(n: usize, hidden: usize, seed: u64) -> Model<f64> {
    let arch = MlpArch::new(vec![3, hidden, 2], Activation::Tanh).unwrap();
    Model::mlp(arch, clusters(n, 3, seed)).unwrap()
}

pub fn logistic(n: usize, seed: u64) -> Model<f64> {
    Model::logistic(clusters(n, 3, seed)).unwrap()
}

/// One instance of each smooth model kind over `n` examples.
pub fn smooth_models(n: usize, seed: u64) -> Vec<(&'static str, Model<f64>)> {
    vec![
        ("quadratic", quadratic(n, 4, seed)),
        ("logistic", logistic(n, seed)),
        ("tanh_mlp", tanh_mlp(n, 5, seed)),
    ]
}

/// Central differences of `f` at `w`.
pub fn fd_grad(
    w: &ParamVector<f64>,
    h: f64,
    f: impl Fn(&ParamVector<f64>) -> f64,
) -> ParamVector<f64> {
    let mut out = ParamVector::zeros(w.dim());
    for i in 0..w.dim() {
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus[i] += h;
        minus[i] -= h;
        out[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

/// `max|a - b| / max|b|`.
pub fn rel_err(a: &ParamVector<f64>, b: &ParamVector<f64>) -> f64 {
    let scale = b.max_abs();
    let diff = a.sub(b).max_abs();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
