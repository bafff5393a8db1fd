use std::sync::Arc;

use crate::dataset::Dataset;
use crate::scalar::Scalar;

/// Binary logistic regression, parameters `[w_0, ..., w_{k-1}, bias]`.
///
/// Per-example loss is `softplus(s) - y s` with `s = w·x + bias` and
/// `y ∈ {0, 1}`.
#[derive(Debug, Clone)]
pub struct LogisticRegression<T> {
    pub(crate) data: Arc<Dataset<T>>,
}

fn logit<T: Scalar>(w: &[T], x: &[T]) -> T {
    let k = x.len();
    x.iter().zip(&w[..k]).fold(w[k], |s, (&a, &b)| s + a * b)
}

fn softplus<T: Scalar>(s: T) -> T {
    s.max(T::zero()) + (-s.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> LogisticRegression<T> {
    pub fn dim(&self) -> usize {
        self.data.feature_dim() + 1
    }

    pub(crate) fn loss(&self, w: &[T], i: usize) -> T {
        let s = logit(w, self.data.features(i));
        softplus(s) - self.data.target(i) * s
    }

    pub(crate) fn add_grad(&self, w: &[T], i: usize, out: &mut [T]) -> T {
        let x = self.data.features(i);
        let y = self.data.target(i);
        let s = logit(w, x);
        let r = sigmoid(s) - y;
        let k = x.len();
        for (o, &xj) in out[..k].iter_mut().zip(x) {
            *o = *o + r * xj;
        }
        out[k] = out[k] + r;
        softplus(s) - y * s
    }

    pub(crate) fn add_hvp(&self, w: &[T], i: usize, v: &[T], out: &mut [T]) {
        let x = self.data.features(i);
        let p = sigmoid(logit(w, x));
        let k = x.len();
        let xv = x.iter().zip(&v[..k]).fold(v[k], |s, (&a, &b)| s + a * b);
        let c = p * (T::one() - p) * xv;
        for (o, &xj) in out[..k].iter_mut().zip(x) {
            *o = *o + c * xj;
        }
        out[k] = out[k] + c;
    }

    pub(crate) fn predict(&self, w: &[T], x: &[T]) -> usize {
        usize::from(logit(w, x) > T::zero())
    }
}
