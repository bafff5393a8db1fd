//! Fully connected network with a softmax cross-entropy head.
//!
//! Parameters are laid out layer by layer: the row-major weight matrix
//! (`out × in`) followed by the bias. Hessian-vector products use a tangent
//! forward pass followed by a second-order backward pass, so they are exact
//! up to rounding.

use std::sync::Arc;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Derivative at zero is taken as 0; second derivative is 0 everywhere.
    Relu,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(T::zero()),
        }
    }

    /// First and second derivative given the pre-activation and its output.
    fn derivs<T: Scalar>(self, z: T, a: T) -> (T, T) {
        match self {
            Activation::Tanh => {
                let d1 = T::one() - a * a;
                (d1, -(a + a) * d1)
            }
            Activation::Relu => {
                if z > T::zero() {
                    (T::one(), T::zero())
                } else {
                    (T::zero(), T::zero())
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation {other:?} (expected tanh or relu)"
            ))),
        }
    }
}

/// Layer widths `[input, hidden..., classes]` and hidden activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArch {
    widths: Vec<usize>,
    activation: Activation,
    offsets: Vec<usize>,
    dim: usize,
}

impl MlpArch {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "mlp needs at least an input and an output layer, all widths positive".into(),
            ));
        }
        if *widths.last().unwrap() < 2 {
            return Err(Error::InvalidArgument(
                "softmax head needs at least two classes".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(widths.len());
        let mut dim = 0;
        for pair in widths.windows(2) {
            offsets.push(dim);
            dim += pair[1] * pair[0] + pair[1];
        }
        Ok(Self {
            widths,
            activation,
            offsets,
            dim,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(weights, bias)` ranges of layer `l` inside the flat parameter vector.
    fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let w0 = self.offsets[l];
        let b0 = w0 + n_in * n_out;
        (w0..b0, b0..b0 + n_out)
    }

    /// Fan-in of the layer owning parameter `p`.
    pub(crate) fn fan_in_of(&self, p: usize) -> usize {
        let l = self.offsets.iter().rposition(|&o| o <= p).unwrap_or(0);
        self.widths[l]
    }
}

/// Per-example scratch buffers, reused across a batch.
pub(crate) struct Workspace<T> {
    /// Pre-activations per layer.
    z: Vec<Vec<T>>,
    /// `a[0]` is the input, `a[l+1]` the output of layer `l`.
    a: Vec<Vec<T>>,
    rz: Vec<Vec<T>>,
    ra: Vec<Vec<T>>,
    delta: Vec<T>,
    rdelta: Vec<T>,
    back: Vec<T>,
    rback: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub(crate) fn new(arch: &MlpArch) -> Self {
        let per_layer = |from: usize| -> Vec<Vec<T>> {
            arch.widths[from..]
                .iter()
                .map(|&w| vec![T::zero(); w])
                .collect()
        };
        let widest = *arch.widths.iter().max().unwrap();
        Self {
            z: per_layer(1),
            a: per_layer(0),
            rz: per_layer(1),
            ra: per_layer(0),
            delta: Vec::with_capacity(widest),
            rdelta: Vec::with_capacity(widest),
            back: Vec::with_capacity(widest),
            rback: Vec::with_capacity(widest),
        }
    }
}

/// Small MLP bound to a dataset of class-labelled feature vectors.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub(crate) arch: Arc<MlpArch>,
    pub(crate) data: Arc<Dataset<T>>,
}

fn log_softmax_grad<T: Scalar>(logits: &[T], class: usize, probs: &mut Vec<T>) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    probs.clear();
    probs.extend(logits.iter().map(|&x| (x - max).exp()));
    let total: T = probs.iter().copied().sum();
    for p in probs.iter_mut() {
        *p = *p / total;
    }
    max + total.ln() - logits[class]
}

impl<T: Scalar> Mlp<T> {
    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    fn forward(&self, w: &[T], x: &[T], ws: &mut Workspace<T>) {
        let arch = &*self.arch;
        ws.a[0].copy_from_slice(x);
        for l in 0..arch.layers() {
            let (wr, br) = arch.layer_ranges(l);
            let n_in = arch.widths[l];
            let weights = &w[wr];
            let bias = &w[br];
            let hidden = l + 1 < arch.layers();
            let (prev, next) = ws.a.split_at_mut(l + 1);
            let input = &prev[l];
            for (r, z) in ws.z[l].iter_mut().enumerate() {
                let row = &weights[r * n_in..(r + 1) * n_in];
                *z = row
                    .iter()
                    .zip(input)
                    .fold(bias[r], |s, (&wi, &xi)| s + wi * xi);
            }
            for (a, &z) in next[0].iter_mut().zip(&ws.z[l]) {
                *a = if hidden { arch.activation.apply(z) } else { z };
            }
        }
    }

    fn logits<'a>(&self, ws: &'a Workspace<T>) -> &'a [T] {
        &ws.a[self.arch.layers()]
    }

    pub(crate) fn loss(&self, w: &[T], i: usize, ws: &mut Workspace<T>) -> T {
        self.forward(w, self.data.features(i), ws);
        let mut probs = std::mem::take(&mut ws.delta);
        let loss = log_softmax_grad(self.logits(ws), self.data.class(i), &mut probs);
        ws.delta = probs;
        loss
    }

    pub(crate) fn predict(&self, w: &[T], x: &[T], ws: &mut Workspace<T>) -> usize {
        self.forward(w, x, ws);
        let logits = self.logits(ws);
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best
    }

    /// Adds the example gradient into `out` and returns the loss.
    pub(crate) fn add_grad(&self, w: &[T], i: usize, out: &mut [T], ws: &mut Workspace<T>) -> T {
        let arch = &*self.arch;
        let loss = self.loss(w, i, ws);
        ws.delta[self.data.class(i)] = ws.delta[self.data.class(i)] - T::one();
        for l in (0..arch.layers()).rev() {
            let (wr, br) = arch.layer_ranges(l);
            let n_in = arch.widths[l];
            let input = &ws.a[l];
            for (r, &d) in ws.delta.iter().enumerate() {
                let row = &mut out[wr.start + r * n_in..wr.start + (r + 1) * n_in];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g = *g + d * x;
                }
                out[br.start + r] = out[br.start + r] + d;
            }
            if l == 0 {
                break;
            }
            let weights = &w[wr];
            ws.back.clear();
            ws.back.resize(n_in, T::zero());
            for (r, &d) in ws.delta.iter().enumerate() {
                let row = &weights[r * n_in..(r + 1) * n_in];
                for (b, &wi) in ws.back.iter_mut().zip(row) {
                    *b = *b + wi * d;
                }
            }
            ws.delta.clear();
            for ((&b, &z), &a) in ws.back.iter().zip(&ws.z[l - 1]).zip(&ws.a[l]) {
                let (d1, _) = arch.activation.derivs(z, a);
                ws.delta.push(d1 * b);
            }
        }
        loss
    }

    /// Adds `∇²C_i(w) v` into `out`.
    pub(crate) fn add_hvp(&self, w: &[T], i: usize, v: &[T], out: &mut [T], ws: &mut Workspace<T>) {
        let arch = &*self.arch;
        let layers = arch.layers();
        self.loss(w, i, ws);
        let class = self.data.class(i);

        // Tangent forward pass along v.
        for x in ws.ra[0].iter_mut() {
            *x = T::zero();
        }
        for l in 0..layers {
            let (wr, br) = arch.layer_ranges(l);
            let n_in = arch.widths[l];
            let hidden = l + 1 < layers;
            for r in 0..arch.widths[l + 1] {
                let wrow = &w[wr.start + r * n_in..wr.start + (r + 1) * n_in];
                let vrow = &v[wr.start + r * n_in..wr.start + (r + 1) * n_in];
                let mut s = v[br.start + r];
                for k in 0..n_in {
                    s = s + vrow[k] * ws.a[l][k] + wrow[k] * ws.ra[l][k];
                }
                ws.rz[l][r] = s;
                ws.ra[l + 1][r] = if hidden {
                    arch.activation.derivs(ws.z[l][r], ws.a[l + 1][r]).0 * s
                } else {
                    s
                };
            }
        }

        // Softmax head: delta = p - e_y, R(delta) = diag(p) Rz - p (p·Rz).
        let rz_out = &ws.ra[layers];
        let p_dot: T = ws
            .delta
            .iter()
            .zip(rz_out)
            .fold(T::zero(), |s, (&p, &r)| s + p * r);
        ws.rdelta.clear();
        for (&p, &r) in ws.delta.iter().zip(rz_out) {
            ws.rdelta.push(p * (r - p_dot));
        }
        ws.delta[class] = ws.delta[class] - T::one();

        for l in (0..layers).rev() {
            let (wr, br) = arch.layer_ranges(l);
            let n_in = arch.widths[l];
            for r in 0..arch.widths[l + 1] {
                let d = ws.delta[r];
                let rd = ws.rdelta[r];
                let row = &mut out[wr.start + r * n_in..wr.start + (r + 1) * n_in];
                for ((o, &a), &ra) in row.iter_mut().zip(&ws.a[l]).zip(&ws.ra[l]) {
                    *o = *o + rd * a + d * ra;
                }
                out[br.start + r] = out[br.start + r] + rd;
            }
            if l == 0 {
                break;
            }
            ws.back.clear();
            ws.back.resize(n_in, T::zero());
            ws.rback.clear();
            ws.rback.resize(n_in, T::zero());
            for r in 0..arch.widths[l + 1] {
                let d = ws.delta[r];
                let rd = ws.rdelta[r];
                let wrow = &w[wr.start + r * n_in..wr.start + (r + 1) * n_in];
                let vrow = &v[wr.start + r * n_in..wr.start + (r + 1) * n_in];
                for k in 0..n_in {
                    ws.back[k] = ws.back[k] + wrow[k] * d;
                    ws.rback[k] = ws.rback[k] + vrow[k] * d + wrow[k] * rd;
                }
            }
            ws.delta.clear();
            ws.rdelta.clear();
            for k in 0..n_in {
                let (d1, d2) = arch.activation.derivs(ws.z[l - 1][k], ws.a[l][k]);
                ws.delta.push(d1 * ws.back[k]);
                ws.rdelta
                    .push(d2 * ws.rz[l - 1][k] * ws.back[k] + d1 * ws.rback[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count() {
        let arch = MlpArch::new(vec![2, 3, 2], Activation::Tanh).unwrap();
        assert_eq!(arch.dim(), 2 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(arch.fan_in_of(0), 2);
        assert_eq!(arch.fan_in_of(8), 2);
        assert_eq!(arch.fan_in_of(9), 3);
    }

    #[test]
    fn rejects_degenerate_architectures() {
        assert!(MlpArch::new(vec![3], Activation::Tanh).is_err());
        assert!(MlpArch::new(vec![3, 1], Activation::Tanh).is_err());
        assert!(MlpArch::new(vec![3, 0, 2], Activation::Relu).is_err());
        assert!("sigmoid".parse::<Activation>().is_err());
    }
}
