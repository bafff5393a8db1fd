use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One per-example cost `½ wᵀAw + bᵀw + c` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTerm<T> {
    /// Row-major `d × d`.
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: T,
}

/// Ensemble of quadratic per-example costs sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEnsemble<T> {
    dim: usize,
    terms: Vec<QuadraticTerm<T>>,
}

impl<T: Scalar> QuadraticEnsemble<T> {
    pub fn new(dim: usize, terms: Vec<QuadraticTerm<T>>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, term) in terms.iter().enumerate() {
            if term.a.len() != dim * dim {
                return Err(Error::DimensionMismatch {
                    expected: dim * dim,
                    got: term.a.len(),
                });
            }
            if term.b.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: term.b.len(),
                });
            }
            for r in 0..dim {
                for c in (r + 1)..dim {
                    if term.a[r * dim + c] != term.a[c * dim + r] {
                        return Err(Error::NotSymmetric(i));
                    }
                }
            }
        }
        Ok(Self { dim, terms })
    }

    /// One-dimensional ensemble `½ a_i w² + b_i w + c_i`.
    pub fn scalar(curvatures: &[f64], linear: &[f64], offsets: &[f64]) -> Result<Self> {
        if curvatures.len() != linear.len() || curvatures.len() != offsets.len() {
            return Err(Error::InvalidArgument(
                "scalar quadratic coefficient lists differ in length".into(),
            ));
        }
        let terms = curvatures
            .iter()
            .zip(linear)
            .zip(offsets)
            .map(|((&a, &b), &c)| QuadraticTerm {
                a: vec![T::lit(a)],
                b: vec![T::lit(b)],
                c: T::lit(c),
            })
            .collect();
        Self::new(1, terms)
    }

    /// Random strictly convex ensemble: `A_i = M_i M_iᵀ / d + I/2` with
    /// standard normal `M_i`, standard normal `b_i` and `c_i`.
    pub fn random(n: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let terms = (0..n)
            .map(|_| {
                let m: Vec<f64> = (0..dim * dim).map(|_| normal()).collect();
                let mut a = vec![T::zero(); dim * dim];
                for r in 0..dim {
                    for c in 0..=r {
                        let mut s = 0.0;
                        for k in 0..dim {
                            s += m[r * dim + k] * m[c * dim + k];
                        }
                        s /= dim as f64;
                        if r == c {
                            s += 0.5;
                        }
                        a[r * dim + c] = T::lit(s);
                        a[c * dim + r] = T::lit(s);
                    }
                }
                let b = (0..dim).map(|_| T::lit(normal())).collect();
                let c = T::lit(normal());
                QuadraticTerm { a, b, c }
            })
            .collect();
        Self::new(dim, terms)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[QuadraticTerm<T>] {
        &self.terms
    }

    pub(crate) fn loss(&self, w: &[T], i: usize) -> T {
        let t = &self.terms[i];
        let d = self.dim;
        let mut quad = T::zero();
        for r in 0..d {
            let row = &t.a[r * d..(r + 1) * d];
            let aw: T = row.iter().zip(w).fold(T::zero(), |s, (&x, &y)| s + x * y);
            quad = quad + w[r] * aw;
        }
        let lin = t.b.iter().zip(w).fold(T::zero(), |s, (&x, &y)| s + x * y);
        T::lit(0.5) * quad + lin + t.c
    }

    /// Adds `A_i w + b_i` into `out`, returns the loss.
    pub(crate) fn add_grad(&self, w: &[T], i: usize, out: &mut [T]) -> T {
        let t = &self.terms[i];
        let d = self.dim;
        let mut quad = T::zero();
        let mut lin = T::zero();
        for r in 0..d {
            let row = &t.a[r * d..(r + 1) * d];
            let aw: T = row.iter().zip(w).fold(T::zero(), |s, (&x, &y)| s + x * y);
            quad = quad + w[r] * aw;
            lin = lin + t.b[r] * w[r];
            out[r] = out[r] + aw + t.b[r];
        }
        T::lit(0.5) * quad + lin + t.c
    }

    /// Adds `A_i v` into `out`.
    pub(crate) fn add_hvp(&self, i: usize, v: &[T], out: &mut [T]) {
        let t = &self.terms[i];
        let d = self.dim;
        for (o, row) in out.iter_mut().zip(t.a.chunks_exact(d)) {
            let av: T = row.iter().zip(v).fold(T::zero(), |s, (&x, &y)| s + x * y);
            *o = *o + av;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asymmetric_matrix_rejected() {
        let term = QuadraticTerm {
            a: vec![1.0, 2.0, 0.0, 1.0],
            b: vec![0.0; 2],
            c: 0.0,
        };
        assert!(matches!(
            QuadraticEnsemble::new(2, vec![term]),
            Err(Error::NotSymmetric(0))
        ));
    }

    #[test]
    fn random_ensemble_is_symmetric_and_seeded() {
        let a = QuadraticEnsemble::<f64>::random(4, 3, 5).unwrap();
        let b = QuadraticEnsemble::<f64>::random(4, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }
}
