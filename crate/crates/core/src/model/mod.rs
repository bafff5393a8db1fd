//! Differentiable model families and the loss/gradient/HVP contract.
//!
//! Every batch quantity is the mean over its examples, accumulated in the
//! order the indices are given (ascending for partitions built by
//! [`crate::batching`]). The full-batch routines are the batch routines over
//! `0..N`, so the two agree bitwise.

mod logistic;
mod mlp;
mod quadratic;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use logistic::LogisticRegression;
pub use mlp::{Activation, Mlp, MlpArch};
pub use quadratic::{QuadraticEnsemble, QuadraticTerm};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Quadratic,
    LogisticRegression,
    SmallMlp,
}

#[derive(Debug, Clone)]
pub enum Family<T> {
    Quadratic(Arc<QuadraticEnsemble<T>>),
    Logistic(LogisticRegression<T>),
    Mlp(Mlp<T>),
}

/// A model family bound to its per-example costs, plus an optional L2 term
/// `(weight_decay / 2)·||w||²` added to every per-example loss.
#[derive(Debug, Clone)]
pub struct Model<T> {
    family: Family<T>,
    weight_decay: T,
}

impl<T: Scalar> Model<T> {
    pub fn quadratic(ensemble: QuadraticEnsemble<T>) -> Self {
        Self {
            family: Family::Quadratic(Arc::new(ensemble)),
            weight_decay: T::zero(),
        }
    }

    pub fn logistic(data: Arc<Dataset<T>>) -> Result<Self> {
        data.check_classes(2)?;
        Ok(Self {
            family: Family::Logistic(LogisticRegression { data }),
            weight_decay: T::zero(),
        })
    }

    pub fn mlp(arch: MlpArch, data: Arc<Dataset<T>>) -> Result<Self> {
        if data.feature_dim() != arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: arch.input_dim(),
                got: data.feature_dim(),
            });
        }
        data.check_classes(arch.classes())?;
        Ok(Self {
            family: Family::Mlp(Mlp {
                arch: Arc::new(arch),
                data,
            }),
            weight_decay: T::zero(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.family {
            Family::Quadratic(_) => ModelKind::Quadratic,
            Family::Logistic(_) => ModelKind::LogisticRegression,
            Family::Mlp(_) => ModelKind::SmallMlp,
        }
    }

    pub fn family(&self) -> &Family<T> {
        &self.family
    }

    pub fn weight_decay(&self) -> T {
        self.weight_decay
    }

    pub fn with_weight_decay(&self, weight_decay: T) -> Self {
        Self {
            family: self.family.clone(),
            weight_decay,
        }
    }

    /// Same model evaluated on another dataset (e.g. a test split).
    pub fn with_data(&self, data: Arc<Dataset<T>>) -> Result<Self> {
        let model = match &self.family {
            Family::Quadratic(_) => {
                return Err(Error::Unsupported(
                    "quadratic ensembles carry their own per-example costs".into(),
                ))
            }
            Family::Logistic(_) => Self::logistic(data)?,
            Family::Mlp(m) => Self::mlp((*m.arch).clone(), data)?,
        };
        Ok(model.with_weight_decay(self.weight_decay))
    }

    pub fn data(&self) -> Option<&Arc<Dataset<T>>> {
        match &self.family {
            Family::Quadratic(_) => None,
            Family::Logistic(m) => Some(&m.data),
            Family::Mlp(m) => Some(&m.data),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.family {
            Family::Quadratic(q) => q.dim(),
            Family::Logistic(m) => m.dim(),
            Family::Mlp(m) => m.arch.dim(),
        }
    }

    pub fn num_examples(&self) -> usize {
        match &self.family {
            Family::Quadratic(q) => q.len(),
            Family::Logistic(m) => m.data.len(),
            Family::Mlp(m) => m.data.len(),
        }
    }

    /// Seeded initial parameters.
    ///
    /// Network and logistic weights are uniform in `±1/√fan_in`; quadratic
    /// ensembles start from a standard normal draw.
    pub fn init_params(&self, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = match &self.family {
            Family::Quadratic(q) => (0..q.dim())
                .map(|_| T::lit(StandardNormal.sample(&mut rng)))
                .collect(),
            Family::Logistic(m) => {
                let s = 1.0 / (m.data.feature_dim() as f64).sqrt();
                (0..m.dim())
                    .map(|_| T::lit(rng.random_range(-s..s)))
                    .collect()
            }
            Family::Mlp(m) => (0..m.arch.dim())
                .map(|p| {
                    let s = 1.0 / (m.arch.fan_in_of(p) as f64).sqrt();
                    T::lit(rng.random_range(-s..s))
                })
                .collect(),
        };
        ParamVector::new(values)
    }

    fn check_params(&self, params: &ParamVector<T>) -> Result<()> {
        params.ensure_dim(self.dim())
    }

    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.num_examples();
        match batch.iter().find(|&&i| i >= n) {
            Some(&index) => Err(Error::IndexOutOfRange { index, len: n }),
            None => Ok(()),
        }
    }

    fn decay_loss(&self, w: &[T]) -> T {
        let sq = w.iter().fold(T::zero(), |s, &x| s + x * x);
        T::lit(0.5) * self.weight_decay * sq
    }

    /// Sum of per-example losses over `batch` (no decay term).
    fn sum_loss(&self, w: &[T], batch: &[usize]) -> T {
        match &self.family {
            Family::Quadratic(q) => batch.iter().fold(T::zero(), |s, &i| s + q.loss(w, i)),
            Family::Logistic(m) => batch.iter().fold(T::zero(), |s, &i| s + m.loss(w, i)),
            Family::Mlp(m) => {
                let mut ws = mlp::Workspace::new(&m.arch);
                batch
                    .iter()
                    .fold(T::zero(), |s, &i| s + m.loss(w, i, &mut ws))
            }
        }
    }

    /// Adds per-example gradients over `batch` into `out`; returns the summed loss.
    fn sum_grad(&self, w: &[T], batch: &[usize], out: &mut [T]) -> T {
        match &self.family {
            Family::Quadratic(q) => batch
                .iter()
                .fold(T::zero(), |s, &i| s + q.add_grad(w, i, out)),
            Family::Logistic(m) => batch
                .iter()
                .fold(T::zero(), |s, &i| s + m.add_grad(w, i, out)),
            Family::Mlp(m) => {
                let mut ws = mlp::Workspace::new(&m.arch);
                batch
                    .iter()
                    .fold(T::zero(), |s, &i| s + m.add_grad(w, i, out, &mut ws))
            }
        }
    }

    fn sum_hvp(&self, w: &[T], batch: &[usize], v: &[T], out: &mut [T]) {
        match &self.family {
            Family::Quadratic(q) => batch.iter().for_each(|&i| q.add_hvp(i, v, out)),
            Family::Logistic(m) => batch.iter().for_each(|&i| m.add_hvp(w, i, v, out)),
            Family::Mlp(m) => {
                let mut ws = mlp::Workspace::new(&m.arch);
                batch.iter().for_each(|&i| m.add_hvp(w, i, v, out, &mut ws))
            }
        }
    }

    pub fn batch_loss(&self, params: &ParamVector<T>, batch: &[usize]) -> Result<T> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let w = params.as_slice();
        let mut loss = self.sum_loss(w, batch) / T::from_count(batch.len());
        if self.weight_decay != T::zero() {
            loss = loss + self.decay_loss(w);
        }
        Ok(loss)
    }

    /// Mean loss and gradient over `batch`.
    pub fn batch_loss_grad(
        &self,
        params: &ParamVector<T>,
        batch: &[usize],
    ) -> Result<(T, ParamVector<T>)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let w = params.as_slice();
        let mut grad = vec![T::zero(); w.len()];
        let count = T::from_count(batch.len());
        let mut loss = self.sum_grad(w, batch, &mut grad) / count;
        for g in &mut grad {
            *g = *g / count;
        }
        if self.weight_decay != T::zero() {
            loss = loss + self.decay_loss(w);
            for (g, &x) in grad.iter_mut().zip(w) {
                *g = *g + self.weight_decay * x;
            }
        }
        Ok((loss, ParamVector::new(grad)))
    }

    pub fn batch_grad(&self, params: &ParamVector<T>, batch: &[usize]) -> Result<ParamVector<T>> {
        Ok(self.batch_loss_grad(params, batch)?.1)
    }

    /// Exact `∇²Ĉ_batch(w)·v`.
    pub fn batch_hvp(
        &self,
        params: &ParamVector<T>,
        batch: &[usize],
        v: &ParamVector<T>,
    ) -> Result<ParamVector<T>> {
        self.check_params(params)?;
        v.ensure_dim(self.dim())?;
        self.check_batch(batch)?;
        let mut out = vec![T::zero(); self.dim()];
        self.sum_hvp(params.as_slice(), batch, v.as_slice(), &mut out);
        let count = T::from_count(batch.len());
        for o in &mut out {
            *o = *o / count;
        }
        if self.weight_decay != T::zero() {
            for (o, &vi) in out.iter_mut().zip(v.as_slice()) {
                *o = *o + self.weight_decay * vi;
            }
        }
        Ok(ParamVector::new(out))
    }

    /// `∇(||∇Ĉ_batch||²) = 2·∇²Ĉ_batch·∇Ĉ_batch`.
    pub fn grad_sq_norm_grad(
        &self,
        params: &ParamVector<T>,
        batch: &[usize],
    ) -> Result<ParamVector<T>> {
        let g = self.batch_grad(params, batch)?;
        let mut out = self.batch_hvp(params, batch, &g)?;
        out.scale(T::lit(2.0));
        Ok(out)
    }

    /// Batch gradient together with `∇(||∇Ĉ_batch||²)`.
    pub fn grad_and_sq_norm_grad(
        &self,
        params: &ParamVector<T>,
        batch: &[usize],
    ) -> Result<(ParamVector<T>, ParamVector<T>)> {
        let g = self.batch_grad(params, batch)?;
        let mut out = self.batch_hvp(params, batch, &g)?;
        out.scale(T::lit(2.0));
        Ok((g, out))
    }

    pub fn per_example_loss(&self, params: &ParamVector<T>, idx: usize) -> Result<T> {
        self.batch_loss(params, &[idx])
    }

    pub fn per_example_grad(&self, params: &ParamVector<T>, idx: usize) -> Result<ParamVector<T>> {
        self.batch_grad(params, &[idx])
    }

    pub fn per_example_hvp(
        &self,
        params: &ParamVector<T>,
        idx: usize,
        v: &ParamVector<T>,
    ) -> Result<ParamVector<T>> {
        self.batch_hvp(params, &[idx], v)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.num_examples()).collect()
    }

    pub fn full_loss(&self, params: &ParamVector<T>) -> Result<T> {
        self.batch_loss(params, &self.all_indices())
    }

    pub fn full_grad(&self, params: &ParamVector<T>) -> Result<ParamVector<T>> {
        self.batch_grad(params, &self.all_indices())
    }

    pub fn full_loss_grad(&self, params: &ParamVector<T>) -> Result<(T, ParamVector<T>)> {
        self.batch_loss_grad(params, &self.all_indices())
    }

    pub fn full_hvp(&self, params: &ParamVector<T>, v: &ParamVector<T>) -> Result<ParamVector<T>> {
        self.batch_hvp(params, &self.all_indices(), v)
    }

    /// Fraction of examples whose predicted class matches the target;
    /// `None` for quadratic ensembles.
    pub fn accuracy(&self, params: &ParamVector<T>) -> Result<Option<f64>> {
        self.check_params(params)?;
        let w = params.as_slice();
        let correct = match &self.family {
            Family::Quadratic(_) => return Ok(None),
            Family::Logistic(m) => (0..m.data.len())
                .filter(|&i| m.predict(w, m.data.features(i)) == m.data.class(i))
                .count(),
            Family::Mlp(m) => {
                let mut ws = mlp::Workspace::new(&m.arch);
                (0..m.data.len())
                    .filter(|&i| m.predict(w, m.data.features(i), &mut ws) == m.data.class(i))
                    .count()
            }
        };
        Ok(Some(correct as f64 / self.num_examples() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_scalars() -> Model<f64> {
        // ½ω² and ω²
        Model::quadratic(QuadraticEnsemble::scalar(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap())
    }

    #[test]
    fn quadratic_example_losses() {
        let m: Model<f64> =
            Model::quadratic(QuadraticEnsemble::scalar(&[1.0], &[0.0], &[0.0]).unwrap());
        let w = ParamVector::from_f64(&[2.0]);
        assert_eq!(m.per_example_loss(&w, 0).unwrap(), 2.0);

        let m: Model<f64> =
            Model::quadratic(QuadraticEnsemble::scalar(&[3.5], &[-1.25], &[0.7]).unwrap());
        assert_eq!(m.per_example_loss(&ParamVector::zeros(1), 0).unwrap(), 0.7);
    }

    #[test]
    fn full_loss_and_grad_of_two_scalars() {
        let m = two_scalars();
        let w = ParamVector::from_f64(&[1.0]);
        assert_eq!(m.full_loss(&w).unwrap(), 0.75);
        assert_eq!(m.full_grad(&w).unwrap().as_slice(), &[1.5]);
    }

    #[test]
    fn batch_of_enumerated_gradients() {
        // per-example gradients {0,0,2,2} at ω = 1 from curvatures {0,0,2,2}
        let m: Model<f64> = Model::quadratic(
            QuadraticEnsemble::scalar(&[0.0, 0.0, 2.0, 2.0], &[0.0; 4], &[0.0; 4]).unwrap(),
        );
        let w = ParamVector::from_f64(&[1.0]);
        assert_eq!(m.batch_grad(&w, &[2, 3]).unwrap().as_slice(), &[2.0]);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let m = two_scalars();
        let w = ParamVector::from_f64(&[1.0]);
        assert!(matches!(
            m.per_example_loss(&w, 2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
        assert!(matches!(m.batch_grad(&w, &[]), Err(Error::EmptyBatch)));
        assert!(matches!(
            m.full_loss(&ParamVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(m.batch_hvp(&w, &[0], &ParamVector::zeros(2)).is_err());
    }

    #[test]
    fn quadratic_hvp_is_constant_curvature() {
        let m = two_scalars();
        let w = ParamVector::from_f64(&[-4.0]);
        let v = ParamVector::from_f64(&[3.0]);
        assert_eq!(m.batch_hvp(&w, &[0, 1], &v).unwrap().as_slice(), &[4.5]);
        assert_eq!(
            m.batch_hvp(&w, &[0, 1], &ParamVector::zeros(1))
                .unwrap()
                .as_slice(),
            &[0.0]
        );
    }

    #[test]
    fn grad_sq_norm_grad_of_scalar_quadratic() {
        // ½aω²: ∇(a²ω²) = 2a²ω
        let a = 3.0;
        let m: Model<f64> =
            Model::quadratic(QuadraticEnsemble::scalar(&[a], &[0.0], &[0.0]).unwrap());
        let w = ParamVector::from_f64(&[0.5]);
        assert_eq!(
            m.grad_sq_norm_grad(&w, &[0]).unwrap().as_slice(),
            &[2.0 * a * a * 0.5]
        );
        assert_eq!(
            m.grad_sq_norm_grad(&ParamVector::zeros(1), &[0])
                .unwrap()
                .as_slice(),
            &[0.0]
        );
    }

    #[test]
    fn weight_decay_enters_every_example() {
        let m = two_scalars().with_weight_decay(0.5);
        let w = ParamVector::from_f64(&[2.0]);
        // (0.5·4 + 4)/2 + 0.25·4
        assert_eq!(m.full_loss(&w).unwrap(), 4.0);
        assert_eq!(m.full_grad(&w).unwrap().as_slice(), &[3.0 + 1.0]);
        let v = ParamVector::from_f64(&[1.0]);
        assert_eq!(m.per_example_hvp(&w, 1, &v).unwrap().as_slice(), &[2.5]);
    }
}
