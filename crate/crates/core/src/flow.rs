//! Modified losses of GD, SGD and n-step SGD, the implicit regularizer, the
//! per-example gradient covariance trace, and gradient flow on any of them.
//!
//! All gradients here are assembled from exact gradients and exact
//! Hessian-vector products; finite differences appear only in tests.

use crate::batching::BatchPartition;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamVector;
use crate::scalar::Scalar;

fn check_partition<T: Scalar>(model: &Model<T>, partition: &BatchPartition) -> Result<()> {
    if partition.num_examples() == model.num_examples() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "partition covers {} examples, model has {}",
            partition.num_examples(),
            model.num_examples()
        )))
    }
}

fn check_rate<T: Scalar>(epsilon: T) -> Result<()> {
    if epsilon >= T::zero() && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "learning rate must be finite and >= 0, got {epsilon}"
        )))
    }
}

/// `||∇Ĉ_k||²` for every batch of the partition, in batch order.
pub fn batch_grad_sq_norms<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
) -> Result<Vec<T>> {
    check_partition(model, partition)?;
    partition
        .batches()
        .iter()
        .map(|b| Ok(model.batch_grad(params, b)?.norm_sq()))
        .collect()
}

/// Implicit regularizer `C_reg = (1/4m) Σ_k ||∇Ĉ_k||²`.
pub fn c_reg<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
) -> Result<T> {
    let norms = batch_grad_sq_norms(model, params, partition)?;
    let total = norms.into_iter().fold(T::zero(), |s, x| s + x);
    Ok(total / (T::lit(4.0) * T::from_count(partition.num_batches())))
}

/// `C + (ε/4)||∇C||²`.
pub fn modified_loss_gd<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    epsilon: T,
) -> Result<T> {
    check_rate(epsilon)?;
    let (loss, grad) = model.full_loss_grad(params)?;
    Ok(loss + epsilon / T::lit(4.0) * grad.norm_sq())
}

/// `C + ε·C_reg`.
pub fn modified_loss_sgd<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    epsilon: T,
) -> Result<T> {
    modified_loss_nsgd(model, params, partition, epsilon, 1)
}

/// `C + (ε/4)||∇C||² + (ε/4m) Σ_i ||∇Ĉ_i - ∇C||²`, the same value as
/// [`modified_loss_sgd`] written as the GD penalty plus a batch-error term.
pub fn modified_loss_sgd_expanded<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    epsilon: T,
) -> Result<T> {
    check_rate(epsilon)?;
    check_partition(model, partition)?;
    let (loss, grad) = model.full_loss_grad(params)?;
    let mut spread = T::zero();
    for batch in partition.batches() {
        spread = spread + model.batch_grad(params, batch)?.sub(&grad).norm_sq();
    }
    let m = T::from_count(partition.num_batches());
    let quarter = epsilon / T::lit(4.0);
    Ok(loss + quarter * grad.norm_sq() + quarter / m * spread)
}

/// `C + (ε/4mn) Σ_i ||∇Ĉ_i||²`; `ε = nα` is the effective rate.
pub fn modified_loss_nsgd<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    epsilon: T,
    n: usize,
) -> Result<T> {
    check_rate(epsilon)?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "n-step count must be at least 1".into(),
        ));
    }
    let loss = model.full_loss(params)?;
    let reg = c_reg(model, params, partition)?;
    Ok(loss + epsilon * (reg / T::from_count(n)))
}

/// Trace of the empirical covariance of per-example gradients,
/// `Γ = (1/N) Σ_i ||∇C_i - ∇C||²`.
pub fn gamma_trace<T: Scalar>(model: &Model<T>, params: &ParamVector<T>) -> Result<T> {
    let n = model.num_examples();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let grad = model.full_grad(params)?;
    let mut total = T::zero();
    for i in 0..n {
        total = total + model.per_example_grad(params, i)?.sub(&grad).norm_sq();
    }
    Ok(total / T::from_count(n))
}

/// `(N - B)/(N - 1)`, defined as 0 for a single example.
pub fn batch_error_coefficient<T: Scalar>(n: usize, batch_size: usize) -> Result<T> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} outside 1..={n}"
        )));
    }
    if n == 1 {
        return Ok(T::zero());
    }
    Ok(T::from_count(n - batch_size) / T::from_count(n - 1))
}

/// Modified loss averaged over random partitions into batches of size `B`:
/// `C + (ε/4)||∇C||² + ((N-B)/(N-1))·(ε/4B)·Γ`.
pub fn expected_modified_loss<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    epsilon: T,
    batch_size: usize,
) -> Result<T> {
    check_rate(epsilon)?;
    let coef = batch_error_coefficient::<T>(model.num_examples(), batch_size)?;
    let (loss, grad) = model.full_loss_grad(params)?;
    let quarter = epsilon / T::lit(4.0);
    let gamma = if coef == T::zero() {
        T::zero()
    } else {
        gamma_trace(model, params)?
    };
    Ok(loss + quarter * grad.norm_sq() + coef * quarter / T::from_count(batch_size) * gamma)
}

/// `∇Γ = (2/N) Σ_i (∇²C_i - ∇²C)(∇C_i - ∇C)`.
pub fn gamma_trace_grad<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
) -> Result<ParamVector<T>> {
    let n = model.num_examples();
    let grad = model.full_grad(params)?;
    let mut per_example = ParamVector::zeros(model.dim());
    let mut deviation_sum = ParamVector::zeros(model.dim());
    for i in 0..n {
        let dev = model.per_example_grad(params, i)?.sub(&grad);
        per_example.axpy(T::one(), &model.per_example_hvp(params, i, &dev)?);
        deviation_sum.axpy(T::one(), &dev);
    }
    // Σ_i ∇²C (g_i - g) = ∇²C Σ_i (g_i - g) by linearity.
    let shared = model.full_hvp(params, &deviation_sum)?;
    let mut out = per_example.sub(&shared);
    out.scale(T::lit(2.0) / T::from_count(n));
    Ok(out)
}

/// Which loss a gradient flow descends.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowLoss<T> {
    Original,
    GdModified {
        epsilon: T,
    },
    SgdModified {
        epsilon: T,
        partition: BatchPartition,
    },
    NsgdModified {
        epsilon: T,
        n: usize,
        partition: BatchPartition,
    },
    ExpectedSgdModified {
        epsilon: T,
        batch_size: usize,
    },
}

impl<T: Scalar> FlowLoss<T> {
    /// Value of the loss this flow descends.
    pub fn value(&self, model: &Model<T>, params: &ParamVector<T>) -> Result<T> {
        match self {
            FlowLoss::Original => model.full_loss(params),
            FlowLoss::GdModified { epsilon } => modified_loss_gd(model, params, *epsilon),
            FlowLoss::SgdModified { epsilon, partition } => {
                modified_loss_sgd(model, params, partition, *epsilon)
            }
            FlowLoss::NsgdModified {
                epsilon,
                n,
                partition,
            } => modified_loss_nsgd(model, params, partition, *epsilon, *n),
            FlowLoss::ExpectedSgdModified {
                epsilon,
                batch_size,
            } => expected_modified_loss(model, params, *epsilon, *batch_size),
        }
    }
}

/// Gradient flow `ω' = -∇C̃(ω)` integrated for `total_time` with
/// `substeps` RK4 steps per unit time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec<T> {
    pub loss: FlowLoss<T>,
    pub total_time: T,
    pub substeps: usize,
}

/// Default RK4 substeps per unit flow time.
pub const DEFAULT_SUBSTEPS: usize = 1000;

impl<T: Scalar> FlowSpec<T> {
    pub fn new(loss: FlowLoss<T>, total_time: T, substeps: usize) -> Result<Self> {
        if !(total_time >= T::zero()) || !total_time.is_finite() {
            return Err(Error::InvalidArgument(
                "flow time must be finite and >= 0".into(),
            ));
        }
        if substeps < 100 {
            return Err(Error::InvalidArgument(format!(
                "at least 100 substeps per unit time required, got {substeps}"
            )));
        }
        Ok(Self {
            loss,
            total_time,
            substeps,
        })
    }

    /// Number of RK4 steps: `K·T` rounded up, so the step never exceeds `1/K`.
    pub fn num_steps(&self) -> usize {
        let exact = self.total_time.as_f64() * self.substeps as f64;
        let nearest = exact.round();
        if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            exact.ceil() as usize
        }
    }
}

/// Exact gradient of the loss selected by `loss`.
pub fn modified_flow_gradient<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    loss: &FlowLoss<T>,
) -> Result<ParamVector<T>> {
    let quarter = |eps: T| eps / T::lit(4.0);
    match loss {
        FlowLoss::Original => model.full_grad(params),
        FlowLoss::GdModified { epsilon } => {
            check_rate(*epsilon)?;
            let grad = model.full_grad(params)?;
            let mut penalty = model.full_hvp(params, &grad)?;
            penalty.scale(T::lit(2.0));
            let mut out = grad;
            out.axpy(quarter(*epsilon), &penalty);
            Ok(out)
        }
        FlowLoss::SgdModified { epsilon, partition } => {
            nsgd_gradient(model, params, partition, *epsilon, 1)
        }
        FlowLoss::NsgdModified {
            epsilon,
            n,
            partition,
        } => nsgd_gradient(model, params, partition, *epsilon, *n),
        FlowLoss::ExpectedSgdModified {
            epsilon,
            batch_size,
        } => {
            check_rate(*epsilon)?;
            let coef = batch_error_coefficient::<T>(model.num_examples(), *batch_size)?;
            let grad = model.full_grad(params)?;
            let mut penalty = model.full_hvp(params, &grad)?;
            penalty.scale(T::lit(2.0));
            let mut out = grad;
            out.axpy(quarter(*epsilon), &penalty);
            if coef != T::zero() {
                let gamma_grad = gamma_trace_grad(model, params)?;
                out.axpy(
                    coef * quarter(*epsilon) / T::from_count(*batch_size),
                    &gamma_grad,
                );
            }
            Ok(out)
        }
    }
}

fn nsgd_gradient<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    epsilon: T,
    n: usize,
) -> Result<ParamVector<T>> {
    check_rate(epsilon)?;
    check_partition(model, partition)?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "n-step count must be at least 1".into(),
        ));
    }
    let mut penalty = ParamVector::zeros(model.dim());
    for batch in partition.batches() {
        penalty.axpy(T::one(), &model.grad_sq_norm_grad(params, batch)?);
    }
    let denom = T::lit(4.0) * T::from_count(partition.num_batches()) * T::from_count(n);
    let mut out = model.full_grad(params)?;
    out.axpy(epsilon / denom, &penalty);
    Ok(out)
}

/// Classical fixed-step RK4 on `ω' = -∇C̃(ω)`; returns `ω(total_time)`.
pub fn integrate_flow<T: Scalar>(
    model: &Model<T>,
    init: &ParamVector<T>,
    flow: &FlowSpec<T>,
) -> Result<ParamVector<T>> {
    init.ensure_dim(model.dim())?;
    let steps = flow.num_steps();
    if steps == 0 {
        return Ok(init.clone());
    }
    let h = flow.total_time / T::from_count(steps);
    let half = h / T::lit(2.0);
    let sixth = h / T::lit(6.0);
    let velocity = |w: &ParamVector<T>| -> Result<ParamVector<T>> {
        let mut g = modified_flow_gradient(model, w, &flow.loss)?;
        g.scale(-T::one());
        Ok(g)
    };
    let mut w = init.clone();
    for step in 0..steps {
        let k1 = velocity(&w)?;
        let mut probe = w.clone();
        probe.axpy(half, &k1);
        let k2 = velocity(&probe)?;
        let mut probe = w.clone();
        probe.axpy(half, &k2);
        let k3 = velocity(&probe)?;
        let mut probe = w.clone();
        probe.axpy(h, &k3);
        let k4 = velocity(&probe)?;
        let mut incr = k1;
        incr.axpy(T::lit(2.0), &k2);
        incr.axpy(T::lit(2.0), &k3);
        incr.axpy(T::one(), &k4);
        w.axpy(sixth, &incr);
        if !w.is_bounded() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::make_partition;
    use crate::model::QuadraticEnsemble;

    fn scalar_model(curvatures: &[f64], linear: &[f64]) -> Model<f64> {
        let zeros = vec![0.0; curvatures.len()];
        Model::quadratic(QuadraticEnsemble::scalar(curvatures, linear, &zeros).unwrap())
    }

    /// Per-example gradients at ω = 0 equal the linear coefficients.
    fn gradients_model(grads: &[f64]) -> Model<f64> {
        scalar_model(&vec![1.0; grads.len()], grads)
    }

    #[test]
    fn c_reg_cases() {
        let w = ParamVector::zeros(1);
        let m = gradients_model(&[1.0, 2.0]);
        let p = make_partition(2, 1, None).unwrap();
        assert_eq!(c_reg(&m, &w, &p).unwrap(), 0.625);

        let single = make_partition(2, 2, None).unwrap();
        assert_eq!(c_reg(&m, &w, &single).unwrap(), 0.25 * 1.5 * 1.5);

        let flat = gradients_model(&[0.0, 0.0]);
        assert_eq!(c_reg(&flat, &w, &p).unwrap(), 0.0);
    }

    #[test]
    fn gd_modified_loss_cases() {
        let m = scalar_model(&[1.0], &[0.0]);
        let w = ParamVector::from_f64(&[2.0]);
        assert!((modified_loss_gd(&m, &w, 0.1).unwrap() - 2.1).abs() < 1e-15);
        assert_eq!(modified_loss_gd(&m, &w, 0.0).unwrap(), 2.0);
        assert_eq!(
            modified_loss_gd(&m, &ParamVector::zeros(1), 0.3).unwrap(),
            0.0
        );
    }

    #[test]
    fn sgd_modified_loss_combines_loss_and_regularizer() {
        // C = 0.75 from ½ω², ω² at ω = 1; batch gradients {1, 2}.
        let m = scalar_model(&[1.0, 2.0], &[0.0, 0.0]);
        let w = ParamVector::from_f64(&[1.0]);
        let p = make_partition(2, 1, None).unwrap();
        assert!((modified_loss_sgd(&m, &w, &p, 0.1).unwrap() - 0.8125).abs() < 1e-15);
        assert_eq!(modified_loss_sgd(&m, &w, &p, 0.0).unwrap(), 0.75);
        let single = make_partition(2, 2, None).unwrap();
        let gd = modified_loss_gd(&m, &w, 0.1).unwrap();
        let sgd = modified_loss_sgd(&m, &w, &single, 0.1).unwrap();
        assert!((gd - sgd).abs() <= 1e-14 * gd.abs());
    }

    #[test]
    fn expanded_form_with_homogeneous_batches() {
        let m = scalar_model(&[2.0, 2.0, 2.0, 2.0], &[0.5; 4]);
        let w = ParamVector::from_f64(&[0.3]);
        let p = make_partition(4, 2, None).unwrap();
        let expanded = modified_loss_sgd_expanded(&m, &w, &p, 0.2).unwrap();
        let gd = modified_loss_gd(&m, &w, 0.2).unwrap();
        assert!((expanded - gd).abs() <= 1e-15 * gd.abs());
        assert_eq!(
            modified_loss_sgd_expanded(&m, &w, &p, 0.0).unwrap(),
            m.full_loss(&w).unwrap()
        );
    }

    #[test]
    fn nsgd_coefficient() {
        let m = scalar_model(&[1.0, 2.0], &[0.3, -0.4]);
        let w = ParamVector::from_f64(&[1.0]);
        let p = make_partition(2, 1, None).unwrap();
        assert_eq!(
            modified_loss_nsgd(&m, &w, &p, 0.1, 1).unwrap(),
            modified_loss_sgd(&m, &w, &p, 0.1).unwrap()
        );
        let c = m.full_loss(&w).unwrap();
        let mut prev = f64::INFINITY;
        for n in [1, 2, 4, 8, 64] {
            let reg = modified_loss_nsgd(&m, &w, &p, 0.1, n).unwrap() - c;
            assert!(reg < prev && reg > 0.0);
            prev = reg;
        }
        // ε = nα: the regularizer depends on α only.
        let alpha = 0.01;
        let r1 = modified_loss_nsgd(&m, &w, &p, alpha, 1).unwrap();
        let r4 = modified_loss_nsgd(&m, &w, &p, 4.0 * alpha, 4).unwrap();
        assert!((r1 - r4).abs() < 1e-15);
        assert!(modified_loss_nsgd(&m, &w, &p, 0.1, 0).is_err());
    }

    #[test]
    fn gamma_cases() {
        let w = ParamVector::zeros(1);
        assert!(gamma_trace(&gradients_model(&[0.7, 0.7, 0.7]), &w).unwrap() < 1e-30);
        assert_eq!(
            gamma_trace(&gradients_model(&[0.5, 0.5, 0.5]), &w).unwrap(),
            0.0
        );
        assert_eq!(gamma_trace(&gradients_model(&[1.0, 3.0]), &w).unwrap(), 1.0);
        assert_eq!(
            gamma_trace(&gradients_model(&[0.0, 0.0, 2.0, 2.0]), &w).unwrap(),
            1.0
        );
    }

    #[test]
    fn expected_modified_loss_limits() {
        let m = scalar_model(&[1.0, 2.0, 0.5, 3.0], &[0.1, -0.2, 0.4, 0.0]);
        let w = ParamVector::from_f64(&[0.8]);
        let eps = 0.05;
        let gd = modified_loss_gd(&m, &w, eps).unwrap();
        assert_eq!(expected_modified_loss(&m, &w, eps, 4).unwrap(), gd);
        let gamma = gamma_trace(&m, &w).unwrap();
        let b1 = expected_modified_loss(&m, &w, eps, 1).unwrap();
        assert!((b1 - (gd + eps / 4.0 * gamma)).abs() < 1e-15);
        assert!(expected_modified_loss(&m, &w, eps, 5).is_err());

        let lone = scalar_model(&[1.0], &[1.0]);
        assert_eq!(
            expected_modified_loss(&lone, &w, eps, 1).unwrap(),
            modified_loss_gd(&lone, &w, eps).unwrap()
        );
    }

    #[test]
    fn flow_gradients_on_scalar_quadratic() {
        let a = 2.0;
        let eps = 0.1;
        let m = scalar_model(&[a], &[0.0]);
        let w = ParamVector::from_f64(&[1.5]);
        assert_eq!(
            modified_flow_gradient(&m, &w, &FlowLoss::Original).unwrap(),
            m.full_grad(&w).unwrap()
        );
        let g = modified_flow_gradient(&m, &w, &FlowLoss::GdModified { epsilon: eps }).unwrap();
        assert!((g[0] - (a + eps * a * a / 2.0) * 1.5).abs() < 1e-14);
    }

    #[test]
    fn integrate_exponential_decay() {
        let m = scalar_model(&[1.0], &[0.0]);
        let w0 = ParamVector::from_f64(&[1.0]);
        let spec = FlowSpec::new(FlowLoss::Original, 1.0, 1000).unwrap();
        let w = integrate_flow(&m, &w0, &spec).unwrap();
        assert!((w[0] - (-1.0f64).exp()).abs() < 1e-9);
        assert!((w[0] - 0.3678794).abs() < 1e-7);

        let zero = FlowSpec::new(FlowLoss::Original, 0.0, 1000).unwrap();
        assert_eq!(integrate_flow(&m, &w0, &zero).unwrap(), w0);
        assert!(FlowSpec::new(FlowLoss::<f64>::Original, 1.0, 99).is_err());
    }

    #[test]
    fn step_count_rounds_up() {
        let spec = FlowSpec::new(FlowLoss::<f64>::Original, 0.0125, 1000).unwrap();
        assert_eq!(spec.num_steps(), 13);
        let spec = FlowSpec::new(FlowLoss::<f64>::Original, 0.1, 1000).unwrap();
        assert_eq!(spec.num_steps(), 100);
    }
}
