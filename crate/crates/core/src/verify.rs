//! Order-averaged SGD iterates, closed forms checked against brute force,
//! and step-size scaling experiments that measure remainder orders.
//!
//! Independent work items (orderings, subsets) are evaluated with rayon and
//! gathered in enumeration order before any reduction, so results do not
//! depend on the number of worker threads.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::batching::{
    enumerate_all_batches, enumerate_orderings, sample_ordering, BatchPartition,
    DEFAULT_ORDERING_CAP,
};
use crate::error::{Error, Result};
use crate::flow::{batch_error_coefficient, gamma_trace, integrate_flow, FlowLoss, FlowSpec};
use crate::model::Model;
use crate::optim::{nstep_sgd_epoch, run_schedule, sgd_epoch};
use crate::params::{mean_of, ParamVector};
use crate::scalar::Scalar;

/// Mean of `f(ordering)` over every ordering of the partition's batches.
fn mean_over_orderings<T, F>(m: usize, cap: u128, f: F) -> Result<(ParamVector<T>, usize)>
where
    T: Scalar,
    F: Fn(&[usize]) -> Result<ParamVector<T>> + Sync,
{
    let orderings: Vec<Vec<usize>> = enumerate_orderings(m, cap)?.collect();
    let outputs = orderings
        .par_iter()
        .map(|o| f(o))
        .collect::<Result<Vec<_>>>()?;
    Ok((mean_of(&outputs), orderings.len()))
}

/// Mean and per-coordinate standard error of `f` over sampled orderings.
fn sample_over_orderings<T, F>(
    m: usize,
    samples: usize,
    seed: u64,
    f: F,
) -> Result<(ParamVector<T>, ParamVector<T>)>
where
    T: Scalar,
    F: Fn(&[usize]) -> Result<ParamVector<T>> + Sync,
{
    if samples < 2 {
        return Err(Error::InvalidArgument(
            "Monte Carlo averaging needs at least 2 samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orderings: Vec<Vec<usize>> = (0..samples).map(|_| sample_ordering(m, &mut rng)).collect();
    let outputs = orderings
        .par_iter()
        .map(|o| f(o))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_of(&outputs);
    let mut var: ParamVector<T> = ParamVector::zeros(mean.dim());
    for out in &outputs {
        let dev = out.sub(&mean);
        for (v, &d) in var.as_mut_slice().iter_mut().zip(dev.as_slice()) {
            *v = *v + d * d;
        }
    }
    let denom = T::from_count(samples - 1) * T::from_count(samples);
    for v in var.as_mut_slice() {
        *v = (*v / denom).sqrt();
    }
    Ok((mean, var))
}

/// Mean of one SGD epoch over all `m!` batch orderings.
pub fn expected_sgd_iterate_exact<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    epsilon: T,
    cap: u128,
) -> Result<ParamVector<T>> {
    let (mean, _) = mean_over_orderings(partition.num_batches(), cap, |o| {
        sgd_epoch(model, params, partition, o, epsilon)
    })?;
    Ok(mean)
}

/// Monte Carlo estimate of [`expected_sgd_iterate_exact`] with the standard
/// error of each coordinate.
pub fn expected_sgd_iterate_mc<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    epsilon: T,
    samples: usize,
    seed: u64,
) -> Result<(ParamVector<T>, ParamVector<T>)> {
    sample_over_orderings(partition.num_batches(), samples, seed, |o| {
        sgd_epoch(model, params, partition, o, epsilon)
    })
}

/// `E(ξ)` by brute force: the mean over orderings `σ` of
/// `Σ_j Σ_{k<j} ∇²Ĉ_σ(j) ∇Ĉ_σ(k)`.
pub fn xi_expectation_direct<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    cap: u128,
) -> Result<ParamVector<T>> {
    let m = partition.num_batches();
    let grads = partition
        .batches()
        .iter()
        .map(|b| model.batch_grad(params, b))
        .collect::<Result<Vec<_>>>()?;
    // cross[j][k] = ∇²Ĉ_j ∇Ĉ_k
    let cross = partition
        .batches()
        .iter()
        .map(|b| {
            grads
                .iter()
                .map(|g| model.batch_hvp(params, b, g))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, _) = mean_over_orderings(m, cap, |sigma| {
        let mut acc = ParamVector::zeros(model.dim());
        for j in 0..m {
            for k in 0..j {
                acc.axpy(T::one(), &cross[sigma[j]][sigma[k]]);
            }
        }
        Ok(acc)
    })?;
    Ok(mean)
}

/// `E(ξ) = (m²/4)·∇(||∇C||² - (1/m²) Σ_j ||∇Ĉ_j||²)`.
pub fn xi_expectation_closed<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
) -> Result<ParamVector<T>> {
    let m = T::from_count(partition.num_batches());
    let all = model.all_indices();
    let mut out = model.grad_sq_norm_grad(params, &all)?;
    out.scale(m * m / T::lit(4.0));
    for batch in partition.batches() {
        out.axpy(-T::lit(0.25), &model.grad_sq_norm_grad(params, batch)?);
    }
    Ok(out)
}

/// Mean of `||∇Ĉ - ∇C||²` over every size-`B` subset of the examples.
pub fn minibatch_grad_error_bruteforce<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    batch_size: usize,
    cap: u128,
) -> Result<T> {
    let n = model.num_examples();
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} outside 1..={n}"
        )));
    }
    let full = model.full_grad(params)?;
    let subsets: Vec<Vec<usize>> = enumerate_all_batches(n, batch_size, cap)?.collect();
    let errors = subsets
        .par_iter()
        .map(|s| Ok(model.batch_grad(params, s)?.sub(&full).norm_sq()))
        .collect::<Result<Vec<T>>>()?;
    let total = errors.into_iter().fold(T::zero(), |a, b| a + b);
    Ok(total / T::from_count(subsets.len()))
}

/// `((N - B)/(N - 1))·Γ/B`, zero for a single example.
pub fn minibatch_grad_error_closed<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    batch_size: usize,
) -> Result<T> {
    let coef = batch_error_coefficient::<T>(model.num_examples(), batch_size)?;
    if coef == T::zero() {
        return Ok(T::zero());
    }
    Ok(coef * gamma_trace(model, params)? / T::from_count(batch_size))
}

/// How the expectation over batch orderings was formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PermutationMode {
    Exact {
        orderings: usize,
    },
    MonteCarlo {
        samples: usize,
    },
    /// A single fixed schedule, no averaging.
    Deterministic,
}

impl PermutationMode {
    pub fn label(&self) -> &'static str {
        match self {
            PermutationMode::Exact { .. } => "exact",
            PermutationMode::MonteCarlo { .. } => "mc",
            PermutationMode::Deterministic => "deterministic",
        }
    }

    pub fn samples(&self) -> usize {
        match *self {
            PermutationMode::Exact { orderings } => orderings,
            PermutationMode::MonteCarlo { samples } => samples,
            PermutationMode::Deterministic => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub epsilon: f64,
    pub error_norm: f64,
    /// Estimated error of the reference flow (0 when there is no flow).
    pub reference_error: f64,
    /// Norm of the Monte Carlo standard error (0 when exact).
    pub stderr_norm: f64,
    /// Whether the point entered the slope fit.
    pub used: bool,
}

/// Errors against step size with a least-squares fit of
/// `log(error) = intercept + slope·log(ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
    pub intercept: f64,
    pub mode: PermutationMode,
    pub flow_substeps: usize,
    /// Set when the fit had fewer than two usable points or Monte Carlo
    /// noise exceeded 10% of a measured error.
    pub unreliable: bool,
}

impl ScalingReport {
    pub fn epsilon_max(&self) -> f64 {
        self.rows.first().map_or(f64::NAN, |r| r.epsilon)
    }

    pub fn epsilon_min(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.epsilon)
    }

    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        !self.unreliable && self.slope >= lo && self.slope <= hi
    }

    /// `epsilon,error_norm` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,error_norm\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{}", r.epsilon, r.error_norm);
        }
        out
    }

    /// `slope,intercept,mode,samples,flow_substeps` with one data row.
    pub fn summary_csv(&self) -> String {
        format!(
            "slope,intercept,mode,samples,flow_substeps\n{},{},{},{},{}\n",
            self.slope,
            self.intercept,
            self.mode.label(),
            self.mode.samples(),
            self.flow_substeps
        )
    }
}

/// Points whose error is below this multiple of the reference error are
/// dropped from the fit.
pub const FLOOR_GUARD: f64 = 100.0;

/// Ordinary least squares of `log y` on `log x`; returns `(slope, intercept)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 || !sxy.is_finite() {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn build_report(
    rows: Vec<ScalingRow>,
    mode: PermutationMode,
    flow_substeps: usize,
) -> ScalingReport {
    let mut rows = rows;
    let mut noisy = false;
    for r in &mut rows {
        r.used = r.error_norm > 0.0
            && r.error_norm.is_finite()
            && r.error_norm >= FLOOR_GUARD * r.reference_error;
        if r.stderr_norm > 0.1 * r.error_norm {
            noisy = true;
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.used)
        .map(|r| (r.epsilon, r.error_norm))
        .unzip();
    let fit = fit_loglog(&xs, &ys);
    let (slope, intercept) = fit.unwrap_or((f64::NAN, f64::NAN));
    ScalingReport {
        rows,
        slope,
        intercept,
        mode,
        flow_substeps,
        unreliable: fit.is_none() || noisy,
    }
}

/// Checks that the step sizes decrease by a constant ratio.
pub fn check_geometric<T: Scalar>(values: &[T], min_points: usize) -> Result<()> {
    if values.len() < min_points {
        return Err(Error::InvalidArgument(format!(
            "need at least {min_points} step sizes, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !(*v > T::zero())) {
        return Err(Error::InvalidArgument("step sizes must be positive".into()));
    }
    let ratio = values[1].as_f64() / values[0].as_f64();
    if !(ratio < 1.0) {
        return Err(Error::InvalidArgument(
            "step sizes must strictly decrease".into(),
        ));
    }
    for pair in values.windows(2) {
        let r = pair[1].as_f64() / pair[0].as_f64();
        if (r - ratio).abs() > 1e-9 * ratio {
            return Err(Error::InvalidArgument(
                "step sizes must form a geometric sequence".into(),
            ));
        }
    }
    Ok(())
}

/// `points` step sizes halving from `max_flow_time / m`.
pub fn epsilon_grid<T: Scalar>(m: usize, max_flow_time: f64, points: usize) -> Vec<T> {
    let top = max_flow_time / m as f64;
    (0..points)
        .map(|k| T::lit(top * 0.5f64.powi(k as i32)))
        .collect()
}

/// Flow a scaling experiment is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowTarget {
    Original,
    GdModified,
    SgdModified,
    /// n-step modified loss with the experiment's `n`.
    NsgdModified,
}

impl FlowTarget {
    fn loss<T: Scalar>(self, epsilon: T, n: usize, partition: &BatchPartition) -> FlowLoss<T> {
        match self {
            FlowTarget::Original => FlowLoss::Original,
            FlowTarget::GdModified => FlowLoss::GdModified { epsilon },
            FlowTarget::SgdModified => FlowLoss::SgdModified {
                epsilon,
                partition: partition.clone(),
            },
            FlowTarget::NsgdModified => FlowLoss::NsgdModified {
                epsilon,
                n,
                partition: partition.clone(),
            },
        }
    }
}

impl std::str::FromStr for FlowTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "gd_modified" => Ok(Self::GdModified),
            "sgd_modified" => Ok(Self::SgdModified),
            "nsgd_modified" => Ok(Self::NsgdModified),
            other => Err(Error::InvalidArgument(format!(
                "unknown flow target {other:?}"
            ))),
        }
    }
}

/// Shared inputs of the scaling experiments.
#[derive(Debug, Clone)]
pub struct ScalingSetup<'a, T> {
    pub model: &'a Model<T>,
    pub params: &'a ParamVector<T>,
    pub partition: &'a BatchPartition,
    /// Geometric, decreasing, at least five points.
    pub epsilons: Vec<T>,
    pub flow_substeps: usize,
    /// Above `m!` of this size orderings are sampled instead.
    pub ordering_cap: u128,
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl<'a, T: Scalar> ScalingSetup<'a, T> {
    /// Setup with the default grid (`mε_max = 0.1`, five halvings) and
    /// default flow resolution.
    pub fn new(
        model: &'a Model<T>,
        params: &'a ParamVector<T>,
        partition: &'a BatchPartition,
    ) -> Self {
        Self {
            model,
            params,
            partition,
            epsilons: epsilon_grid(partition.num_batches(), 0.1, 5),
            flow_substeps: crate::flow::DEFAULT_SUBSTEPS,
            ordering_cap: DEFAULT_ORDERING_CAP,
            mc_samples: 10_000,
            mc_seed: 0,
        }
    }

    /// Setup for the two-epoch runs, with the grid chosen so the whole run
    /// spans at most 0.1 units of flow time (`2mε_max = 0.1`).
    pub fn two_epoch(
        model: &'a Model<T>,
        params: &'a ParamVector<T>,
        partition: &'a BatchPartition,
    ) -> Self {
        Self {
            epsilons: epsilon_grid(2 * partition.num_batches(), 0.1, 5),
            ..Self::new(model, params, partition)
        }
    }

    /// Flow endpoint at the configured resolution and an estimate of its
    /// error from a run at twice the resolution (RK4: error ≈ 16/15·diff).
    fn reference(&self, loss: FlowLoss<T>, time: T) -> Result<(ParamVector<T>, f64)> {
        let coarse = integrate_flow(
            self.model,
            self.params,
            &FlowSpec::new(loss.clone(), time, self.flow_substeps)?,
        )?;
        let fine = integrate_flow(
            self.model,
            self.params,
            &FlowSpec::new(loss, time, 2 * self.flow_substeps)?,
        )?;
        let estimate = coarse.sub(&fine).norm().as_f64() * 16.0 / 15.0;
        Ok((coarse, estimate))
    }
}

/// Order-averaged n-step SGD epoch (effective rate ε, bare rate ε/n)
/// compared with gradient flow for time `mε`.
pub fn nstep_scaling_experiment<T: Scalar>(
    setup: &ScalingSetup<'_, T>,
    n: usize,
    target: FlowTarget,
) -> Result<ScalingReport> {
    check_geometric(&setup.epsilons, 5)?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "n-step count must be at least 1".into(),
        ));
    }
    let m = setup.partition.num_batches();
    let exact = enumerate_orderings(m, setup.ordering_cap).is_ok();
    let mut mode = PermutationMode::Deterministic;
    let mut rows = Vec::with_capacity(setup.epsilons.len());
    for &eps in &setup.epsilons {
        let alpha = eps / T::from_count(n);
        let epoch =
            |o: &[usize]| nstep_sgd_epoch(setup.model, setup.params, setup.partition, o, n, alpha);
        let (mean, stderr_norm) = if exact {
            let (mean, count) = mean_over_orderings(m, setup.ordering_cap, epoch)?;
            mode = PermutationMode::Exact { orderings: count };
            (mean, 0.0)
        } else {
            let (mean, se) = sample_over_orderings(m, setup.mc_samples, setup.mc_seed, epoch)?;
            mode = PermutationMode::MonteCarlo {
                samples: setup.mc_samples,
            };
            (mean, se.norm().as_f64())
        };
        let time = T::from_count(m) * eps;
        let (flow, reference_error) =
            setup.reference(target.loss(eps, n, setup.partition), time)?;
        rows.push(ScalingRow {
            epsilon: eps.as_f64(),
            error_norm: mean.sub(&flow).norm().as_f64(),
            reference_error,
            stderr_norm,
            used: false,
        });
    }
    Ok(build_report(rows, mode, setup.flow_substeps))
}

/// `||E(ω_m) - ω(mε)||` against ε for order-averaged SGD.
pub fn error_scaling_experiment<T: Scalar>(
    setup: &ScalingSetup<'_, T>,
    target: FlowTarget,
) -> Result<ScalingReport> {
    nstep_scaling_experiment(setup, 1, target)
}

/// Two-epoch deterministic schedules for [`palindrome_scaling_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoEpochSchedule {
    /// `(0, ..., m-1, m-1, ..., 0)`
    Palindromic,
    /// `(0, ..., m-1, 0, ..., m-1)`
    RepeatedForward,
}

/// A single two-epoch run, no averaging, compared with flow for time `2mε`.
pub fn palindrome_scaling_experiment<T: Scalar>(
    setup: &ScalingSetup<'_, T>,
    schedule: TwoEpochSchedule,
    target: FlowTarget,
) -> Result<ScalingReport> {
    check_geometric(&setup.epsilons, 5)?;
    let m = setup.partition.num_batches();
    let order: Vec<usize> = match schedule {
        TwoEpochSchedule::Palindromic => {
            crate::batching::palindromic_schedule(m).ordering().to_vec()
        }
        TwoEpochSchedule::RepeatedForward => (0..m).chain(0..m).collect(),
    };
    let mut rows = Vec::with_capacity(setup.epsilons.len());
    for &eps in &setup.epsilons {
        let end = run_schedule(
            setup.model,
            setup.params,
            setup.partition,
            &order,
            1,
            eps,
            T::zero(),
        )?;
        let time = T::from_count(2 * m) * eps;
        let (flow, reference_error) =
            setup.reference(target.loss(eps, 1, setup.partition), time)?;
        rows.push(ScalingRow {
            epsilon: eps.as_f64(),
            error_norm: end.sub(&flow).norm().as_f64(),
            reference_error,
            stderr_norm: 0.0,
            used: false,
        });
    }
    Ok(build_report(
        rows,
        PermutationMode::Deterministic,
        setup.flow_substeps,
    ))
}

/// `||n steps of α on one batch - one step of nα||` against α.
pub fn nstep_first_order_check<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    batch: &[usize],
    n: usize,
    alphas: &[T],
) -> Result<ScalingReport> {
    check_geometric(alphas, 2)?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "n-step count must be at least 1".into(),
        ));
    }
    let sub = model_restricted(model, batch)?;
    let partition = BatchPartition::from_batches(vec![(0..batch.len()).collect()])?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let block = run_schedule(&sub, params, &partition, &[0], n, alpha, T::zero())?;
        let single = run_schedule(
            &sub,
            params,
            &partition,
            &[0],
            1,
            alpha * T::from_count(n),
            T::zero(),
        )?;
        rows.push(ScalingRow {
            epsilon: alpha.as_f64(),
            error_norm: block.sub(&single).norm().as_f64(),
            reference_error: 0.0,
            stderr_norm: 0.0,
            used: false,
        });
    }
    Ok(build_report(rows, PermutationMode::Deterministic, 0))
}

/// Copy of `model` whose examples are exactly `batch`, so the batch can be
/// stepped as a one-batch partition.
fn model_restricted<T: Scalar>(model: &Model<T>, batch: &[usize]) -> Result<Model<T>> {
    use crate::model::{Family, QuadraticEnsemble};
    use std::sync::Arc;

    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = model.num_examples();
    if let Some(&index) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index, len: n });
    }
    let restricted = match model.family() {
        Family::Quadratic(q) => {
            let terms = batch.iter().map(|&i| q.terms()[i].clone()).collect();
            Model::quadratic(QuadraticEnsemble::new(q.dim(), terms)?)
        }
        Family::Logistic(_) | Family::Mlp(_) => {
            let data = model.data().expect("data-backed model");
            let features = batch.iter().map(|&i| data.features(i).to_vec()).collect();
            let targets = batch.iter().map(|&i| data.target(i)).collect();
            model.with_data(Arc::new(crate::dataset::Dataset::new(features, targets)?))?
        }
    };
    Ok(restricted.with_weight_decay(model.weight_decay()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::make_partition;
    use crate::model::QuadraticEnsemble;
    use crate::optim::gd_step;

    fn scalar_model(curvatures: &[f64], linear: &[f64]) -> Model<f64> {
        let zeros = vec![0.0; curvatures.len()];
        Model::quadratic(QuadraticEnsemble::scalar(curvatures, linear, &zeros).unwrap())
    }

    #[test]
    fn single_batch_expectation_is_gd() {
        let m = scalar_model(&[1.0, 2.0], &[0.1, 0.3]);
        let w = ParamVector::from_f64(&[0.7]);
        let p = make_partition(2, 2, None).unwrap();
        assert_eq!(
            expected_sgd_iterate_exact(&m, &w, &p, 0.1, DEFAULT_ORDERING_CAP).unwrap(),
            gd_step(&m, &w, 0.1).unwrap()
        );
    }

    #[test]
    fn commuting_orderings_share_the_mean() {
        let m = scalar_model(&[1.0, 2.0, 0.5], &[0.0; 3]);
        let w = ParamVector::from_f64(&[1.0]);
        let p = make_partition(3, 1, None).unwrap();
        let mean = expected_sgd_iterate_exact(&m, &w, &p, 0.05, DEFAULT_ORDERING_CAP).unwrap();
        let one = sgd_epoch(&m, &w, &p, &[2, 0, 1], 0.05).unwrap();
        assert!((mean[0] - one[0]).abs() < 1e-15);
    }

    #[test]
    fn xi_direct_scalar_example() {
        // Ĉ0 = ½ω², Ĉ1 = ω² at ω = 1: both orderings contribute 2.
        let m = scalar_model(&[1.0, 2.0], &[0.0, 0.0]);
        let w = ParamVector::from_f64(&[1.0]);
        let p = make_partition(2, 1, None).unwrap();
        let direct = xi_expectation_direct(&m, &w, &p, DEFAULT_ORDERING_CAP).unwrap();
        let closed = xi_expectation_closed(&m, &w, &p).unwrap();
        assert_eq!(direct.as_slice(), &[2.0]);
        assert!((closed[0] - 2.0).abs() < 1e-14);

        let single = make_partition(2, 2, None).unwrap();
        assert_eq!(
            xi_expectation_direct(&m, &w, &single, DEFAULT_ORDERING_CAP)
                .unwrap()
                .as_slice(),
            &[0.0]
        );
        let zero = ParamVector::zeros(1);
        assert_eq!(
            xi_expectation_closed(&m, &zero, &p).unwrap().as_slice(),
            &[0.0]
        );
    }

    #[test]
    fn minibatch_error_small_cases() {
        let w = ParamVector::zeros(1);
        let two = scalar_model(&[1.0, 1.0], &[1.0, 3.0]);
        assert_eq!(
            minibatch_grad_error_bruteforce(&two, &w, 1, 100).unwrap(),
            1.0
        );
        assert_eq!(
            minibatch_grad_error_bruteforce(&two, &w, 2, 100).unwrap(),
            0.0
        );
        assert_eq!(minibatch_grad_error_closed(&two, &w, 1).unwrap(), 1.0);
        assert_eq!(minibatch_grad_error_closed(&two, &w, 2).unwrap(), 0.0);

        let four = scalar_model(&[1.0; 4], &[0.0, 0.0, 2.0, 2.0]);
        let brute = minibatch_grad_error_bruteforce(&four, &w, 2, 100).unwrap();
        let closed = minibatch_grad_error_closed(&four, &w, 2).unwrap();
        assert!((brute - 1.0 / 3.0).abs() < 1e-15);
        assert!((closed - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn loglog_fit_recovers_power() {
        let xs = [0.1, 0.05, 0.025, 0.0125];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 7.0 * x.powi(3)).collect();
        let (slope, intercept) = fit_loglog(&xs, &ys).unwrap();
        assert!((slope - 3.0).abs() < 1e-12);
        assert!((intercept - 7f64.ln()).abs() < 1e-10);
        assert!(fit_loglog(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn geometric_grid_checks() {
        let grid: Vec<f64> = epsilon_grid(2, 0.1, 5);
        assert_eq!(grid[0], 0.05);
        check_geometric(&grid, 5).unwrap();
        assert!(check_geometric(&grid[..3], 5).is_err());
        assert!(check_geometric(&[0.1, 0.05, 0.02, 0.01, 0.005], 5).is_err());
        assert!(check_geometric(&[0.1, 0.2, 0.4, 0.8, 1.6], 5).is_err());
    }

    #[test]
    fn guard_drops_floor_points() {
        let rows = vec![
            ScalingRow {
                epsilon: 0.1,
                error_norm: 1e-3,
                reference_error: 1e-12,
                stderr_norm: 0.0,
                used: false,
            },
            ScalingRow {
                epsilon: 0.05,
                error_norm: 1.25e-4,
                reference_error: 1e-12,
                stderr_norm: 0.0,
                used: false,
            },
            ScalingRow {
                epsilon: 0.025,
                error_norm: 1e-11,
                reference_error: 1e-12,
                stderr_norm: 0.0,
                used: false,
            },
        ];
        let report = build_report(rows, PermutationMode::Deterministic, 1000);
        assert!(!report.rows[2].used);
        assert!((report.slope - 3.0).abs() < 1e-12);
        assert!(!report.unreliable);
    }

    #[test]
    fn report_serialization() {
        let report = build_report(
            vec![
                ScalingRow {
                    epsilon: 0.5,
                    error_norm: 0.25,
                    reference_error: 0.0,
                    stderr_norm: 0.0,
                    used: false,
                },
                ScalingRow {
                    epsilon: 0.25,
                    error_norm: 0.0625,
                    reference_error: 0.0,
                    stderr_norm: 0.0,
                    used: false,
                },
            ],
            PermutationMode::Exact { orderings: 2 },
            1000,
        );
        assert_eq!(
            report.to_csv(),
            "epsilon,error_norm\n0.5,0.25\n0.25,0.0625\n"
        );
        assert_eq!(
            report.summary_csv(),
            "slope,intercept,mode,samples,flow_substeps\n2,0,exact,2,1000\n"
        );
    }
}
