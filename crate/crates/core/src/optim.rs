//! Discrete update rules and the multi-epoch training loop.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batching::{is_permutation, sample_ordering, BatchPartition};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::flow::c_reg;
use crate::model::Model;
use crate::params::ParamVector;
use crate::scalar::Scalar;
use crate::seed::derive_seed;

fn ensure_bounded<T: Scalar>(params: &ParamVector<T>, step: usize) -> Result<()> {
    if params.is_bounded() {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// `ω - ε ∇C(ω)`.
pub fn gd_step<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    epsilon: T,
) -> Result<ParamVector<T>> {
    let grad = model.full_grad(params)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!(
            "full-batch gradient at |ω|∞ = {}",
            params.max_abs()
        )));
    }
    let mut next = params.clone();
    next.axpy(-epsilon, &grad);
    ensure_bounded(&next, 0)?;
    Ok(next)
}

/// Applies `n` steps of rate `rate` on each batch of `schedule` in turn.
///
/// With `lambda > 0` each step follows the gradient of
/// `Ĉ_k + (λ/4)||∇Ĉ_k||²`. Step indices in divergence errors count from 0
/// within this call.
pub fn run_schedule<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    schedule: &[usize],
    n: usize,
    rate: T,
    lambda: T,
) -> Result<ParamVector<T>> {
    if partition.num_examples() != model.num_examples() {
        return Err(Error::InvalidArgument(format!(
            "partition covers {} examples, model has {}",
            partition.num_examples(),
            model.num_examples()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "n-step count must be at least 1".into(),
        ));
    }
    if lambda < T::zero() {
        return Err(Error::InvalidArgument(
            "regularization coefficient must be >= 0".into(),
        ));
    }
    if let Some(&k) = schedule.iter().find(|&&k| k >= partition.num_batches()) {
        return Err(Error::InvalidArgument(format!(
            "schedule refers to batch {k}"
        )));
    }
    params.ensure_dim(model.dim())?;
    let quarter_lambda = lambda / T::lit(4.0);
    let mut w = params.clone();
    let mut step = 0;
    for &k in schedule {
        let batch = partition.batch(k);
        for _ in 0..n {
            let direction = if lambda == T::zero() {
                model.batch_grad(&w, batch)?
            } else {
                let (mut g, penalty) = model.grad_and_sq_norm_grad(&w, batch)?;
                g.axpy(quarter_lambda, &penalty);
                g
            };
            w.axpy(-rate, &direction);
            ensure_bounded(&w, step)?;
            step += 1;
        }
    }
    Ok(w)
}

fn check_ordering(ordering: &[usize], partition: &BatchPartition) -> Result<()> {
    if is_permutation(ordering, partition.num_batches()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "ordering {ordering:?} is not a permutation of 0..{}",
            partition.num_batches()
        )))
    }
}

/// One epoch of SGD: `m` batch-gradient steps in the given order.
pub fn sgd_epoch<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    ordering: &[usize],
    epsilon: T,
) -> Result<ParamVector<T>> {
    check_ordering(ordering, partition)?;
    run_schedule(model, params, partition, ordering, 1, epsilon, T::zero())
}

/// One epoch of n-step SGD with bare rate `alpha`.
pub fn nstep_sgd_epoch<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    ordering: &[usize],
    n: usize,
    alpha: T,
) -> Result<ParamVector<T>> {
    check_ordering(ordering, partition)?;
    run_schedule(model, params, partition, ordering, n, alpha, T::zero())
}

/// One epoch of SGD on `C_mod = C + λ C_reg`, using per-batch gradients of
/// `Ĉ_k + (λ/4)||∇Ĉ_k||²`.
pub fn modified_loss_sgd_epoch<T: Scalar>(
    model: &Model<T>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    ordering: &[usize],
    epsilon: T,
    lambda: T,
) -> Result<ParamVector<T>> {
    check_ordering(ordering, partition)?;
    run_schedule(model, params, partition, ordering, 1, epsilon, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode {
    InOrder,
    /// Batch order re-drawn every epoch from the run seed.
    Shuffled,
    /// Even epochs run forward, odd epochs run the same batches reversed.
    Palindromic,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_order" | "inorder" => Ok(Self::InOrder),
            "shuffled" => Ok(Self::Shuffled),
            "palindromic" => Ok(Self::Palindromic),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InOrder => "in_order",
            Self::Shuffled => "shuffled",
            Self::Palindromic => "palindromic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrDecay {
    None,
    /// Constant for the first `fraction` of training, then halved at the
    /// start of every further `period` fraction of the epoch budget.
    StepHalving {
        fraction: f64,
        period: f64,
    },
}

impl LrDecay {
    /// Multiplier applied to the base rate at `epoch` of `epochs`.
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrDecay::None => 1.0,
            LrDecay::StepHalving { fraction, period } => {
                let progress = epoch as f64 / epochs.max(1) as f64;
                if progress < fraction {
                    1.0
                } else {
                    let halvings = ((progress - fraction) / period + 1e-12).floor() + 1.0;
                    0.5f64.powf(halvings)
                }
            }
        }
    }
}

impl std::str::FromStr for LrDecay {
    type Err = Error;

    /// `none` or `step_halving(fraction,period)`; bare `step_halving`
    /// means `step_halving(0.5,0.1)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(LrDecay::None);
        }
        if s == "step_halving" {
            return Ok(LrDecay::StepHalving {
                fraction: 0.5,
                period: 0.1,
            });
        }
        let bad = || Error::InvalidArgument(format!("cannot parse lr decay {s:?}"));
        let inner = s
            .strip_prefix("step_halving(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let (a, b) = inner.split_once(',').ok_or_else(bad)?;
        let fraction: f64 = a.trim().parse().map_err(|_| bad())?;
        let period: f64 = b.trim().parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&fraction) || !(period > 0.0) {
            return Err(bad());
        }
        Ok(LrDecay::StepHalving { fraction, period })
    }
}

impl std::fmt::Display for LrDecay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrDecay::None => f.write_str("none"),
            LrDecay::StepHalving { fraction, period } => {
                write!(f, "step_halving({fraction},{period})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub epsilon: T,
    pub lambda: T,
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps per batch; the bare rate is `epsilon / n_step`.
    pub n_step: usize,
    pub weight_decay: T,
    pub schedule: ScheduleMode,
    pub lr_decay: LrDecay,
    pub reshuffle_each_epoch: bool,
    /// Evaluate metrics every this many epochs (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(epsilon: T, batch_size: usize, epochs: usize) -> Self {
        Self {
            epsilon,
            lambda: T::zero(),
            batch_size,
            epochs,
            n_step: 1,
            weight_decay: T::zero(),
            schedule: ScheduleMode::InOrder,
            lr_decay: LrDecay::None,
            reshuffle_each_epoch: true,
            eval_every: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.epsilon > T::zero()) || !self.epsilon.is_finite() {
            return fail("learning rate epsilon must be positive");
        }
        if !(self.lambda >= T::zero()) {
            return fail("regularization coefficient lambda must be >= 0");
        }
        if !(self.weight_decay >= T::zero()) {
            return fail("weight decay must be >= 0");
        }
        if self.n_step == 0 {
            return fail("n_step must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1");
        }
        Ok(())
    }
}

/// Metrics after one epoch; NaN where not evaluated or not applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub c_reg_value: f64,
    pub grad_norm_sq: f64,
}

pub const RUN_RECORD_COLUMNS: &str =
    "epoch,train_loss,train_accuracy,test_loss,test_accuracy,c_reg_value,grad_norm_sq";

#[derive(Debug, Clone)]
pub struct RunRecord<T> {
    pub rows: Vec<EpochRow>,
    pub diverged: bool,
    pub final_params: ParamVector<T>,
    pub final_digest: String,
    pub config: TrainConfig<T>,
}

impl<T: Scalar> RunRecord<T> {
    /// Highest test accuracy seen during the run.
    pub fn best_test_accuracy(&self) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| r.test_accuracy)
            .filter(|a| !a.is_nan())
            .reduce(f64::max)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .map(|r| r.test_accuracy)
            .find(|a| !a.is_nan())
    }

    pub fn final_c_reg(&self) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .map(|r| r.c_reg_value)
            .find(|a| !a.is_nan())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RUN_RECORD_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                r.test_loss,
                r.test_accuracy,
                r.c_reg_value,
                r.grad_norm_sq
            );
        }
        out
    }

    /// `key = value` sidecar with the configuration and run outcome.
    pub fn metadata(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "epsilon = {}", c.epsilon);
        let _ = writeln!(out, "lambda = {}", c.lambda);
        let _ = writeln!(out, "batch_size = {}", c.batch_size);
        let _ = writeln!(out, "epochs = {}", c.epochs);
        let _ = writeln!(out, "n_step = {}", c.n_step);
        let _ = writeln!(out, "weight_decay = {}", c.weight_decay);
        let _ = writeln!(out, "schedule = {}", c.schedule);
        let _ = writeln!(out, "lr_decay = {}", c.lr_decay);
        let _ = writeln!(out, "reshuffle_each_epoch = {}", c.reshuffle_each_epoch);
        let _ = writeln!(out, "eval_every = {}", c.eval_every);
        let _ = writeln!(out, "seed = {}", c.seed);
        let _ = writeln!(out, "diverged = {}", self.diverged);
        let _ = writeln!(out, "epochs_completed = {}", self.rows.len());
        let _ = writeln!(out, "final_params_sha256 = {}", self.final_digest);
        out
    }
}

fn evaluate<T: Scalar>(
    model: &Model<T>,
    test: Option<&Model<T>>,
    params: &ParamVector<T>,
    partition: &BatchPartition,
    epoch: usize,
) -> Result<EpochRow> {
    let (loss, grad) = model.full_loss_grad(params)?;
    let train_accuracy = model.accuracy(params)?.unwrap_or(f64::NAN);
    let (test_loss, test_accuracy) = match test {
        Some(t) => (
            t.full_loss(params)?.as_f64(),
            t.accuracy(params)?.unwrap_or(f64::NAN),
        ),
        None => (f64::NAN, f64::NAN),
    };
    Ok(EpochRow {
        epoch,
        train_loss: loss.as_f64(),
        train_accuracy,
        test_loss,
        test_accuracy,
        c_reg_value: c_reg(model, params, partition)?.as_f64(),
        grad_norm_sq: grad.norm_sq().as_f64(),
    })
}

fn skipped_row(epoch: usize) -> EpochRow {
    EpochRow {
        epoch,
        train_loss: f64::NAN,
        train_accuracy: f64::NAN,
        test_loss: f64::NAN,
        test_accuracy: f64::NAN,
        c_reg_value: f64::NAN,
        grad_norm_sq: f64::NAN,
    }
}

/// Trains for `config.epochs` epochs and records per-epoch metrics.
///
/// Weight decay is added to the model's per-example losses. Partitions are
/// drawn from `derive_seed(seed, epoch + 1, 0)` when reshuffling, otherwise
/// once from `derive_seed(seed, 0, 0)`. A diverging run stops early and is
/// returned with `diverged = true`.
pub fn train<T: Scalar>(
    model: &Model<T>,
    init: &ParamVector<T>,
    test: Option<Arc<Dataset<T>>>,
    config: &TrainConfig<T>,
) -> Result<RunRecord<T>> {
    config.validate()?;
    init.ensure_dim(model.dim())?;
    let model = model.with_weight_decay(config.weight_decay);
    let test_model = test.map(|d| model.with_data(d)).transpose()?;
    let n = model.num_examples();
    let fixed = BatchPartition::new(n, config.batch_size, Some(derive_seed(config.seed, 0, 0)))?;
    let rate = |epoch: usize| {
        config.epsilon * T::lit(config.lr_decay.factor(epoch, config.epochs))
            / T::from_count(config.n_step)
    };

    let mut params = init.clone();
    let mut rows = Vec::with_capacity(config.epochs);
    let mut diverged = false;
    for epoch in 0..config.epochs {
        let tag = epoch as u64 + 1;
        let partition = if config.reshuffle_each_epoch {
            BatchPartition::new(n, config.batch_size, Some(derive_seed(config.seed, tag, 0)))?
        } else {
            fixed.clone()
        };
        let m = partition.num_batches();
        let ordering: Vec<usize> = match config.schedule {
            ScheduleMode::InOrder => (0..m).collect(),
            ScheduleMode::Shuffled => sample_ordering(
                m,
                &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, tag, 1)),
            ),
            ScheduleMode::Palindromic if epoch % 2 == 1 => (0..m).rev().collect(),
            ScheduleMode::Palindromic => (0..m).collect(),
        };
        match run_schedule(
            &model,
            &params,
            &partition,
            &ordering,
            config.n_step,
            rate(epoch),
            config.lambda,
        ) {
            Ok(next) => params = next,
            Err(Error::Diverged { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        let done = epoch + 1;
        let row = if done % config.eval_every == 0 || done == config.epochs {
            evaluate(&model, test_model.as_ref(), &params, &partition, done)?
        } else {
            skipped_row(done)
        };
        rows.push(row);
    }
    Ok(RunRecord {
        rows,
        diverged,
        final_digest: params.digest(),
        final_params: params,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::make_partition;
    use crate::model::QuadraticEnsemble;

    fn scalar_model(curvatures: &[f64]) -> Model<f64> {
        let zeros = vec![0.0; curvatures.len()];
        Model::quadratic(QuadraticEnsemble::scalar(curvatures, &zeros, &zeros).unwrap())
    }

    #[test]
    fn gd_contracts_scalar_quadratic() {
        let m = scalar_model(&[1.0]);
        let w = gd_step(&m, &ParamVector::from_f64(&[1.0]), 0.1).unwrap();
        assert_eq!(w.as_slice(), &[0.9]);
        let still = gd_step(&m, &ParamVector::zeros(1), 0.1).unwrap();
        assert_eq!(still.as_slice(), &[0.0]);
    }

    #[test]
    fn gd_at_edge_of_stability_flips_sign() {
        let a = 4.0;
        let m = scalar_model(&[a]);
        let w = gd_step(&m, &ParamVector::from_f64(&[0.75]), 2.0 / a).unwrap();
        assert_eq!(w.as_slice(), &[-0.75]);
    }

    #[test]
    fn gd_reports_divergence() {
        let m = scalar_model(&[1.0]);
        let err = gd_step(&m, &ParamVector::from_f64(&[1e11]), 100.0).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn sgd_epoch_edge_cases() {
        let m = scalar_model(&[1.0, 3.0]);
        let w0 = ParamVector::from_f64(&[1.0]);
        let p = make_partition(2, 1, None).unwrap();
        assert_eq!(sgd_epoch(&m, &w0, &p, &[0, 1], 0.0).unwrap(), w0);
        assert!(sgd_epoch(&m, &w0, &p, &[0, 0], 0.1).is_err());

        let single = make_partition(2, 2, None).unwrap();
        assert_eq!(
            sgd_epoch(&m, &w0, &single, &[0], 0.1).unwrap(),
            gd_step(&m, &w0, 0.1).unwrap()
        );
    }

    #[test]
    fn scalar_factors_commute() {
        let (a0, a1, eps) = (0.5, 2.0, 0.1);
        let m = scalar_model(&[a0, a1]);
        let w0 = ParamVector::from_f64(&[1.0]);
        let p = make_partition(2, 1, None).unwrap();
        let expected = (1.0 - eps * a0) * (1.0 - eps * a1);
        for ordering in [[0, 1], [1, 0]] {
            let w = sgd_epoch(&m, &w0, &p, &ordering, eps).unwrap();
            assert!((w[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn nstep_geometric_contraction() {
        let m = scalar_model(&[1.0]);
        let p = make_partition(1, 1, None).unwrap();
        let w0 = ParamVector::from_f64(&[1.0]);
        for n in [1, 2, 5] {
            let alpha = 0.05;
            let w = nstep_sgd_epoch(&m, &w0, &p, &[0], n, alpha).unwrap();
            assert!((w[0] - (1.0 - alpha).powi(n as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn nstep_block_differs_from_single_step_at_second_order() {
        // (1-α)^n - (1-nα) = C(n,2) α² + O(α³)
        let m = scalar_model(&[1.0]);
        let p = make_partition(1, 1, None).unwrap();
        let w0 = ParamVector::from_f64(&[1.0]);
        let n = 4;
        for alpha in [1e-2, 1e-3] {
            let block = nstep_sgd_epoch(&m, &w0, &p, &[0], n, alpha).unwrap()[0];
            let single = 1.0 - n as f64 * alpha;
            let leading = 6.0 * alpha * alpha;
            let gap = block - single;
            assert!(
                (gap - leading).abs() < 5.0 * leading * alpha * n as f64,
                "{gap} vs {leading}"
            );
        }
    }

    #[test]
    fn modified_loss_step_multiplier() {
        // ½aω²: step multiplier 1 - ε(a + (λ/2)a²)
        let (a, eps, lambda) = (1.5, 0.05, 0.3);
        let m = scalar_model(&[a]);
        let p = make_partition(1, 1, None).unwrap();
        let w = modified_loss_sgd_epoch(&m, &ParamVector::from_f64(&[2.0]), &p, &[0], eps, lambda)
            .unwrap();
        let expected = 2.0 * (1.0 - eps * (a + 0.5 * lambda * a * a));
        assert!((w[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn modified_loss_fixed_point() {
        let m = scalar_model(&[1.0, 2.0]);
        let p = make_partition(2, 1, None).unwrap();
        let w0 = ParamVector::zeros(1);
        assert_eq!(
            modified_loss_sgd_epoch(&m, &w0, &p, &[1, 0], 0.1, 0.5).unwrap(),
            w0
        );
    }

    #[test]
    fn lr_decay_schedule() {
        let d = LrDecay::StepHalving {
            fraction: 0.5,
            period: 0.1,
        };
        assert_eq!(d.factor(0, 100), 1.0);
        assert_eq!(d.factor(49, 100), 1.0);
        assert_eq!(d.factor(50, 100), 0.5);
        assert_eq!(d.factor(59, 100), 0.5);
        assert_eq!(d.factor(60, 100), 0.25);
        assert_eq!(d.factor(99, 100), 0.5f64.powi(5));
        assert_eq!("step_halving(0.5,0.1)".parse::<LrDecay>().unwrap(), d);
        assert_eq!("step_halving".parse::<LrDecay>().unwrap(), d);
        assert_eq!(d.to_string().parse::<LrDecay>().unwrap(), d);
        assert!("cosine".parse::<LrDecay>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(0.1f64, 2, 3);
        c.validate().unwrap();
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(0.1f64, 2, 3);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(0.1f64, 2, 3);
        c.n_step = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(0.1f64, 2, 3);
        c.weight_decay = 5e-4;
        c.validate().unwrap();
    }
}
