//! Builds models from a config and runs one experiment, producing the CSV
//! artifacts and headline numbers that end up in the output directory.

use std::fmt::Write as _;
use std::sync::Arc;

use implicitreg_core::batching::{enumerate_partitions, make_partition, partition_count};
use implicitreg_core::flow::{
    expected_modified_loss, modified_loss_sgd, modified_loss_sgd_expanded,
};
use implicitreg_core::optim::train;
use implicitreg_core::verify::{
    epsilon_grid, error_scaling_experiment, minibatch_grad_error_bruteforce,
    minibatch_grad_error_closed, nstep_first_order_check, nstep_scaling_experiment,
    palindrome_scaling_experiment, xi_expectation_closed, xi_expectation_direct,
};
use implicitreg_core::{
    derive_seed, Dataset, FlowTarget, GaussianClusters, MlpArch, Model, QuadraticEnsemble,
    RunRecord, ScalingReport, ScalingSetup, TrainConfig, TwoEpochSchedule,
};
use rayon::prelude::*;

use crate::config::{DatasetChoice, Experiment, ExperimentConfig, ModelChoice, SweepParam};
use crate::error::CliError;

/// Files to write plus the `key = value` lines of `summary.txt`.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<(String, String)>,
    pub summary: Vec<(String, String)>,
    /// False when a verification check fell outside its declared bound.
    pub passed: bool,
}

impl Outcome {
    fn new() -> Self {
        Self {
            passed: true,
            ..Self::default()
        }
    }

    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

type TestData = Option<Arc<Dataset<f64>>>;

/// Training and (optional) test data for the data-backed model kinds.
fn load_data(
    cfg: &ExperimentConfig,
    n: usize,
    data_seed: u64,
) -> Result<(Arc<Dataset<f64>>, TestData), CliError> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetChoice::Clusters => {
            let task = GaussianClusters::new(
                d.dim,
                2,
                d.clusters_per_class,
                d.center_scale,
                d.noise,
                d.label_noise,
                data_seed,
            )?;
            let train = task.sample(n, derive_seed(data_seed, 1, 0))?;
            let test = if d.test_n > 0 {
                Some(Arc::new(
                    task.sample(d.test_n, derive_seed(data_seed, 2, 0))?,
                ))
            } else {
                None
            };
            Ok((Arc::new(train), test))
        }
        DatasetChoice::Csv => {
            let path = d.csv_path.as_ref().expect("validated");
            if !path.exists() {
                return Err(CliError::field(
                    "dataset.csv_path",
                    format!("{} does not exist", path.display()),
                ));
            }
            let train = Dataset::from_csv_path(path)?;
            let test = match &d.test_csv_path {
                Some(p) if !p.exists() => {
                    return Err(CliError::field(
                        "dataset.test_csv_path",
                        format!("{} does not exist", p.display()),
                    ))
                }
                Some(p) => Some(Arc::new(Dataset::from_csv_path(p)?)),
                None => None,
            };
            Ok((Arc::new(train), test))
        }
    }
}

fn num_classes(data: &Dataset<f64>) -> usize {
    let top = (0..data.len()).map(|i| data.class(i)).max().unwrap_or(0);
    (top + 1).max(2)
}

/// Model over `n` examples drawn with `data_seed`, plus test data when the
/// model kind has any. CSV datasets ignore `n`.
pub fn build_model(
    cfg: &ExperimentConfig,
    n: usize,
    data_seed: u64,
) -> Result<(Model<f64>, TestData), CliError> {
    match cfg.model.kind {
        ModelChoice::Quadratic => Ok((
            Model::quadratic(QuadraticEnsemble::random(n, cfg.model.dim, data_seed)?),
            None,
        )),
        ModelChoice::Logistic => {
            let (train, test) = load_data(cfg, n, data_seed)?;
            Ok((Model::logistic(train)?, test))
        }
        ModelChoice::Mlp => {
            let (train, test) = load_data(cfg, n, data_seed)?;
            let mut widths = vec![train.feature_dim()];
            widths.extend(&cfg.model.hidden);
            widths.push(num_classes(&train));
            let arch = MlpArch::new(widths, cfg.model.activation)?;
            Ok((Model::mlp(arch, train)?, test))
        }
    }
}

struct SlopeCheck {
    name: &'static str,
    expected: f64,
}

fn record_report(out: &mut Outcome, report: &ScalingReport, check: SlopeCheck, tolerance: f64) {
    let lo = check.expected - tolerance;
    let hi = check.expected + tolerance;
    let ok = report.slope_within(lo, hi);
    out.file(&format!("{}.csv", check.name), report.to_csv());
    out.file(&format!("{}_summary.csv", check.name), report.summary_csv());
    out.note(&format!("{}_slope", check.name), report.slope);
    out.note(&format!("{}_mode", check.name), report.mode.label());
    out.note(&format!("{}_unreliable", check.name), report.unreliable);
    out.note(
        &format!("{}_slope_check", check.name),
        format!(
            "{:.1}±{} {}",
            check.expected,
            tolerance,
            if ok { "pass" } else { "fail" }
        ),
    );
    out.passed &= ok;
}

fn verification_model(
    cfg: &ExperimentConfig,
) -> Result<(Model<f64>, implicitreg_core::BatchPartition), CliError> {
    let v = &cfg.verify;
    let n = v.batches * v.batch_size;
    let (model, _) = build_model(cfg, n, cfg.dataset.seed)?;
    let partition = make_partition(model.num_examples(), v.batch_size, None)?;
    Ok((model, partition))
}

fn setup<'a>(
    cfg: &ExperimentConfig,
    model: &'a Model<f64>,
    params: &'a implicitreg_core::Params,
    partition: &'a implicitreg_core::BatchPartition,
    horizon_batches: usize,
) -> ScalingSetup<'a, f64> {
    let v = &cfg.verify;
    let mut s = ScalingSetup::new(model, params, partition);
    s.epsilons = epsilon_grid(horizon_batches, v.eps_max, v.eps_points);
    s.flow_substeps = v.flow_substeps;
    s.ordering_cap = v.enum_cap;
    s.mc_samples = v.mc_samples;
    s.mc_seed = derive_seed(cfg.model.seed, 0, 4);
    s
}

fn run_scaling(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let (model, partition) = verification_model(cfg)?;
    let w = model.init_params(cfg.model.seed);
    let m = partition.num_batches();
    let s = setup(cfg, &model, &w, &partition, m);
    let target = cfg.verify.target.unwrap_or(FlowTarget::SgdModified);
    let control = cfg.verify.control.unwrap_or(FlowTarget::Original);
    let tol = cfg.verify.slope_tolerance;
    out.note("batches", m);
    record_report(
        out,
        &error_scaling_experiment(&s, target)?,
        SlopeCheck {
            name: "scaling",
            expected: 3.0,
        },
        tol,
    );
    record_report(
        out,
        &error_scaling_experiment(&s, control)?,
        SlopeCheck {
            name: "control",
            expected: 2.0,
        },
        tol,
    );
    Ok(())
}

fn run_palindrome(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let (model, partition) = verification_model(cfg)?;
    let w = model.init_params(cfg.model.seed);
    let m = partition.num_batches();
    // The two-epoch run covers 2m steps of flow time.
    let s = setup(cfg, &model, &w, &partition, 2 * m);
    let target = cfg.verify.target.unwrap_or(FlowTarget::SgdModified);
    let tol = cfg.verify.slope_tolerance;
    out.note("batches", m);
    let pal = palindrome_scaling_experiment(&s, TwoEpochSchedule::Palindromic, target)?;
    record_report(
        out,
        &pal,
        SlopeCheck {
            name: "palindrome",
            expected: 3.0,
        },
        tol,
    );
    let fwd = palindrome_scaling_experiment(&s, TwoEpochSchedule::RepeatedForward, target)?;
    record_report(
        out,
        &fwd,
        SlopeCheck {
            name: "control",
            expected: 2.0,
        },
        tol,
    );
    Ok(())
}

fn run_nstep_scaling(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let (model, partition) = verification_model(cfg)?;
    let w = model.init_params(cfg.model.seed);
    let m = partition.num_batches();
    let s = setup(cfg, &model, &w, &partition, m);
    let n = cfg.verify.n_step;
    let target = cfg.verify.target.unwrap_or(FlowTarget::NsgdModified);
    let control = cfg.verify.control.unwrap_or(FlowTarget::SgdModified);
    let tol = cfg.verify.slope_tolerance;
    out.note("batches", m);
    out.note("n_step", n);
    record_report(
        out,
        &nstep_scaling_experiment(&s, n, target)?,
        SlopeCheck {
            name: "nstep",
            expected: 3.0,
        },
        tol,
    );
    record_report(
        out,
        &nstep_scaling_experiment(&s, n, control)?,
        SlopeCheck {
            name: "control",
            expected: 2.0,
        },
        tol,
    );
    Ok(())
}

fn run_nstep_first_order(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let (model, partition) = verification_model(cfg)?;
    let w = model.init_params(cfg.model.seed);
    let v = &cfg.verify;
    let alphas: Vec<f64> = (0..v.eps_points)
        .map(|k| v.alpha_max * 0.5f64.powi(k as i32))
        .collect();
    let report = nstep_first_order_check(&model, &w, partition.batch(0), v.n_step, &alphas)?;
    out.note("n_step", v.n_step);
    record_report(
        out,
        &report,
        SlopeCheck {
            name: "first_order",
            expected: 2.0,
        },
        v.slope_tolerance,
    );
    Ok(())
}

fn rel_gap(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        (a - b).abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Relative tolerance of the exact identities.
const IDENTITY_TOL: f64 = 1e-12;

fn run_variance_oracle(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let n = cfg.dataset.n;
    let (model, _) = build_model(cfg, n, cfg.dataset.seed)?;
    let n = model.num_examples();
    let w = model.init_params(cfg.model.seed);
    let cap = cfg.verify.enum_cap.max(1_000_000);

    let mut csv = String::from("batch_size,bruteforce,closed,rel_gap\n");
    let mut worst = 0.0f64;
    for b in (1..=n).filter(|b| n % b == 0) {
        let brute = minibatch_grad_error_bruteforce(&model, &w, b, cap)?;
        let closed = minibatch_grad_error_closed(&model, &w, b)?;
        let gap = rel_gap(brute, closed);
        worst = worst.max(gap);
        let _ = writeln!(csv, "{b},{brute:e},{closed:e},{gap:e}");
    }
    out.file("variance_oracle.csv", csv);
    out.note("max_rel_gap", format!("{worst:e}"));
    out.note(
        "max_rel_gap_check",
        format!("< {IDENTITY_TOL:e} {}", pass(worst < IDENTITY_TOL)),
    );
    out.passed &= worst < IDENTITY_TOL;

    // The two written forms of the SGD modified loss, over random draws.
    let eps = cfg.verify.eps_max / cfg.verify.batches as f64;
    let b = cfg.verify.batch_size;
    let mut identities = String::from("check,instance,gap\n");
    let mut worst_forms = 0.0f64;
    if n % b == 0 {
        for i in 0..cfg.verify.instances {
            let wi = model.init_params(derive_seed(cfg.model.seed, i as u64, 5));
            let p = make_partition(n, b, Some(derive_seed(cfg.dataset.seed, i as u64, 5)))?;
            let direct = modified_loss_sgd(&model, &wi, &p, eps)?;
            let expanded = modified_loss_sgd_expanded(&model, &wi, &p, eps)?;
            let gap = rel_gap(expanded, direct);
            worst_forms = worst_forms.max(gap);
            let _ = writeln!(identities, "loss_forms,{i},{gap:e}");
        }
        out.note("loss_forms_max_rel_gap", format!("{worst_forms:e}"));
        out.passed &= worst_forms < IDENTITY_TOL;

        if partition_count(n, b) <= cfg.verify.enum_cap {
            let partitions = enumerate_partitions(n, b, cfg.verify.enum_cap)?;
            let mut values = Vec::with_capacity(partitions.len());
            for p in &partitions {
                values.push(modified_loss_sgd(&model, &w, p, eps)?);
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let expected = expected_modified_loss(&model, &w, eps, b)?;
            let gap = rel_gap(mean, expected);
            let _ = writeln!(identities, "partition_average,0,{gap:e}");
            out.note("partition_average_rel_gap", format!("{gap:e}"));
            out.passed &= gap < IDENTITY_TOL;
        }
    }
    out.file("identities.csv", identities);
    Ok(())
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn run_xi_check(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let v = &cfg.verify;
    let rows = (0..v.instances)
        .into_par_iter()
        .map(|i| {
            // Batch counts cycle through 2, 3, 4.
            let m = 2 + i % 3;
            let seed = derive_seed(cfg.dataset.seed, i as u64, 6);
            let (model, _) = build_model(cfg, m * v.batch_size, seed)?;
            let w = model.init_params(derive_seed(cfg.model.seed, i as u64, 6));
            let p = make_partition(model.num_examples(), v.batch_size, None)?;
            let direct = xi_expectation_direct(&model, &w, &p, v.enum_cap)?;
            let closed = xi_expectation_closed(&model, &w, &p)?;
            let abs = direct.sub(&closed).max_abs();
            let rel = abs / closed.max_abs().max(f64::MIN_POSITIVE);
            Ok((i, p.num_batches(), abs, rel))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut csv = String::from("instance,m,abs_gap,rel_gap\n");
    let (mut worst_abs, mut worst_rel) = (0.0f64, 0.0f64);
    for (i, m, abs, rel) in rows {
        worst_abs = worst_abs.max(abs);
        worst_rel = worst_rel.max(rel);
        let _ = writeln!(csv, "{i},{m},{abs:e},{rel:e}");
    }
    out.file("xi_check.csv", csv);
    out.note("max_abs_gap", format!("{worst_abs:e}"));
    out.note("max_rel_gap", format!("{worst_rel:e}"));
    let ok = if cfg.model.kind == ModelChoice::Quadratic {
        out.note(
            "gap_check",
            format!("abs < 1e-10 {}", pass(worst_abs < 1e-10)),
        );
        worst_abs < 1e-10
    } else {
        out.note(
            "gap_check",
            format!("rel < 1e-8 {}", pass(worst_rel < 1e-8)),
        );
        worst_rel < 1e-8
    };
    out.passed &= ok;
    Ok(())
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig<f64> {
    let t = &cfg.train;
    TrainConfig {
        epsilon: t.epsilon,
        lambda: t.lambda,
        batch_size: t.batch_size,
        epochs: t.epochs,
        n_step: t.n_step,
        weight_decay: t.weight_decay,
        schedule: t.schedule,
        lr_decay: t.lr_decay,
        reshuffle_each_epoch: t.reshuffle_each_epoch,
        eval_every: t.eval_every,
        seed,
    }
}

/// Initial parameters of a training run with base seed `seed`.
pub fn run_init_seed(seed: u64) -> u64 {
    derive_seed(seed, 0, 1)
}

fn run_train(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let (model, test) = build_model(cfg, cfg.dataset.n, cfg.dataset.seed)?;
    let seed = cfg.train.seed;
    let init = model.init_params(run_init_seed(seed));
    let record = train(&model, &init, test, &train_config(cfg, seed))?;
    out.file("train.csv", record.to_csv());
    out.file("run.txt", record.metadata());
    let show = |v: Option<f64>| v.map_or("NaN".to_string(), |x| x.to_string());
    out.note("best_test_accuracy", show(record.best_test_accuracy()));
    out.note("final_test_accuracy", show(record.final_test_accuracy()));
    out.note("final_c_reg", show(record.final_c_reg()));
    out.note("diverged", record.diverged);
    out.note("final_digest", &record.final_digest);
    Ok(())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One sweep point after keeping the best runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: f64,
    pub mean_best_acc: f64,
    pub std_best_acc: f64,
    pub mean_final_creg: f64,
}

/// Keeps the `keep` runs with the highest best test accuracy (ties broken
/// by run index) and averages them. Runs without an accuracy rank last.
pub fn aggregate(param: f64, runs: &[(f64, f64)], keep: usize) -> SweepRow {
    let mut order: Vec<usize> = (0..runs.len()).collect();
    let key = |i: usize| {
        let acc = runs[i].0;
        if acc.is_nan() {
            f64::NEG_INFINITY
        } else {
            acc
        }
    };
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    order.truncate(keep);
    let accs: Vec<f64> = order.iter().map(|&i| runs[i].0).collect();
    let cregs: Vec<f64> = order.iter().map(|&i| runs[i].1).collect();
    let (mean_best_acc, std_best_acc) = mean_std(&accs);
    SweepRow {
        param,
        mean_best_acc,
        std_best_acc,
        mean_final_creg: mean_std(&cregs).0,
    }
}

fn sweep_config(cfg: &ExperimentConfig, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match cfg.sweep.parameter {
        SweepParam::Epsilon => c.train.epsilon = value,
        SweepParam::Lambda => c.train.lambda = value,
        SweepParam::BatchSize => {
            c.train.batch_size = value as usize;
            if cfg.sweep.scale_epsilon {
                c.train.epsilon = cfg.train.epsilon * value / cfg.train.batch_size as f64;
            }
        }
        SweepParam::NStep => c.train.n_step = value as usize,
    }
    c
}

fn run_sweep(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), CliError> {
    let (model, test) = build_model(cfg, cfg.dataset.n, cfg.dataset.seed)?;
    if test.is_none() {
        return Err(CliError::Usage(
            "sweep needs test data (dataset.test_n > 0 or dataset.test_csv_path)".into(),
        ));
    }
    let s = &cfg.sweep;
    let jobs: Vec<(usize, usize)> = (0..s.values.len())
        .flat_map(|p| (0..s.runs_per_point).map(move |i| (p, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(p, i)| {
            let point = sweep_config(cfg, s.values[p]);
            let seed = derive_seed(cfg.train.seed, p as u64, i as u64);
            let init = model.init_params(run_init_seed(seed));
            let record = train(&model, &init, test.clone(), &train_config(&point, seed))?;
            Ok((seed, record))
        })
        .collect::<Result<Vec<(u64, RunRecord<f64>)>, CliError>>()?;

    let mut runs_csv =
        String::from("param,run,seed,best_test_acc,final_test_acc,final_c_reg,diverged\n");
    let mut sweep_csv = String::from("param,mean_best_acc,std_best_acc,mean_final_creg\n");
    let mut rows = Vec::with_capacity(s.values.len());
    let mut diverged = 0usize;
    for (p, &value) in s.values.iter().enumerate() {
        let chunk = &records[p * s.runs_per_point..(p + 1) * s.runs_per_point];
        let mut stats = Vec::with_capacity(chunk.len());
        for (i, (seed, r)) in chunk.iter().enumerate() {
            let best = r.best_test_accuracy().unwrap_or(f64::NAN);
            let fin = r.final_test_accuracy().unwrap_or(f64::NAN);
            let creg = r.final_c_reg().unwrap_or(f64::NAN);
            diverged += r.diverged as usize;
            let _ = writeln!(
                runs_csv,
                "{value},{i},{seed},{best},{fin},{creg},{}",
                r.diverged
            );
            stats.push((best, creg));
        }
        let row = aggregate(value, &stats, s.keep_best);
        let _ = writeln!(
            sweep_csv,
            "{},{},{},{}",
            row.param, row.mean_best_acc, row.std_best_acc, row.mean_final_creg
        );
        rows.push(row);
    }
    out.file("sweep.csv", sweep_csv);
    out.file("runs.csv", runs_csv);
    let best = rows
        .iter()
        .filter(|r| !r.mean_best_acc.is_nan())
        .max_by(|a, b| a.mean_best_acc.total_cmp(&b.mean_best_acc));
    if let Some(b) = best {
        out.note("best_param", b.param);
        out.note("best_mean_best_acc", b.mean_best_acc);
    }
    out.note("diverged_runs", diverged);
    Ok(())
}

/// Runs the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut out = Outcome::new();
    out.note("experiment", cfg.experiment);
    match cfg.experiment {
        Experiment::Scaling => run_scaling(cfg, &mut out)?,
        Experiment::Palindrome => run_palindrome(cfg, &mut out)?,
        Experiment::NstepScaling => run_nstep_scaling(cfg, &mut out)?,
        Experiment::NstepFirstOrder => run_nstep_first_order(cfg, &mut out)?,
        Experiment::VarianceOracle => run_variance_oracle(cfg, &mut out)?,
        Experiment::XiCheck => run_xi_check(cfg, &mut out)?,
        Experiment::Train => run_train(cfg, &mut out)?,
        Experiment::Sweep => run_sweep(cfg, &mut out)?,
    }
    out.note("passed", out.passed);
    Ok(out)
}
