//! Flat `section.key = value` experiment configuration.
//!
//! Every key has a default, so an empty file is a valid config. Lines are
//! `key = value`; `#` starts a comment. Unknown and repeated keys are
//! rejected with the offending line number.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use implicitreg_core::{Activation, FlowTarget, LrDecay, ScheduleMode};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Scaling,
    Palindrome,
    NstepScaling,
    NstepFirstOrder,
    VarianceOracle,
    XiCheck,
    Train,
    Sweep,
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "scaling" => Self::Scaling,
            "palindrome" => Self::Palindrome,
            "nstep-scaling" => Self::NstepScaling,
            "nstep-first-order" => Self::NstepFirstOrder,
            "variance-oracle" => Self::VarianceOracle,
            "xi-check" => Self::XiCheck,
            "train" => Self::Train,
            "sweep" => Self::Sweep,
            other => return Err(format!("unknown experiment {other:?}")),
        })
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scaling => "scaling",
            Self::Palindrome => "palindrome",
            Self::NstepScaling => "nstep-scaling",
            Self::NstepFirstOrder => "nstep-first-order",
            Self::VarianceOracle => "variance-oracle",
            Self::XiCheck => "xi-check",
            Self::Train => "train",
            Self::Sweep => "sweep",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Quadratic,
    Logistic,
    Mlp,
}

impl FromStr for ModelChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "logistic" => Ok(Self::Logistic),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    Clusters,
    Csv,
}

impl FromStr for DatasetChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clusters" => Ok(Self::Clusters),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown dataset kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Epsilon,
    Lambda,
    BatchSize,
    NStep,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "epsilon" => Ok(Self::Epsilon),
            "lambda" => Ok(Self::Lambda),
            "batch_size" => Ok(Self::BatchSize),
            "n_step" => Ok(Self::NStep),
            other => Err(format!("cannot sweep {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub kind: ModelChoice,
    /// Parameter dimension of the quadratic ensemble.
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Seed of the parameters the verification experiments start from.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub kind: DatasetChoice,
    pub n: usize,
    pub test_n: usize,
    pub dim: usize,
    pub clusters_per_class: usize,
    pub center_scale: f64,
    pub noise: f64,
    pub label_noise: f64,
    pub seed: u64,
    pub csv_path: Option<PathBuf>,
    pub test_csv_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epsilon: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_step: usize,
    pub weight_decay: f64,
    pub lr_decay: LrDecay,
    pub schedule: ScheduleMode,
    pub reshuffle_each_epoch: bool,
    pub eval_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySection {
    /// Flow time `mε` covered at the largest step size.
    pub eps_max: f64,
    pub eps_points: usize,
    pub flow_substeps: usize,
    pub mc_samples: usize,
    pub enum_cap: u128,
    /// Number of batches `m`; verification models hold `m·B` examples.
    pub batches: usize,
    pub batch_size: usize,
    pub n_step: usize,
    /// `None` picks the experiment's natural flow (`auto`).
    pub target: Option<FlowTarget>,
    pub control: Option<FlowTarget>,
    pub slope_tolerance: f64,
    pub alpha_max: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
    pub runs_per_point: usize,
    pub keep_best: usize,
    /// Scale `train.epsilon` by `B / train.batch_size` in batch-size sweeps.
    pub scale_epsilon: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub verify: VerifySection,
    pub sweep: SweepSection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Scaling,
            model: ModelSection {
                kind: ModelChoice::Quadratic,
                dim: 4,
                hidden: vec![64, 64],
                activation: Activation::Tanh,
                seed: 0,
            },
            dataset: DatasetSection {
                kind: DatasetChoice::Clusters,
                n: 2048,
                test_n: 4096,
                dim: 20,
                clusters_per_class: 8,
                center_scale: 0.8,
                noise: 1.0,
                label_noise: 0.2,
                seed: 1,
                csv_path: None,
                test_csv_path: None,
            },
            train: TrainSection {
                epsilon: 0.05,
                lambda: 0.0,
                batch_size: 32,
                epochs: 100,
                n_step: 1,
                weight_decay: 0.0,
                lr_decay: LrDecay::None,
                schedule: ScheduleMode::InOrder,
                reshuffle_each_epoch: true,
                eval_every: 1,
                seed: 0,
            },
            verify: VerifySection {
                eps_max: 0.1,
                eps_points: 5,
                flow_substeps: 1000,
                mc_samples: 10_000,
                enum_cap: 40_320,
                batches: 2,
                batch_size: 2,
                n_step: 4,
                target: None,
                control: None,
                slope_tolerance: 0.15,
                alpha_max: 0.04,
                instances: 50,
            },
            sweep: SweepSection {
                parameter: SweepParam::Lambda,
                values: vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6],
                runs_per_point: 7,
                keep_best: 5,
                scale_epsilon: false,
            },
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Every accepted key, in the order they are documented.
pub const KEYS: &[&str] = &[
    "experiment",
    "model.kind",
    "model.dim",
    "model.hidden",
    "model.activation",
    "model.seed",
    "dataset.kind",
    "dataset.n",
    "dataset.test_n",
    "dataset.dim",
    "dataset.clusters_per_class",
    "dataset.center_scale",
    "dataset.noise",
    "dataset.label_noise",
    "dataset.seed",
    "dataset.csv_path",
    "dataset.test_csv_path",
    "train.epsilon",
    "train.lambda",
    "train.batch_size",
    "train.epochs",
    "train.n_step",
    "train.weight_decay",
    "train.lr_decay",
    "train.schedule",
    "train.reshuffle_each_epoch",
    "train.eval_every",
    "train.seed",
    "verify.eps_max",
    "verify.eps_points",
    "verify.flow_substeps",
    "verify.mc_samples",
    "verify.enum_cap",
    "verify.batches",
    "verify.batch_size",
    "verify.n_step",
    "verify.target",
    "verify.control",
    "verify.slope_tolerance",
    "verify.alpha_max",
    "verify.instances",
    "sweep.parameter",
    "sweep.values",
    "sweep.runs_per_point",
    "sweep.keep_best",
    "sweep.scale_epsilon",
    "output.dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| CliError::field(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::field(
            key,
            format!("expected true or false, got {value:?}"),
        )),
    }
}

fn parse_target(key: &str, value: &str) -> Result<Option<FlowTarget>, CliError> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Sets one key. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "experiment" => self.experiment = parse(key, v)?,
            "model.kind" => self.model.kind = parse(key, v)?,
            "model.dim" => self.model.dim = parse(key, v)?,
            "model.hidden" => self.model.hidden = parse_list(key, v)?,
            "model.activation" => self.model.activation = parse(key, v)?,
            "model.seed" => self.model.seed = parse(key, v)?,
            "dataset.kind" => self.dataset.kind = parse(key, v)?,
            "dataset.n" => self.dataset.n = parse(key, v)?,
            "dataset.test_n" => self.dataset.test_n = parse(key, v)?,
            "dataset.dim" => self.dataset.dim = parse(key, v)?,
            "dataset.clusters_per_class" => self.dataset.clusters_per_class = parse(key, v)?,
            "dataset.center_scale" => self.dataset.center_scale = parse(key, v)?,
            "dataset.noise" => self.dataset.noise = parse(key, v)?,
            "dataset.label_noise" => self.dataset.label_noise = parse(key, v)?,
            "dataset.seed" => self.dataset.seed = parse(key, v)?,
            "dataset.csv_path" => self.dataset.csv_path = optional_path(v),
            "dataset.test_csv_path" => self.dataset.test_csv_path = optional_path(v),
            "train.epsilon" => self.train.epsilon = parse(key, v)?,
            "train.lambda" => self.train.lambda = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.n_step" => self.train.n_step = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, v)?,
            "train.schedule" => self.train.schedule = parse(key, v)?,
            "train.reshuffle_each_epoch" => self.train.reshuffle_each_epoch = parse_bool(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "verify.eps_max" => self.verify.eps_max = parse(key, v)?,
            "verify.eps_points" => self.verify.eps_points = parse(key, v)?,
            "verify.flow_substeps" => self.verify.flow_substeps = parse(key, v)?,
            "verify.mc_samples" => self.verify.mc_samples = parse(key, v)?,
            "verify.enum_cap" => self.verify.enum_cap = parse(key, v)?,
            "verify.batch_size" => self.verify.batch_size = parse(key, v)?,
            "verify.n_step" => self.verify.n_step = parse(key, v)?,
            "verify.batches" => self.verify.batches = parse(key, v)?,
            "verify.target" => self.verify.target = parse_target(key, v)?,
            "verify.control" => self.verify.control = parse_target(key, v)?,
            "verify.slope_tolerance" => self.verify.slope_tolerance = parse(key, v)?,
            "verify.alpha_max" => self.verify.alpha_max = parse(key, v)?,
            "verify.instances" => self.verify.instances = parse(key, v)?,
            "sweep.parameter" => self.sweep.parameter = parse(key, v)?,
            "sweep.values" => self.sweep.values = parse_list(key, v)?,
            "sweep.runs_per_point" => self.sweep.runs_per_point = parse(key, v)?,
            "sweep.keep_best" => self.sweep.keep_best = parse(key, v)?,
            "sweep.scale_epsilon" => self.sweep.scale_epsilon = parse_bool(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Usage(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(at(format!("key {key:?} given twice")));
            }
            config.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(config)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {item:?} is not key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Field-level checks that do not depend on the experiment's data.
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::field(key, format!("must be positive, got {v}")))
            }
        };
        let nonzero = |key: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(CliError::field(key, "must be at least 1"))
            }
        };
        positive("train.epsilon", self.train.epsilon)?;
        if !(self.train.lambda >= 0.0) {
            return Err(CliError::field("train.lambda", "must be >= 0"));
        }
        if !(self.train.weight_decay >= 0.0) {
            return Err(CliError::field("train.weight_decay", "must be >= 0"));
        }
        nonzero("train.batch_size", self.train.batch_size)?;
        nonzero("train.epochs", self.train.epochs)?;
        nonzero("train.n_step", self.train.n_step)?;
        nonzero("train.eval_every", self.train.eval_every)?;
        nonzero("dataset.n", self.dataset.n)?;
        nonzero("dataset.dim", self.dataset.dim)?;
        nonzero("model.dim", self.model.dim)?;
        if self.model.hidden.contains(&0) {
            return Err(CliError::field("model.hidden", "widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dataset.label_noise) {
            return Err(CliError::field("dataset.label_noise", "must lie in [0, 1]"));
        }
        if !(self.dataset.noise >= 0.0) {
            return Err(CliError::field("dataset.noise", "must be >= 0"));
        }
        if self.dataset.kind == DatasetChoice::Csv && self.dataset.csv_path.is_none() {
            return Err(CliError::field(
                "dataset.csv_path",
                "required when dataset.kind = csv",
            ));
        }
        positive("verify.eps_max", self.verify.eps_max)?;
        positive("verify.alpha_max", self.verify.alpha_max)?;
        positive("verify.slope_tolerance", self.verify.slope_tolerance)?;
        if self.verify.eps_points < 5 {
            return Err(CliError::field(
                "verify.eps_points",
                "at least 5 step sizes are required",
            ));
        }
        if self.verify.flow_substeps < 100 {
            return Err(CliError::field(
                "verify.flow_substeps",
                "must be at least 100",
            ));
        }
        if self.verify.mc_samples < 2 {
            return Err(CliError::field("verify.mc_samples", "must be at least 2"));
        }
        nonzero("verify.batches", self.verify.batches)?;
        nonzero("verify.batch_size", self.verify.batch_size)?;
        nonzero("verify.n_step", self.verify.n_step)?;
        nonzero("verify.instances", self.verify.instances)?;
        nonzero("sweep.runs_per_point", self.sweep.runs_per_point)?;
        if self.sweep.keep_best == 0 || self.sweep.keep_best > self.sweep.runs_per_point {
            return Err(CliError::field(
                "sweep.keep_best",
                "must lie in 1..=sweep.runs_per_point",
            ));
        }
        if self.experiment == Experiment::Sweep {
            if self.sweep.values.is_empty() {
                return Err(CliError::field(
                    "sweep.values",
                    "at least one value required",
                ));
            }
            for &v in &self.sweep.values {
                let bad = match self.sweep.parameter {
                    SweepParam::Epsilon => !(v > 0.0 && v.is_finite()),
                    SweepParam::Lambda => !(v >= 0.0 && v.is_finite()),
                    SweepParam::BatchSize | SweepParam::NStep => !(v >= 1.0 && v.fract() == 0.0),
                };
                if bad {
                    return Err(CliError::field(
                        "sweep.values",
                        format!("invalid value {v}"),
                    ));
                }
            }
        }
        Ok(())
    }
}
