//! Training examples: CSV ingestion and seeded synthetic generators.
//!
//! Examples are addressed by zero-based index for the lifetime of a run;
//! batches refer to indices, never to copies of the rows.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `N` examples, each a feature vector of fixed width and a scalar target.
///
/// Targets hold class indices for classification and real values for
/// regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Vec<T>,
    targets: Vec<T>,
    feature_dim: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Vec<Vec<T>>, targets: Vec<T>) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} targets",
                features.len(),
                targets.len()
            )));
        }
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let feature_dim = features[0].len();
        let mut flat = Vec::with_capacity(feature_dim * features.len());
        for row in &features {
            if row.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        if flat.iter().chain(&targets).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset contains NaN or Inf".into()));
        }
        Ok(Self {
            features: flat,
            targets,
            feature_dim,
        })
    }

    /// Reads `feature_0,...,feature_{k-1},target` with a header row.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        Self::from_csv_reader(reader)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        Self::from_csv_reader(reader)
    }

    fn from_csv_reader<R: std::io::Read>(mut reader: csv::Reader<R>) -> Result<Self> {
        let headers = reader.headers()?.clone();
        if headers.len() < 2 || headers.get(headers.len() - 1) != Some("target") {
            return Err(Error::InvalidArgument(
                "csv header must be feature_0,...,feature_{k-1},target".into(),
            ));
        }
        for (i, name) in headers.iter().take(headers.len() - 1).enumerate() {
            if name != format!("feature_{i}") {
                return Err(Error::InvalidArgument(format!(
                    "csv column {i} is named {name:?}, expected \"feature_{i}\""
                )));
            }
        }
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (row_no, record) in reader.records().enumerate() {
            let record = record?;
            let mut row = Vec::with_capacity(record.len());
            for field in record.iter() {
                let x: f64 = field.parse().map_err(|_| {
                    Error::InvalidArgument(format!("row {}: cannot parse {field:?}", row_no + 1))
                })?;
                row.push(T::lit(x));
            }
            let target = row.pop().expect("at least two columns");
            features.push(row);
            targets.push(target);
        }
        Self::new(features, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self, i: usize) -> &[T] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn target(&self, i: usize) -> T {
        self.targets[i]
    }

    /// Target as a class index. Panics on negative or fractional targets,
    /// which [`Dataset::check_classes`] rejects up front.
    pub fn class(&self, i: usize) -> usize {
        self.targets[i].to_usize().expect("class target")
    }

    /// Verifies every target is an integer class index below `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        for (i, &t) in self.targets.iter().enumerate() {
            let ok = t >= T::zero() && t.fract() == T::zero() && t < T::from_count(classes);
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has target {t}, expected a class index below {classes}"
                )));
            }
        }
        Ok(())
    }
}

/// Mixture-of-Gaussians classification task.
///
/// Each class owns `clusters_per_class` centers drawn from a normal with
/// scale `center_scale`; an example is its class's randomly chosen center
/// plus isotropic noise of standard deviation `noise`. Centers are fixed by
/// the task seed so train and test sets can be drawn independently.
#[derive(Debug, Clone)]
pub struct GaussianClusters {
    pub dim: usize,
    pub classes: usize,
    pub clusters_per_class: usize,
    pub noise: f64,
    /// Probability that a sampled label is replaced by a uniformly random class.
    pub label_noise: f64,
    centers: Vec<Vec<f64>>,
}

impl GaussianClusters {
    pub fn new(
        dim: usize,
        classes: usize,
        clusters_per_class: usize,
        center_scale: f64,
        noise: f64,
        label_noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || classes < 2 || clusters_per_class == 0 {
            return Err(Error::InvalidArgument(
                "gaussian clusters need dim >= 1, classes >= 2, clusters_per_class >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&label_noise) || noise < 0.0 {
            return Err(Error::InvalidArgument("noise levels out of range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..classes * clusters_per_class)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        center_scale * z
                    })
                    .collect::<Vec<f64>>()
            })
            .collect();
        Ok(Self {
            dim,
            classes,
            clusters_per_class,
            noise,
            label_noise,
            centers,
        })
    }

    pub fn sample<T: Scalar>(&self, n: usize, seed: u64) -> Result<Dataset<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.random_range(0..self.classes);
            let cluster = rng.random_range(0..self.clusters_per_class);
            let center = &self.centers[class * self.clusters_per_class + cluster];
            let row = center
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(c + self.noise * z)
                })
                .collect();
            let label = if rng.random::<f64>() < self.label_noise {
                rng.random_range(0..self.classes)
            } else {
                class
            };
            features.push(row);
            targets.push(T::from_count(label));
        }
        Dataset::new(features, targets)
    }
}
