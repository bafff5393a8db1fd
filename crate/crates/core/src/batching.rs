//! Disjoint batch partitions, epoch schedules and exhaustive enumerations.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default cap on `m!` for exhaustive ordering enumeration (8!).
pub const DEFAULT_ORDERING_CAP: u128 = 40_320;
/// Default cap on `C(N, B)` for exhaustive subset enumeration.
pub const DEFAULT_SUBSET_CAP: u128 = 1_000_000;

/// Split of `0..N` into `m = N / B` disjoint batches of size `B`.
///
/// Indices inside each batch are kept in ascending order so that batch sums
/// are accumulated deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPartition {
    batches: Vec<Vec<usize>>,
    n: usize,
    batch_size: usize,
}

impl BatchPartition {
    /// Consecutive blocks of a (optionally shuffled) index order.
    pub fn new(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if batch_size == 0 || n == 0 {
            return Err(Error::InvalidArgument(
                "dataset size and batch size must be positive".into(),
            ));
        }
        if !n.is_multiple_of(batch_size) {
            return Err(Error::IndivisibleBatch { n, batch_size });
        }
        let mut order: Vec<usize> = (0..n).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let batches = order.chunks(batch_size).map(sorted).collect();
        Ok(Self {
            batches,
            n,
            batch_size,
        })
    }

    /// Partition from explicit batches; they must be equally sized and
    /// cover `0..N` exactly once.
    pub fn from_batches(batches: Vec<Vec<usize>>) -> Result<Self> {
        let batch_size = batches.first().map_or(0, Vec::len);
        if batch_size == 0 || batches.iter().any(|b| b.len() != batch_size) {
            return Err(Error::InvalidArgument(
                "batches must be non-empty and equally sized".into(),
            ));
        }
        let n = batch_size * batches.len();
        let mut seen = vec![false; n];
        for &i in batches.iter().flatten() {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "batches do not partition 0..{n} (index {i})"
                )));
            }
        }
        Ok(Self {
            batches: batches.into_iter().map(|b| sorted(&b)).collect(),
            n,
            batch_size,
        })
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn batch(&self, k: usize) -> &[usize] {
        &self.batches[k]
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_examples(&self) -> usize {
        self.n
    }
}

fn sorted(items: &[usize]) -> Vec<usize> {
    let mut v = items.to_vec();
    v.sort_unstable();
    v
}

/// `make_partition` for a dataset of `n` examples.
pub fn make_partition(
    n: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchPartition> {
    BatchPartition::new(n, batch_size, shuffle_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    InOrder,
    Shuffled(u64),
    /// Forward pass over the batches followed by the same batches reversed.
    Palindromic,
}

/// Sequence of batch indices consumed by one epoch (two for palindromic).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochSchedule {
    ordering: Vec<usize>,
    kind: ScheduleKind,
}

impl EpochSchedule {
    pub fn new(m: usize, kind: ScheduleKind) -> Self {
        let ordering = match kind {
            ScheduleKind::InOrder => (0..m).collect(),
            ScheduleKind::Shuffled(seed) => {
                sample_ordering(m, &mut ChaCha8Rng::seed_from_u64(seed))
            }
            ScheduleKind::Palindromic => (0..m).chain((0..m).rev()).collect(),
        };
        Self { ordering, kind }
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }
}

/// `(0, 1, ..., m-1, m-1, ..., 1, 0)`.
pub fn palindromic_schedule(m: usize) -> EpochSchedule {
    EpochSchedule::new(m, ScheduleKind::Palindromic)
}

/// True when `ordering` is a permutation of `0..m`.
pub fn is_permutation(ordering: &[usize], m: usize) -> bool {
    if ordering.len() != m {
        return false;
    }
    let mut seen = vec![false; m];
    ordering
        .iter()
        .all(|&k| k < m && !std::mem::replace(&mut seen[k], true))
}

fn factorial(m: usize) -> u128 {
    (1..=m as u128)
        .try_fold(1u128, |acc, k| acc.checked_mul(k))
        .unwrap_or(u128::MAX)
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| {
        acc.saturating_mul((n - i) as u128) / (i as u128 + 1)
    })
}

/// All permutations of `0..m` in lexicographic order.
pub fn enumerate_orderings(m: usize, cap: u128) -> Result<impl Iterator<Item = Vec<usize>>> {
    let count = factorial(m);
    if count > cap {
        return Err(Error::EnumerationCap {
            what: "batch orderings",
            count,
            cap,
        });
    }
    Ok((0..m).permutations(m))
}

/// Uniform random permutation of `0..m` (Fisher–Yates).
pub fn sample_ordering<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<usize> {
    let mut ordering: Vec<usize> = (0..m).collect();
    ordering.shuffle(rng);
    ordering
}

/// All size-`B` subsets of `0..N`, each ascending, in lexicographic order.
pub fn enumerate_all_batches(
    n: usize,
    batch_size: usize,
    cap: u128,
) -> Result<impl Iterator<Item = Vec<usize>>> {
    let count = binomial(n, batch_size);
    if count > cap {
        return Err(Error::EnumerationCap {
            what: "batches",
            count,
            cap,
        });
    }
    Ok((0..n).combinations(batch_size))
}

/// Number of unordered partitions of `N` items into blocks of size `B`.
pub fn partition_count(n: usize, batch_size: usize) -> u128 {
    if batch_size == 0 || !n.is_multiple_of(batch_size) {
        return 0;
    }
    // Choose the block holding the smallest remaining index each time.
    let mut count = 1u128;
    let mut remaining = n;
    while remaining > 0 {
        count = count.saturating_mul(binomial(remaining - 1, batch_size - 1));
        remaining -= batch_size;
    }
    count
}

/// Every unordered partition of `0..N` into blocks of size `B`.
///
/// Each partition lists its blocks by their smallest element, so no
/// partition appears twice.
pub fn enumerate_partitions(n: usize, batch_size: usize, cap: u128) -> Result<Vec<BatchPartition>> {
    if batch_size == 0 || !n.is_multiple_of(batch_size) {
        return Err(Error::IndivisibleBatch { n, batch_size });
    }
    let count = partition_count(n, batch_size);
    if count > cap {
        return Err(Error::EnumerationCap {
            what: "partitions",
            count,
            cap,
        });
    }
    fn recurse(
        remaining: &[usize],
        batch_size: usize,
        current: &mut Vec<Vec<usize>>,
        out: &mut Vec<Vec<Vec<usize>>>,
    ) {
        let Some((&first, rest)) = remaining.split_first() else {
            out.push(current.clone());
            return;
        };
        for others in rest.iter().copied().combinations(batch_size - 1) {
            let mut block = vec![first];
            block.extend(&others);
            let left: Vec<usize> = rest
                .iter()
                .copied()
                .filter(|i| !others.contains(i))
                .collect();
            current.push(block);
            recurse(&left, batch_size, current, out);
            current.pop();
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let mut raw = Vec::new();
    recurse(&all, batch_size, &mut Vec::new(), &mut raw);
    raw.into_iter().map(BatchPartition::from_batches).collect()
}
