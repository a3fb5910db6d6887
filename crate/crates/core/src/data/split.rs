use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, RawTable};

/// Train / validation / test fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Anything carrying per-row labels and protected groups.
pub trait Strata {
    fn labels(&self) -> &[u8];
    fn groups(&self) -> &[u8];
}

impl Strata for Dataset {
    fn labels(&self) -> &[u8] {
        &self.labels
    }
    fn groups(&self) -> &[u8] {
        &self.groups
    }
}

impl Strata for RawTable {
    fn labels(&self) -> &[u8] {
        &self.labels
    }
    fn groups(&self) -> &[u8] {
        &self.groups
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Row indices of each (y, a) cell in ascending order, cells ordered
/// (0,0), (0,1), (1,0), (1,1).
fn cells(data: &impl Strata) -> [Vec<usize>; 4] {
    let mut out: [Vec<usize>; 4] = Default::default();
    for (i, (&y, &a)) in data.labels().iter().zip(data.groups()).enumerate() {
        out[(y as usize) * 2 + a as usize].push(i);
    }
    out
}

fn require_cells(cells: &[Vec<usize>; 4], needed: usize) -> Result<(), DataError> {
    for (c, members) in cells.iter().enumerate() {
        if members.len() < needed {
            return Err(DataError::CellTooSmall {
                y: (c / 2) as u8,
                g: (c % 2) as u8,
                size: members.len(),
                needed,
            });
        }
    }
    Ok(())
}

/// Largest-remainder apportionment of `size` items over `ratios`; equal
/// remainders are ordered by `tie_order`.
fn apportion(size: usize, ratios: &[f64; 3], tie_order: &[usize; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| r / total * size as f64).collect();
    let mut alloc = [0usize; 3];
    for k in 0..3 {
        alloc[k] = quotas[k].floor() as usize;
    }
    let assigned: usize = alloc.iter().sum();
    // Remainders quantized so float noise cannot break genuine ties.
    let rem = |k: usize| ((quotas[k] - quotas[k].floor()) * 1e9).round() as i64;
    let mut order = *tie_order;
    order.sort_by_key(|&k| std::cmp::Reverse(rem(k)));
    for &k in order.iter().take(size - assigned) {
        alloc[k] += 1;
    }
    alloc
}

/// Stratified train/validation/test split over the four (y, a) cells.
pub fn stratified_split(
    data: &impl Strata,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitIndices, DataError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(DataError::InvalidSplit(format!("bad ratios {ratios:?}")));
    }
    let mut cells = cells(data);
    require_cells(&cells, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for members in cells.iter_mut() {
        members.shuffle(&mut rng);
        let mut tie_order = [0, 1, 2];
        tie_order.shuffle(&mut rng);
        let [a, b, _] = apportion(members.len(), &ratios, &tie_order);
        split.train.extend_from_slice(&members[..a]);
        split.validation.extend_from_slice(&members[a..a + b]);
        split.test.extend_from_slice(&members[a + b..]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// `k` stratified folds. Cells are dealt round-robin with a running offset so
/// that fold sizes differ by at most one overall and within every cell.
pub fn kfold(data: &impl Strata, k: usize, seed: u64) -> Result<Vec<Fold>, DataError> {
    if k < 2 {
        return Err(DataError::InvalidSplit(format!(
            "k must be at least 2, got {k}"
        )));
    }
    let mut cells = cells(data);
    require_cells(&cells, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; data.labels().len()];
    let mut offset = 0;
    for members in cells.iter_mut() {
        members.shuffle(&mut rng);
        for (i, &row) in members.iter().enumerate() {
            assignment[row] = (offset + i) % k;
        }
        offset += members.len();
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..assignment.len()).partition(|&i| assignment[i] == f);
            Fold {
                index: f,
                train,
                test,
            }
        })
        .collect())
}

/// Shuffles `indices` once with `epoch_seed` and chunks them; the last batch
/// may be short.
///
/// # Panics
/// If `batch_size < 2`.
pub fn minibatches(indices: &[usize], batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 2, "batch size must be at least 2");
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
