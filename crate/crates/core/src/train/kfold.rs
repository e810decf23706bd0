use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CqError, Result};

/// Disjoint test folds that together cover every subject once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// Everything outside fold `k`.
    pub fn train_indices(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> =
            self.folds.iter().enumerate().filter(|(i, _)| *i != k).flat_map(|(_, f)| f.iter().copied()).collect();
        out.sort_unstable();
        out
    }
}

/// Seeded shuffle of `0..n` cut into `k` near-equal folds; the first
/// `n mod k` folds take one extra subject.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(CqError::config("folds", "must be at least 1"));
    }
    if k > n {
        return Err(CqError::config("folds", format!("{k} folds for only {n} subjects")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(FoldSplit { folds })
}
