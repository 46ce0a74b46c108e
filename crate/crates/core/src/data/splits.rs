use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles `ids` with `seed` and deals them into `k` contiguous test chunks
/// (the first `n % k` chunks get one extra id). Training ids keep the input order.
pub fn kfold_splits<T: Clone + PartialEq>(ids: &[T], k: usize, seed: u64) -> Result<Vec<Fold<T>>> {
    if k < 2 {
        return Err(Error::contract(format!("k-fold needs k >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::contract(format!("cannot split {} samples into {k} folds", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut in_test = vec![false; ids.len()];
        let test = order[start..start + len]
            .iter()
            .map(|&i| {
                in_test[i] = true;
                ids[i].clone()
            })
            .collect();
        let train = ids.iter().enumerate().filter(|(i, _)| !in_test[*i]).map(|(_, v)| v.clone()).collect();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(folds)
}
