use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded random partition into train/val/test. Sizes are
/// `round(ratio · n)` for train and val, the remainder for test; each part
/// keeps the input order.
pub fn split<R: Clone>(records: &[R], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<R>, Vec<R>, Vec<R>)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = records.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}
