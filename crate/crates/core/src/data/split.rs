use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Random train/validation/test partition.
///
/// Validation and test sizes are `floor(ratio · n)`, at least one each; the
/// remainder goes to training.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Split(format!("ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = ds.len();
    if n < 3 {
        return Err(Error::Split(format!("need at least 3 journeys, got {n}")));
    }
    let n_val = ((r_val * n as f64 + 1e-9).floor() as usize).max(1);
    let n_test = ((r_test * n as f64 + 1e-9).floor() as usize).max(1);
    let n_train = n - n_val - n_test;

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Split));
    let take = |range: std::ops::Range<usize>| {
        let mut part: Vec<usize> = idx[range].to_vec();
        part.sort_unstable();
        ds.with_journeys(part.into_iter().map(|i| ds.journeys[i].clone()).collect())
    };
    Ok(Split {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}
