use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded random train/test split.
///
/// The test partition receives `floor(n·(1 - ratio))` ids and the training
/// partition the rest, so 103 ids at 0.8 give 83 / 20.
pub fn split_dataset<T: Clone>(ids: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if ids.is_empty() {
        return Err(Error::Empty("split_dataset: no ids".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = ids.len();
    let n_test = ((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = order.split_at(n - n_test);
    Ok((
        train.iter().map(|&i| ids[i].clone()).collect(),
        test.iter().map(|&i| ids[i].clone()).collect(),
    ))
}
