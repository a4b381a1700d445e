use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DomainDataset;
use crate::error::{FanError, Result};

/// A seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Uniform sample of `n` items without replacement, deterministic in `seed`.
pub fn sample_protocol(ds: &DomainDataset, n: usize, seed: u64) -> Result<DomainDataset> {
    if n == 0 || n > ds.len() {
        return Err(FanError::Argument(format!(
            "cannot sample {n} of {} images from {}",
            ds.len(),
            ds.provenance
        )));
    }
    let mut idx = shuffled_indices(ds.len(), seed);
    idx.truncate(n);
    let mut out = ds.select(&idx)?;
    out.provenance = format!("{} [sample {n}, seed {seed}]", ds.provenance);
    Ok(out)
}
