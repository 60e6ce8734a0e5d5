use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Draws `ceil(n / ratio)` distinct indices of `0..n` uniformly without
/// replacement, returned in ascending order.
pub fn random_subsample(n: usize, ratio: usize, seed: u64) -> Result<Vec<usize>> {
    if ratio < 1 {
        return Err(Error::Config(format!("downsampling ratio must be >= 1, got {ratio}")));
    }
    if n == 0 {
        return Err(Error::Input("cannot subsample zero points".into()));
    }
    let keep = n.div_ceil(ratio);
    if keep == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(idx)
}
