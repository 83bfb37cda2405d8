use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DatagenError;

/// Latin-hypercube design: `n` rows, one column per range.
///
/// In every column each of the `n` equal-width strata holds exactly one sample,
/// placed uniformly at random inside its stratum.
pub fn lhs_sample(n: usize, ranges: &[(f64, f64)], seed: u64) -> Result<Vec<Vec<f64>>, DatagenError> {
    if n == 0 {
        return Err(DatagenError::TooFewSamples { needed: 1, got: 0 });
    }
    for (dim, &(lo, hi)) in ranges.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(DatagenError::DegenerateRange { dim, lo, hi });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![vec![0.0; ranges.len()]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for (dim, &(lo, hi)) in ranges.iter().enumerate() {
        strata.shuffle(&mut rng);
        let width = (hi - lo) / n as f64;
        for (row, &s) in out.iter_mut().zip(&strata) {
            let jitter: f64 = rng.random();
            // keep the draw strictly inside its stratum despite rounding
            let v = lo + (s as f64 + jitter) * width;
            let stratum_hi = lo + (s + 1) as f64 * width;
            row[dim] = if v >= stratum_hi && s + 1 < n { stratum_hi.next_down() } else { v.min(hi) };
        }
    }
    Ok(out)
}
