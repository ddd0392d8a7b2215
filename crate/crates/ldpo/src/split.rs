//! Deterministic train/validation/test splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{SplitAssignment, SplitTag};

/// Assign each of `n_items` items to train/validation/test by a seeded
/// shuffle followed by a prefix cut at the cumulative ratios. The realized
/// counts are within one item of `n * ratio` and the result is a pure
/// function of `(n_items, ratios, seed)`.
pub fn make_split(n_items: usize, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
    }
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::invalid("split ratios must be non-negative"));
    }
    if n_items < 3 {
        return Err(Error::invalid(format!(
            "cannot split {n_items} items three ways"
        )));
    }

    let n = n_items as f64;
    let cut1 = (n * ratios[0]).round() as usize;
    let cut2 = (n * (ratios[0] + ratios[1])).round() as usize;
    let counts = [cut1, cut2 - cut1, n_items - cut2];
    for (part, (&count, &ratio)) in counts.iter().zip(&ratios).enumerate() {
        if ratio > 0.0 && count == 0 {
            return Err(Error::invalid(format!(
                "{n_items} items leave part {part} (ratio {ratio}) empty"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut tags = vec![SplitTag::Train; n_items];
    for (pos, &item) in order.iter().enumerate() {
        tags[item] = if pos < cut1 {
            SplitTag::Train
        } else if pos < cut2 {
            SplitTag::Validation
        } else {
            SplitTag::Test
        };
    }
    Ok(SplitAssignment {
        tags,
        seed,
        ratios,
    })
}
