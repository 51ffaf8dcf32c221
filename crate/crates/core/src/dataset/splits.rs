use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Sample, Split};
use crate::error::{Error, Result};

/// Per-split counts for `n` items: floors of `fraction · n`, with the
/// remainder handed to the largest fractional parts (earlier splits win ties).
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).filter(|&j| fractions[j] > 0.0).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n.saturating_sub(counts.iter().sum());
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[j] += 1;
        left -= 1;
    }
    counts
}

/// Stratified, seeded assignment of every sample to train/val/test.
///
/// Within each class the members are shuffled and cut according to
/// `fractions` (train, val, test), so each split's per-class count is within
/// one of `fraction · class_count`.
pub fn make_splits(samples: &[Sample], fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let used = fractions.iter().filter(|f| **f > 0.0).count();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; samples.len()];
    for (class, mut members) in by_class {
        if members.len() < used {
            return Err(Error::Validation(format!(
                "class {class} has {} samples, fewer than the {used} requested splits",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), &fractions);
        let mut it = members.into_iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for i in it.by_ref().take(count) {
                out[i] = split;
            }
        }
    }
    Ok(out)
}
