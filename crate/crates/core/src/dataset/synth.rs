//! Synthetic radiograph-like images whose label depends on both the image and
//! the subject's metadata.
//!
//! Each image holds one bright band-shaped ridge of intensity `i ~ U[0, 1]`
//! on a dark noisy background. The label counts how many class
//! thresholds `i` exceeds, where every threshold is shifted by a term in sex
//! and age scaled by `beta`. An image-only classifier can only guess the
//! shift, so its best accuracy falls well short of one that also sees the
//! metadata.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::{MetaRecord, Sex};
use crate::tensor::Tensor;

pub const MAX_SYNTH_AGE: f64 = 19.0;
pub const BACKGROUND: f64 = 0.0;
/// Rendered brightness of a ridge of intensity `i` is
/// `RIDGE_FLOOR + (1 − RIDGE_FLOOR)·i`, so even the faintest ridge stands out.
pub const RIDGE_FLOOR: f64 = 0.3;
pub const NOISE_STD: f64 = 0.03;
/// Weight of the sex and age terms in the threshold shift.
pub const SEX_WEIGHT: f64 = 0.3;
pub const AGE_WEIGHT: f64 = 0.3;

fn default_classes() -> usize {
    2
}
fn default_image_size() -> usize {
    32
}
fn default_beta() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Strength of the metadata dependence, in `[0, 1]`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        DatasetSpec {
            num_classes: default_classes(),
            image_size: default_image_size(),
            train,
            val,
            test,
            beta: default_beta(),
            seed: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return fail(format!(
                "split counts must be positive, got train={} val={} test={}",
                self.train, self.val, self.test
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be ≥ 2, got {}", self.num_classes));
        }
        if self.image_size < 16 {
            return fail(format!("image_size must be ≥ 16, got {}", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        Ok(())
    }
}

/// Generator-side facts about a synthetic sample, kept out of the dataset files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub intensity: f64,
    pub ridge: BoundingBox,
}

/// Class of a ridge of intensity `i` for a subject with metadata `meta`.
pub fn label_rule(intensity: f64, meta: &MetaRecord, beta: f64, num_classes: usize) -> usize {
    let s = match meta.sex {
        Sex::Male => 1.0,
        Sex::Female => -1.0,
        Sex::Unknown => 0.0,
    };
    let a = meta.age / MAX_SYNTH_AGE;
    let k = num_classes as f64;
    let shift = beta * (SEX_WEIGHT * s + AGE_WEIGHT * (a - 0.5)) * (2.0 / k);
    (1..num_classes)
        .filter(|&j| intensity > j as f64 / k + shift)
        .count()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn draw_ridge(rng: &mut ChaCha8Rng, size: usize) -> BoundingBox {
    // A full-length band half the image wide, placed on an eighth-image grid.
    let cell = size / 8;
    let short = size / 2;
    let offset = cell * rng.random_range(0..=(size - short) / cell);
    let (top, left, h, w) = if rng.random_bool(0.5) {
        (offset, 0, short, size)
    } else {
        (0, offset, size, short)
    };
    BoundingBox {
        top,
        left,
        bottom: top + h,
        right: left + w,
    }
}

/// Samples in train, val, test order with ids `s00000`, `s00001`, …, plus
/// their ground truth.
pub fn generate_synthetic_with_truth(spec: &DatasetSpec) -> Result<Vec<(Sample, GroundTruth)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let size = spec.image_size;
    let splits = std::iter::repeat_n(Split::Train, spec.train)
        .chain(std::iter::repeat_n(Split::Val, spec.val))
        .chain(std::iter::repeat_n(Split::Test, spec.test));

    let mut out = Vec::with_capacity(spec.total());
    for (n, split) in splits.enumerate() {
        let age = (rng.random_range(0.0..=MAX_SYNTH_AGE) * 100.0).round() / 100.0;
        let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
        let meta = MetaRecord::new(age, sex)?;
        let intensity: f64 = rng.random();
        let ridge = draw_ridge(&mut rng, size);
        let shade = RIDGE_FLOOR + (1.0 - RIDGE_FLOOR) * intensity;
        let mut pixels = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                let base = if ridge.contains(r, c) { shade } else { BACKGROUND };
                pixels.push(quantize(base + noise.sample(&mut rng)));
            }
        }
        let sample = Sample {
            id: format!("s{n:05}"),
            image: Tensor::new(vec![1, size, size], pixels)?,
            meta,
            label: label_rule(intensity, &meta, spec.beta, spec.num_classes),
            split: Some(split),
        };
        out.push((sample, GroundTruth { intensity, ridge }));
    }
    Ok(out)
}

pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    Ok(generate_synthetic_with_truth(spec)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// Empirical accuracies of two brute-force Bayes classifiers fitted on the
/// data itself: one sees only the ridge intensity (binned into `bins`
/// buckets, majority label per bucket), the other applies the generator's
/// threshold rule with the metadata.
pub fn bayes_accuracies(data: &[(Sample, GroundTruth)], beta: f64, num_classes: usize, bins: usize) -> (f64, f64) {
    let n = data.len().max(1) as f64;
    let bin = |i: f64| ((i * bins as f64) as usize).min(bins - 1);
    let mut counts = vec![vec![0usize; num_classes]; bins];
    for (s, t) in data {
        counts[bin(t.intensity)][s.label] += 1;
    }
    let vision: usize = counts.iter().map(|c| c.iter().copied().max().unwrap_or(0)).sum();
    let meta = data
        .iter()
        .filter(|(s, t)| label_rule(t.intensity, &s.meta, beta, num_classes) == s.label)
        .count();
    (vision as f64 / n, meta as f64 / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_beta_ignores_metadata() {
        let young_f = MetaRecord::new(0.0, Sex::Female).unwrap();
        let old_m = MetaRecord::new(19.0, Sex::Male).unwrap();
        for i in 0..100 {
            let i = i as f64 / 100.0 + 0.005;
            assert_eq!(label_rule(i, &young_f, 0.0, 3), label_rule(i, &old_m, 0.0, 3));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = DatasetSpec::new(5, 2, 2);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = DatasetSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn splits_and_ranges() {
        let data = generate_synthetic(&DatasetSpec::new(6, 3, 2)).unwrap();
        assert_eq!(data.len(), 11);
        assert_eq!(data.iter().filter(|s| s.split == Some(Split::Val)).count(), 3);
        for s in &data {
            s.validate(2).unwrap();
            assert!(s.meta.age <= 19.0);
        }
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate_synthetic(&DatasetSpec::new(0, 0, 0)).is_err());
    }

    #[test]
    fn ridge_inside_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let b = draw_ridge(&mut rng, 32);
            assert!(b.bottom <= 32 && b.right <= 32 && b.area() > 0);
        }
    }
}
