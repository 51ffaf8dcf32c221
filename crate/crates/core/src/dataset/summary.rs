use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub total: usize,
    /// Split name (`train`, `val`, `test`, or `unassigned`) → count per class.
    pub class_counts: BTreeMap<String, Vec<usize>>,
    /// `F`, `M`, `U` → count.
    pub sex_counts: BTreeMap<String, usize>,
    pub age_min: f64,
    /// First quartile, median, third quartile.
    pub age_quartiles: [f64; 3],
    pub age_max: f64,
    pub age_mean: f64,
}

/// Quantile `q ∈ [0, 1]` of sorted `values`, interpolating linearly between
/// order statistics at position `q · (n − 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(samples: &[Sample]) -> Result<SplitSummary> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot summarize an empty dataset".into()));
    }
    let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut class_counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut sex_counts: BTreeMap<String, usize> =
        ["F", "M", "U"].iter().map(|s| (s.to_string(), 0)).collect();
    for s in samples {
        let split = s.split.map(|x| x.name()).unwrap_or("unassigned");
        class_counts
            .entry(split.to_string())
            .or_insert_with(|| vec![0; num_classes])[s.label] += 1;
        *sex_counts.entry(s.meta.sex.code().to_string()).or_default() += 1;
    }
    let mut ages: Vec<f64> = samples.iter().map(|s| s.meta.age).collect();
    ages.sort_by(f64::total_cmp);
    Ok(SplitSummary {
        total: samples.len(),
        class_counts,
        sex_counts,
        age_min: ages[0],
        age_quartiles: [quantile(&ages, 0.25), quantile(&ages, 0.5), quantile(&ages, 0.75)],
        age_max: ages[ages.len() - 1],
        age_mean: ages.iter().sum::<f64>() / ages.len() as f64,
    })
}
