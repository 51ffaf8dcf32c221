//! Samples, the synthetic generator, on-disk datasets and split handling.

mod augment;
mod io;
mod splits;
mod summary;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MetaRecord;
use crate::tensor::Tensor;

pub use augment::{balance_by_augmentation, flip_horizontal, rotate};
pub use io::{load_dataset, read_pgm, save_dataset, write_pgm, write_pgm_values, METADATA_HEADER};
pub use splits::make_splits;
pub use summary::{quantile, summarize, SplitSummary};
pub use synth::{
    bayes_accuracies, generate_synthetic, generate_synthetic_with_truth, label_rule, DatasetSpec,
    GroundTruth,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!(
                "split must be train, val or test; got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned pixel rectangle, half-open: rows `top..bottom`, columns `left..right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

/// One labeled grayscale image with its subject metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1 × H × W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub meta: MetaRecord,
    pub label: usize,
    /// `None` until assigned by [`make_splits`].
    pub split: Option<Split>,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.label >= num_classes {
            return Err(Error::Validation(format!(
                "sample `{}`: label {} out of range for {num_classes} classes",
                self.id, self.label
            )));
        }
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Validation(format!(
                "sample `{}`: image must be 1×H×W",
                self.id
            )));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "sample `{}`: pixel values must lie in [0, 1]",
                self.id
            )));
        }
        self.meta.validate()
    }
}

/// Samples whose split is `split`, in order.
pub fn split_of(samples: &[Sample], split: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == Some(split)).collect()
}
