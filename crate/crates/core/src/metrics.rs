//! Classification metrics: confusion matrix, one-vs-rest rates, ROC and AUC.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A ratio whose denominator may be zero. Serialized as a number, or as the
/// string `"undefined"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rate {
    Defined(f64),
    Undefined,
}

pub const UNDEFINED: &str = "undefined";

impl Rate {
    pub fn ratio(num: u64, den: u64) -> Rate {
        if den == 0 {
            Rate::Undefined
        } else {
            Rate::Defined(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Defined(v) => Some(v),
            Rate::Undefined => None,
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Defined(v) => write!(f, "{v:.4}"),
            Rate::Undefined => f.write_str(UNDEFINED),
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rate::Defined(v) => s.serialize_f64(*v),
            Rate::Undefined => s.serialize_str(UNDEFINED),
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Rate::Defined(v)),
            Raw::Str(s) if s == UNDEFINED => Ok(Rate::Undefined),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"{UNDEFINED}\", got \"{s}\""
            ))),
        }
    }
}

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { counts: rows })
    }

    pub fn from_pairs(num_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(num_classes);
        for (t, p) in pairs {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.num_classes();
        if truth >= k || predicted >= k {
            return Err(Error::Validation(format!(
                "class pair ({truth}, {predicted}) out of range for {k} classes"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn accuracy(&self) -> Rate {
        Rate::ratio(self.trace(), self.total())
    }

    fn tp_fp_fn_tn(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[k][k];
        let row: u64 = self.counts[k].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[k]).sum();
        let (fn_, fp) = (row - tp, col - tp);
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }
}

/// TP / (TP + FN) for class `k` against the rest.
pub fn sensitivity(cm: &ConfusionMatrix, k: usize) -> Rate {
    let (tp, _, fn_, _) = cm.tp_fp_fn_tn(k);
    Rate::ratio(tp, tp + fn_)
}

/// TN / (TN + FP).
pub fn specificity(cm: &ConfusionMatrix, k: usize) -> Rate {
    let (_, fp, _, tn) = cm.tp_fp_fn_tn(k);
    Rate::ratio(tn, tn + fp)
}

/// TP / (TP + FP).
pub fn precision(cm: &ConfusionMatrix, k: usize) -> Rate {
    let (tp, fp, _, _) = cm.tp_fp_fn_tn(k);
    Rate::ratio(tp, tp + fp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

/// Mann–Whitney AUC (ties count one half) and the ROC curve traced by
/// predicting positive for `score ≥ threshold` over every distinct score,
/// from high to low. The first point has threshold `+∞` and sits at (0, 0).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "roc_auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("roc_auc: scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(
            "roc_auc needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // Twice the number of correctly ordered pairs, so that ties stay integral.
    let mut doubled_wins: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // Negatives in this group rank below every positive seen so far and tie with this group's.
        doubled_wins += gn as u128 * (2 * tp as u128 + gp as u128);
        tp += gp;
        fp += gn;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve {
        auc: doubled_wins as f64 / (2 * pos as u128 * neg as u128) as f64,
        points,
    })
}

/// Writes `threshold,fpr,tpr` rows.
pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_three_class_example() {
        let cm = ConfusionMatrix::from_rows(vec![vec![3, 1, 0], vec![0, 4, 0], vec![1, 0, 3]]).unwrap();
        assert_eq!(sensitivity(&cm, 0), Rate::Defined(0.75));
        assert_eq!(precision(&cm, 0), Rate::Defined(0.75));
        assert_eq!(specificity(&cm, 0), Rate::Defined(7.0 / 8.0));
        assert_eq!(cm.accuracy(), Rate::Defined(10.0 / 12.0));
    }

    #[test]
    fn worked_binary_example() {
        let cm = ConfusionMatrix::from_rows(vec![vec![2, 2], vec![1, 5]]).unwrap();
        assert_eq!(sensitivity(&cm, 0), Rate::Defined(0.5));
        assert_eq!(specificity(&cm, 0), Rate::Defined(5.0 / 6.0));
        assert_eq!(precision(&cm, 0), Rate::Defined(2.0 / 3.0));
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_rows(vec![vec![5, 0], vec![0, 5]]).unwrap();
        for f in [sensitivity, specificity, precision] {
            assert_eq!(f(&cm, 0), Rate::Defined(1.0));
        }
    }

    #[test]
    fn never_predicted_class_has_undefined_precision() {
        let cm = ConfusionMatrix::from_rows(vec![vec![0, 3], vec![0, 2]]).unwrap();
        assert_eq!(precision(&cm, 0), Rate::Undefined);
        assert_eq!(serde_json::to_string(&precision(&cm, 0)).unwrap(), "\"undefined\"");
        let back: Rate = serde_json::from_str("\"undefined\"").unwrap();
        assert_eq!(back, Rate::Undefined);
    }

    #[test]
    fn auc_examples() {
        let r = roc_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, 0.75);
        let r = roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.points.len(), 2);
        let r = roc_auc(&[0.8, 0.9, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, 1.0);
        let last = r.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn single_class_labels_rejected() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }
}
