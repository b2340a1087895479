//! Confusion matrices and intersection-over-union scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelops::{LabelMap, IGNORE_INDEX};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    images: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes], images: 0 }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { num_classes: c, counts: rows.concat(), images: 0 })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// Counts every pixel whose ground truth is not the ignore index.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_INDEX {
                continue;
            }
            if g as usize >= c {
                return Err(Error::LabelOutOfRange { value: g, num_classes: c });
            }
            if p as usize >= c {
                return Err(Error::LabelOutOfRange { value: p, num_classes: c });
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "merge: class count");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.images += other.images;
    }
}

/// How a class with an empty union enters the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    /// Left out of the mean.
    #[default]
    Exclude,
    /// Counted as IoU 0.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// `None` where the class appears in neither prediction nor ground truth.
    pub per_class: Vec<Option<f64>>,
    pub subset: Vec<usize>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub images: usize,
}

/// Per-class IoU and their mean over `subset` (all classes when `None`).
/// When no subset class is defined the mean is reported as 0.
pub fn iou(cm: &ConfusionMatrix, subset: Option<&[usize]>, policy: UndefinedPolicy) -> Result<IoUReport> {
    let c = cm.num_classes;
    let subset: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..c).collect(),
    };
    if subset.is_empty() {
        return Err(Error::InvalidArgument("class subset for mIoU is empty".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&k| k >= c) {
        return Err(Error::InvalidArgument(format!("subset class {bad} is outside [0, {c})")));
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let scores: Vec<f64> = subset
        .iter()
        .filter_map(|&k| match (per_class[k], policy) {
            (Some(v), _) => Some(v),
            (None, UndefinedPolicy::Zero) => Some(0.0),
            (None, UndefinedPolicy::Exclude) => None,
        })
        .collect();
    let miou = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    let total = cm.total();
    let correct: u64 = (0..c).map(|k| cm.get(k, k)).sum();
    let pixel_accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok(IoUReport { per_class, subset, miou, pixel_accuracy, images: cm.images })
}
