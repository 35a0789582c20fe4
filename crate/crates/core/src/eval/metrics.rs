//! Confusion counts and pixel-wise precision / recall / F1 / OA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K×K confusion matrix, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub num_classes: usize,
    pub matrix: Vec<u64>,
}

/// One-vs-rest counts of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            matrix: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.matrix[gt * self.num_classes + pred] += 1;
    }

    /// Associative combination of two tiles' counts.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class counts",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes).map(|k| self.matrix[k * self.num_classes + k]).sum()
    }

    pub fn class(&self, k: usize) -> ClassCounts {
        let n = self.num_classes;
        let tp = self.matrix[k * n + k];
        let row: u64 = self.matrix[k * n..(k + 1) * n].iter().sum();
        let col: u64 = (0..n).map(|g| self.matrix[g * n + k]).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    pub fn per_class(&self) -> Vec<ClassCounts> {
        (0..self.num_classes).map(|k| self.class(k)).collect()
    }
}

/// Counts over pixels whose ground truth is not `ignore`.
pub fn confusion(pred: &[u8], gt: &[u8], num_classes: usize, ignore: Option<u8>) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::new(num_classes);
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            continue;
        }
        if g as usize >= num_classes || p as usize >= num_classes {
            return Err(Error::Invalid(format!(
                "class {} outside 0..{num_classes}",
                g.max(p)
            )));
        }
        c.add(g as usize, p as usize);
    }
    Ok(c)
}

/// `num / den`, or 0 with `undefined = true` when `den == 0`.
fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest accuracy (TP + TN) / total.
    pub oa: f64,
    /// Metrics whose denominator was zero (reported as 0).
    pub undefined: Vec<String>,
}

pub fn class_metrics(class: usize, c: ClassCounts) -> ClassMetrics {
    let mut undefined = Vec::new();
    let precision = ratio(c.tp as f64, (c.tp + c.fp) as f64, "precision", &mut undefined);
    let recall = ratio(c.tp as f64, (c.tp + c.fn_) as f64, "recall", &mut undefined);
    let f1 = ratio(2.0 * precision * recall, precision + recall, "f1", &mut undefined);
    let total = c.tp + c.fp + c.tn + c.fn_;
    let oa = ratio((c.tp + c.tn) as f64, total as f64, "oa", &mut undefined);
    ClassMetrics {
        class,
        precision,
        recall,
        f1,
        oa,
        undefined,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over all classes, background included.
    pub macro_average: Averaged,
    /// Correct pixels over all evaluated pixels, from the full matrix.
    pub overall_accuracy: f64,
    pub total_pixels: u64,
    pub undefined: bool,
}

impl MetricReport {
    pub fn positive(&self, class: usize) -> Option<&ClassMetrics> {
        self.per_class.get(class)
    }
}

pub fn metrics(counts: &ConfusionCounts) -> MetricReport {
    let per_class: Vec<ClassMetrics> = counts
        .per_class()
        .into_iter()
        .enumerate()
        .map(|(k, c)| class_metrics(k, c))
        .collect();
    let k = per_class.len().max(1) as f64;
    let macro_average = Averaged {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
    };
    let total = counts.total();
    let mut flags = Vec::new();
    let overall_accuracy = ratio(counts.correct() as f64, total as f64, "oa", &mut flags);
    let undefined = !flags.is_empty() || per_class.iter().any(|m| !m.undefined.is_empty());
    MetricReport {
        per_class,
        macro_average,
        overall_accuracy,
        total_pixels: total,
        undefined,
    }
}
