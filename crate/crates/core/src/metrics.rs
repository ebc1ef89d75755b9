//! Confusion matrices, IoU / mIoU, pixel accuracy and pseudo-label audits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anchors::ActivationResult;
use crate::error::{Error, Result};
use crate::model::{predict_labels, SegModel};
use crate::synth::Dataset;

/// `C×C` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    categories: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(categories: usize) -> Self {
        Self {
            categories,
            counts: vec![0; categories * categories],
        }
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.categories + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("confusion", &[truth.len()], &[pred.len()]));
        }
        let c = self.categories;
        if let Some(bad) = pred.iter().chain(truth).find(|&&k| k >= c) {
            return Err(Error::Contract(format!("label {bad} outside [0, {c})")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.categories != self.categories {
            return Err(Error::shape(
                "confusion merge",
                &[self.categories],
                &[other.categories],
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    /// Predicted `c` but truly something else.
    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.categories)
            .filter(|&t| t != c)
            .map(|t| self.get(t, c))
            .sum()
    }

    /// Truly `c` but predicted something else.
    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.categories)
            .filter(|&p| p != c)
            .map(|p| self.get(c, p))
            .sum()
    }
}

pub fn confusion(pred: &[usize], truth: &[usize], categories: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(categories);
    cm.add(pred, truth)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryIou {
    pub category: usize,
    /// `None` when the category is absent from both truth and prediction.
    pub iou: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub per_category: Vec<CategoryIou>,
    /// Unweighted mean over categories with a defined IoU.
    pub miou: f64,
}

/// `IoU_c = TP / (TP + FP + FN)`.
pub fn iou(cm: &ConfusionMatrix) -> IouSummary {
    let per_category: Vec<CategoryIou> = (0..cm.categories)
        .map(|c| {
            let (tp, fp, fn_) = (
                cm.true_positives(c),
                cm.false_positives(c),
                cm.false_negatives(c),
            );
            let denom = tp + fp + fn_;
            CategoryIou {
                category: c,
                iou: (denom > 0).then(|| tp as f64 / denom as f64),
                tp,
                fp,
                fn_,
            }
        })
        .collect();
    let defined: Vec<f64> = per_category.iter().filter_map(|c| c.iou).collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    IouSummary { per_category, miou }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_category: Vec<CategoryIou>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub correct_pixels: u64,
    pub total_pixels: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        let summary = iou(&cm);
        let correct: u64 = (0..cm.categories).map(|c| cm.get(c, c)).sum();
        let total = cm.total();
        Self {
            per_category: summary.per_category,
            miou: summary.miou,
            pixel_accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            correct_pixels: correct,
            total_pixels: total,
            confusion: cm,
        }
    }

    /// Tab-separated, one row per category: name, IoU×100, TP, FP, FN,
    /// followed by an `mIoU` row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("category\tiou_x100\ttp\tfp\tfn\n");
        for c in &self.per_category {
            let iou = c
                .iou
                .map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0));
            let _ = writeln!(
                out,
                "class_{}\t{iou}\t{}\t{}\t{}",
                c.category, c.tp, c.fp, c.fn_
            );
        }
        let _ = writeln!(out, "mIoU\t{:.2}\t\t\t", self.miou * 100.0);
        out
    }
}

/// Runs `model` over every grid of `ds` and scores it against the labels.
pub fn evaluate(model: &SegModel, ds: &Dataset) -> Result<EvalReport> {
    if ds.categories() != model.dims().categories {
        return Err(Error::shape(
            "evaluate",
            &[model.dims().categories],
            &[ds.categories()],
        ));
    }
    let mut cm = ConfusionMatrix::new(ds.categories());
    for g in ds.grids() {
        let (_, probs) = model.forward(g)?;
        cm.add(&predict_labels(&probs)?, &g.label_indices()?)?;
    }
    Ok(EvalReport::from_confusion(cm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAudit {
    /// Per pseudo-label category: correct / active. `None` when no pixel
    /// carries that pseudo-label.
    pub precision: Vec<Option<f64>>,
    /// Per oracle category: active / pixels of that category.
    pub coverage: Vec<Option<f64>>,
    pub overall_precision: Option<f64>,
    pub overall_coverage: f64,
    pub active: Vec<u64>,
    pub correct: Vec<u64>,
    pub oracle_pixels: Vec<u64>,
    pub oracle_active: Vec<u64>,
}

pub fn pseudo_label_audit(
    activations: &[ActivationResult],
    oracle: &Dataset,
) -> Result<PseudoLabelAudit> {
    if activations.len() != oracle.len() {
        return Err(Error::shape(
            "pseudo_label_audit",
            &[oracle.len()],
            &[activations.len()],
        ));
    }
    let c = oracle.categories();
    let mut active = vec![0u64; c];
    let mut correct = vec![0u64; c];
    let mut oracle_pixels = vec![0u64; c];
    let mut oracle_active = vec![0u64; c];
    for (act, g) in activations.iter().zip(oracle.grids()) {
        let truth = g.label_indices()?;
        if truth.len() != act.len() {
            return Err(Error::shape(
                "pseudo_label_audit",
                &[truth.len()],
                &[act.len()],
            ));
        }
        for (label, &t) in act.pseudo_labels().iter().zip(&truth) {
            oracle_pixels[t] += 1;
            if let Some(k) = *label {
                if k >= c {
                    return Err(Error::Contract(format!(
                        "pseudo-label {k} outside [0, {c})"
                    )));
                }
                active[k] += 1;
                oracle_active[t] += 1;
                if k == t {
                    correct[k] += 1;
                }
            }
        }
    }
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    let total_active: u64 = active.iter().sum();
    let total_correct: u64 = correct.iter().sum();
    let total_pixels: u64 = oracle_pixels.iter().sum();
    Ok(PseudoLabelAudit {
        precision: correct
            .iter()
            .zip(&active)
            .map(|(&a, &b)| ratio(a, b))
            .collect(),
        coverage: oracle_active
            .iter()
            .zip(&oracle_pixels)
            .map(|(&a, &b)| ratio(a, b))
            .collect(),
        overall_precision: ratio(total_correct, total_active),
        overall_coverage: ratio(total_active, total_pixels).unwrap_or(0.0),
        active,
        correct,
        oracle_pixels,
        oracle_active,
    })
}
