//! Confusion matrices (Female = positive class) and the five derived
//! scores: accuracy, precision, recall, specificity, F1.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::ops::{self, Mode};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::Sample;

/// Binary confusion counts. Class index 0 is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_neg: usize,
    pub false_pos: usize,
    pub true_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_neg + self.false_pos + self.true_neg
    }
}

/// The five scores plus flags for ratios whose denominator was zero
/// (reported as 0 rather than an error so fold aggregation stays total).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub specificity_undefined: bool,
    pub f1_undefined: bool,
}

/// Count binary outcomes; `actual`/`predicted` must use labels 0 and 1,
/// with 0 the positive class.
pub fn confusion(actual: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::Shape {
            op: "confusion",
            axis: "length",
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&a, &p) in actual.iter().zip(predicted) {
        if a > 1 || p > 1 {
            return Err(Error::Data(format!(
                "confusion matrix requires binary labels, got ({a}, {p})"
            )));
        }
        match (a, p) {
            (0, 0) => cm.true_pos += 1,
            (0, 1) => cm.false_neg += 1,
            (1, 0) => cm.false_pos += 1,
            _ => cm.true_neg += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// accuracy = (TP+TN)/total; precision = TP/(TP+FP);
/// specificity = TN/(TN+FP); recall = TP/(TP+FN);
/// f1 = 2*precision*recall / (precision+recall).
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let accuracy = (cm.true_pos + cm.true_neg) as f64 / total as f64;
    let (precision, precision_undefined) = ratio(cm.true_pos, cm.true_pos + cm.false_pos);
    let (recall, recall_undefined) = ratio(cm.true_pos, cm.true_pos + cm.false_neg);
    let (specificity, specificity_undefined) = ratio(cm.true_neg, cm.true_neg + cm.false_pos);
    let (f1, f1_undefined) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        specificity,
        f1,
        precision_undefined,
        recall_undefined,
        specificity_undefined,
        f1_undefined,
    })
}

fn argmax_tie_low(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

const PREDICT_BATCH: usize = 32;

/// Argmax predictions over a dataset in eval mode; ties break toward the
/// lower class index.
pub fn predict_labels(model: &mut ModelGraph, set: &[Sample]) -> Result<Vec<usize>> {
    Ok(predict_probs(model, set)?
        .iter()
        .map(|p| argmax_tie_low(p))
        .collect())
}

/// Per-sample softmax probabilities in eval mode.
pub fn predict_probs(model: &mut ModelGraph, set: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let mut rng = Rng::new(0); // eval mode ignores it
    let classes = model.config.num_classes;
    let mut out = Vec::with_capacity(set.len());
    let idxs: Vec<usize> = (0..set.len()).collect();
    for chunk in idxs.chunks(PREDICT_BATCH) {
        let shape = set[chunk[0]].input.shape();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(chunk.len() * per);
        for &i in chunk {
            data.extend_from_slice(set[i].input.data());
        }
        let batch = Tensor::from_vec(&[chunk.len(), shape[0], shape[1], shape[2]], data);
        let (logits, _) = model.forward(&batch, Mode::Eval, &mut rng)?;
        let probs = ops::softmax_rows(&logits)?;
        for i in 0..chunk.len() {
            out.push(probs.data()[i * classes..(i + 1) * classes].to_vec());
        }
    }
    Ok(out)
}
