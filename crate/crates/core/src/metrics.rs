//! Evaluation metrics: confusion counts, accuracy, macro F1, one-vs-rest
//! ROC/AUC and (quadratic weighted) Cohen's kappa.

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::{Error, Result};

/// Rows are truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(Self { classes: k, counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(preds: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::Dimension { expected: truths.len(), got: preds.len() });
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(truths) {
        for c in [p, t] {
            if c >= classes {
                return Err(Error::ClassOutOfRange { class: c, classes });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    /// Classes whose recall or precision was undefined and reported as 0.
    pub undefined: Vec<usize>,
}

pub fn summary(cm: &ConfusionMatrix) -> Result<Summary> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("summary of an empty confusion matrix"));
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut recall = Vec::with_capacity(cm.classes);
    let mut f1 = Vec::with_capacity(cm.classes);
    let mut undefined = Vec::new();
    for c in 0..cm.classes {
        let tp = cm.get(c, c) as f64;
        let r = (rows[c] > 0).then(|| tp / rows[c] as f64);
        let p = (cols[c] > 0).then(|| tp / cols[c] as f64);
        if r.is_none() || p.is_none() {
            undefined.push(c);
        }
        recall.push(r.unwrap_or(0.0));
        let (pv, rv) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
        f1.push(if pv + rv > 0.0 { 2.0 * pv * rv / (pv + rv) } else { 0.0 });
    }
    Ok(Summary {
        accuracy: cm.trace() as f64 / total as f64,
        macro_f1: f1.iter().sum::<f64>() / cm.classes as f64,
        per_class_recall: recall,
        per_class_f1: f1,
        undefined,
    })
}

/// One-vs-rest ROC curve: `(false positive rate, true positive rate)` points
/// from `(0, 0)` to `(1, 1)`, one point per distinct score.
pub type RocCurve = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    /// `None` for classes without positives or without negatives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes; `None` when none is defined.
    pub macro_auc: Option<f64>,
    pub excluded: Vec<usize>,
    #[serde(skip)]
    pub curves: Vec<RocCurve>,
}

/// Trapezoidal ROC curve and area for binary labels.
pub fn binary_roc(scores: &[f64], positive: &[bool]) -> (RocCurve, Option<f64>) {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fpr = if n_neg > 0 { fp as f64 / n_neg as f64 } else { 0.0 };
        let tpr = if n_pos > 0 { tp as f64 / n_pos as f64 } else { 0.0 };
        curve.push((fpr, tpr));
    }
    if n_pos == 0 || n_neg == 0 {
        return (curve, None);
    }
    let auc = curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    (curve, Some(auc))
}

pub fn roc_auc(scores: &Tensor, truths: &[usize]) -> Result<RocReport> {
    if scores.rows() != truths.len() {
        return Err(Error::Dimension { expected: truths.len(), got: scores.rows() });
    }
    let k = scores.cols();
    for (i, row) in scores.iter_rows().enumerate() {
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("score row {i} does not sum to 1")));
        }
    }
    if let Some(&t) = truths.iter().find(|&&t| t >= k) {
        return Err(Error::ClassOutOfRange { class: t, classes: k });
    }
    let mut per_class = Vec::with_capacity(k);
    let mut curves = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for c in 0..k {
        let s: Vec<f64> = scores.iter_rows().map(|r| r[c]).collect();
        let pos: Vec<bool> = truths.iter().map(|&t| t == c).collect();
        let (curve, auc) = binary_roc(&s, &pos);
        if auc.is_none() {
            excluded.push(c);
        }
        per_class.push(auc);
        curves.push(curve);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(RocReport { per_class, macro_auc, excluded, curves })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    None,
    Quadratic,
}

/// `1 - Σ w O / Σ w E` with expected counts from the marginal product.
pub fn kappa(cm: &ConfusionMatrix, weighting: Weighting) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("kappa of an empty confusion matrix"));
    }
    let k = cm.classes;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let w = |i: usize, j: usize| match weighting {
        Weighting::None => f64::from(u8::from(i != j)),
        Weighting::Quadratic => {
            let d = i as f64 - j as f64;
            d * d / ((k - 1) as f64).powi(2)
        }
    };
    let (mut obs, mut exp) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            obs += w(i, j) * cm.get(i, j) as f64;
            exp += w(i, j) * rows[i] as f64 * cols[j] as f64 / total as f64;
        }
    }
    if exp == 0.0 {
        return Err(Error::invalid("kappa undefined: zero expected disagreement"));
    }
    Ok(1.0 - obs / exp)
}

/// Every scalar metric of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: Option<f64>,
    pub qwk: Option<f64>,
    pub macro_auc: Option<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_auc: Vec<Option<f64>>,
    pub undefined_classes: Vec<usize>,
    pub auc_excluded: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(probs: &Tensor, truths: &[usize]) -> Result<(Evaluation, Vec<RocCurve>)> {
    let preds = probs.argmax_rows();
    let cm = confusion(&preds, truths, probs.cols())?;
    let s = summary(&cm)?;
    let roc = roc_auc(probs, truths)?;
    Ok((
        Evaluation {
            accuracy: s.accuracy,
            macro_f1: s.macro_f1,
            kappa: kappa(&cm, Weighting::None).ok(),
            qwk: kappa(&cm, Weighting::Quadratic).ok(),
            macro_auc: roc.macro_auc,
            per_class_recall: s.per_class_recall,
            per_class_auc: roc.per_class,
            undefined_classes: s.undefined,
            auc_excluded: roc.excluded,
            confusion: cm,
        },
        roc.curves,
    ))
}
