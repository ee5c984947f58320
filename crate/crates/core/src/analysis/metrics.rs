//! Confusion-matrix metrics and rank AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary classification summary. Ratios are `None` when their denominator
/// is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "acc,sen,spe,auc,tp,tn,fp,fn";

    pub fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        MetricsReport {
            tp,
            tn,
            fp,
            fn_,
            acc: ratio(tp + tn, tp + tn + fp + fn_),
            sen: ratio(tp, tp + fn_),
            spe: ratio(tn, tn + fp),
            auc: None,
        }
    }

    /// Undefined values are written as `NA`.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            f(self.acc),
            f(self.sen),
            f(self.spe),
            f(self.auc),
            self.tp,
            self.tn,
            self.fp,
            self.fn_
        )
    }
}

fn check_binary(values: &[u8], what: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|&&v| v > 1) {
        return Err(Error::invalid("classification_metrics", format!("{what} value {v} is not binary")));
    }
    Ok(())
}

/// Counts with class 1 as positive.
pub fn classification_metrics(predictions: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(
            "classification_metrics",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    check_binary(predictions, "prediction")?;
    check_binary(labels, "label")?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fn_ += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, tn, fp, fn_))
}

/// Metrics at threshold 0.5 plus AUC of the class-1 scores.
pub fn evaluate_scores(scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    let preds: Vec<u8> = scores.iter().map(|&s| (s >= 0.5) as u8).collect();
    let mut r = classification_metrics(&preds, labels)?;
    r.auc = auc_score(scores, labels)?;
    Ok(r)
}

/// Mann-Whitney estimate of `P(pos > neg) + 0.5 P(pos = neg)`; `None` when a
/// class is absent.
pub fn auc_score(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(
            "auc_score",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    check_binary(labels, "label")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { what: "AUC scores".into() });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over runs of tied scores.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}
