//! Multi-label evaluation: class-centric mean accuracy and the four
//! example-based metrics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AapError, Result};
use crate::matrix::Matrix;
use crate::priors::LabelMatrix;

/// Decision thresholds applied to per-attribute scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thresholds {
    Global(f64),
    PerAttribute(Vec<f64>),
}

impl Thresholds {
    /// `1/k`, the uniform share of a distribution over `k` attributes.
    pub fn uniform(k: usize) -> Self {
        Thresholds::Global(1.0 / k as f64)
    }

    pub fn get(&self, j: usize) -> f64 {
        match self {
            Thresholds::Global(t) => *t,
            Thresholds::PerAttribute(ts) => ts[j],
        }
    }
}

/// `pred_j = 1` iff `score_j >= threshold_j`.
pub fn binarize(scores: &[f64], thresholds: &Thresholds) -> Vec<u8> {
    scores
        .iter()
        .enumerate()
        .map(|(j, &s)| u8::from(s >= thresholds.get(j)))
        .collect()
}

/// Binarizes every row of an `n x k` score matrix.
pub fn binarize_all(scores: &Matrix, thresholds: &Thresholds) -> Vec<Vec<u8>> {
    scores.iter_rows().map(|r| binarize(r, thresholds)).collect()
}

/// Per-attribute thresholds maximizing balanced accuracy on a held-out split.
///
/// Candidates are midpoints between consecutive distinct scores; the lowest
/// best candidate wins. Attributes lacking positives or negatives keep
/// `fallback`.
pub fn calibrate_thresholds(scores: &Matrix, labels: &LabelMatrix, fallback: f64) -> Result<Thresholds> {
    check_shapes(scores.rows(), scores.cols(), labels)?;
    let (n, k) = scores.shape();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let mut col: Vec<(f64, u8)> = (0..n).map(|i| (scores[(i, j)], labels.row(i)[j])).collect();
        let pos = col.iter().filter(|c| c.1 == 1).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            out.push(fallback);
            continue;
        }
        col.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Threshold below everything: every instance predicted positive.
        let mut best_t = col[0].0 - 1.0;
        let mut best_ba = 0.5;
        let (mut fn_, mut tn) = (0usize, 0usize);
        let mut i = 0;
        while i < n {
            let v = col[i].0;
            while i < n && col[i].0 == v {
                if col[i].1 == 1 {
                    fn_ += 1;
                } else {
                    tn += 1;
                }
                i += 1;
            }
            let t = if i < n { 0.5 * (v + col[i].0) } else { v + 1.0 };
            let ba = 0.5 * ((pos - fn_) as f64 / pos as f64 + tn as f64 / neg as f64);
            if ba > best_ba {
                best_ba = ba;
                best_t = t;
            }
        }
        out.push(best_t);
    }
    Ok(Thresholds::PerAttribute(out))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttributeCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl AttributeCounts {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    /// Mean of the defined rates among TPR and TNR.
    pub fn balanced_accuracy(&self) -> f64 {
        let tpr = (self.positives() > 0).then(|| self.tp as f64 / self.positives() as f64);
        let tnr = (self.negatives() > 0).then(|| self.tn as f64 / self.negatives() as f64);
        match (tpr, tnr) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => 0.0,
        }
    }
}

fn check_shapes(n: usize, k: usize, labels: &LabelMatrix) -> Result<()> {
    if n == 0 {
        return Err(AapError::Domain("empty evaluation set".into()));
    }
    if n != labels.n() {
        return Err(AapError::Dimension {
            what: "evaluation rows",
            expected: labels.n(),
            got: n,
        });
    }
    if k != labels.k() {
        return Err(AapError::Dimension {
            what: "evaluation attributes",
            expected: labels.k(),
            got: k,
        });
    }
    Ok(())
}

fn check_preds(preds: &[Vec<u8>], labels: &LabelMatrix) -> Result<()> {
    check_shapes(preds.len(), labels.k(), labels)?;
    if let Some(bad) = preds.iter().find(|p| p.len() != labels.k()) {
        return Err(AapError::Dimension {
            what: "prediction width",
            expected: labels.k(),
            got: bad.len(),
        });
    }
    Ok(())
}

pub fn attribute_counts(preds: &[Vec<u8>], labels: &LabelMatrix) -> Result<Vec<AttributeCounts>> {
    check_preds(preds, labels)?;
    let mut counts = vec![AttributeCounts::default(); labels.k()];
    for (pred, truth) in preds.iter().zip(labels.rows()) {
        for (c, (&p, &t)) in counts.iter_mut().zip(pred.iter().zip(truth)) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
    }
    Ok(counts)
}

/// `mA = mean_j (TPR_j + TNR_j) / 2`. An attribute without positives (or
/// without negatives) contributes its single defined rate.
pub fn mean_accuracy(preds: &[Vec<u8>], labels: &LabelMatrix) -> Result<f64> {
    let counts = attribute_counts(preds, labels)?;
    Ok(counts.iter().map(AttributeCounts::balanced_accuracy).sum::<f64>() / counts.len() as f64)
}

/// Instance-averaged `(accuracy, precision, recall, f1)`; F1 is the harmonic
/// mean of the averaged precision and recall.
pub fn example_based(preds: &[Vec<u8>], labels: &LabelMatrix) -> Result<(f64, f64, f64, f64)> {
    check_preds(preds, labels)?;
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (pred, truth) in preds.iter().zip(labels.rows()) {
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut n_pred = 0usize;
        let mut n_true = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            inter += usize::from(p == 1 && t == 1);
            union += usize::from(p == 1 || t == 1);
            n_pred += usize::from(p == 1);
            n_true += usize::from(t == 1);
        }
        acc += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        prec += if n_pred == 0 {
            if n_true == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            inter as f64 / n_pred as f64
        };
        rec += if n_true == 0 {
            1.0
        } else {
            inter as f64 / n_true as f64
        };
    }
    let n = preds.len() as f64;
    let (acc, prec, rec) = (acc / n, prec / n, rec / n);
    Ok((acc, prec, rec, f1_score(prec, rec)))
}

pub fn f1_score(prec: f64, rec: f64) -> f64 {
    if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeBreakdown {
    pub name: String,
    pub counts: AttributeCounts,
    pub balanced_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ma: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_attribute: Vec<AttributeBreakdown>,
}

impl MetricsReport {
    pub fn evaluate(preds: &[Vec<u8>], labels: &LabelMatrix) -> Result<Self> {
        let counts = attribute_counts(preds, labels)?;
        let (accuracy, precision, recall, f1) = example_based(preds, labels)?;
        let per_attribute: Vec<AttributeBreakdown> = counts
            .iter()
            .zip(labels.schema().names())
            .map(|(c, name)| AttributeBreakdown {
                name: name.clone(),
                counts: *c,
                balanced_accuracy: c.balanced_accuracy(),
            })
            .collect();
        let ma = per_attribute.iter().map(|a| a.balanced_accuracy).sum::<f64>() / per_attribute.len() as f64;
        Ok(MetricsReport {
            ma,
            accuracy,
            precision,
            recall,
            f1,
            per_attribute,
        })
    }

    /// Machine-readable form: a summary block then the per-attribute table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.summary() {
            out.push_str(&format!("{name},{v}\n"));
        }
        out.push_str("\nattribute,tp,fp,tn,fn,balanced_accuracy\n");
        for a in &self.per_attribute {
            let c = a.counts;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                a.name, c.tp, c.fp, c.tn, c.fn_, a.balanced_accuracy
            ));
        }
        out
    }

    fn summary(&self) -> [(&'static str, f64); 5] {
        [
            ("mA", self.ma),
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ]
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in self.summary() {
            writeln!(f, "{name:<10} {:>8.2}%", 100.0 * v)?;
        }
        writeln!(f)?;
        let width = self
            .per_attribute
            .iter()
            .map(|a| a.name.len())
            .max()
            .unwrap_or(9)
            .max(9);
        writeln!(
            f,
            "{:<width$} {:>6} {:>6} {:>6} {:>6} {:>9}",
            "attribute", "tp", "fp", "tn", "fn", "bal.acc"
        )?;
        for a in &self.per_attribute {
            let c = a.counts;
            writeln!(
                f,
                "{:<width$} {:>6} {:>6} {:>6} {:>6} {:>8.2}%",
                a.name,
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                100.0 * a.balanced_accuracy
            )?;
        }
        Ok(())
    }
}
