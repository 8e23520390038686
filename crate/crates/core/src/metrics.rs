//! Average precision, recall, confusion matrices and annotation agreement.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationRecord, RelationshipTaxonomy};

/// Non-interpolated average precision: precision is summed at the rank of
/// every positive and divided by the number of positives. Equal scores keep
/// their input order.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::LengthMismatch(scores.len(), positives.len()));
    }
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` for classes absent from the ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean AP over classes present in the ground truth.
    pub map: f64,
    pub per_class_recall: Vec<Option<f64>>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    pub num_samples: usize,
}

impl EvalResult {
    /// Fraction of samples on the confusion diagonal.
    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        correct as f64 / self.num_samples.max(1) as f64
    }
}

fn argmax(p: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Scores probability vectors against hard labels. Class `r` is ranked by
/// `p_r` one-vs-rest; predictions for recall and confusion are the argmax.
pub fn evaluate(predictions: &[Array1<f64>], truths: &[usize], num_classes: usize) -> Result<EvalResult> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptySplit);
    }
    if let Some(p) = predictions.iter().find(|p| p.len() != num_classes) {
        return Err(Error::DimensionMismatch(format!("prediction of length {} for {num_classes} classes", p.len())));
    }
    if let Some(&t) = truths.iter().find(|&&t| t >= num_classes) {
        return Err(Error::DimensionMismatch(format!("label {t} for {num_classes} classes")));
    }

    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (p, &t) in predictions.iter().zip(truths) {
        confusion[t][argmax(p)] += 1;
    }
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .into_par_iter()
        .map(|r| {
            let scores: Vec<f64> = predictions.iter().map(|p| p[r]).collect();
            let positives: Vec<bool> = truths.iter().map(|&t| t == r).collect();
            average_precision(&scores, &positives).ok()
        })
        .collect();
    let per_class_recall = confusion
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let count: u64 = row.iter().sum();
            (count > 0).then(|| row[r] as f64 / count as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalResult { per_class_ap, map, per_class_recall, confusion, num_samples: predictions.len() })
}

/// Sums class probabilities into their domains, in taxonomy domain order.
pub fn collapse_to_domains(probs: &Array1<f64>, taxonomy: &RelationshipTaxonomy) -> Array1<f64> {
    let mut out = Array1::zeros(taxonomy.domains.len());
    for (r, &p) in probs.iter().enumerate() {
        out[taxonomy.domain_of[r]] += p;
    }
    out
}

/// Evaluation at domain granularity.
pub fn evaluate_domains(predictions: &[Array1<f64>], truths: &[usize], taxonomy: &RelationshipTaxonomy) -> Result<EvalResult> {
    let collapsed: Vec<_> = predictions.iter().map(|p| collapse_to_domains(p, taxonomy)).collect();
    let domains: Vec<_> = truths.iter().map(|&t| taxonomy.domain_of[t]).collect();
    evaluate(&collapsed, &domains, taxonomy.domains.len())
}

/// Share of votes agreeing with the majority over consistent records whose
/// majority is `class`.
pub fn agreement_rate(records: &[AnnotationRecord], class: usize) -> Result<f64> {
    let (agreed, total) = records
        .iter()
        .filter(|r| r.is_consistent && r.majority_label == Some(class))
        .fold((0u64, 0u64), |(a, t), r| (a + u64::from(r.votes[class]), t + u64::from(r.total_votes())));
    if total == 0 {
        return Err(Error::NoRecords);
    }
    Ok(agreed as f64 / total as f64)
}
