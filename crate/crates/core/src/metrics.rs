//! Classification metrics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    Accuracy,
    Loss,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Accuracy => "accuracy",
            Metric::Loss => "loss",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auc" => Ok(Metric::Auc),
            "accuracy" => Ok(Metric::Accuracy),
            "loss" => Ok(Metric::Loss),
            other => Err(Error::contract(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: Metric,
    pub value: f64,
    pub split: String,
    pub n_examples: usize,
}

/// Area under the ROC curve via the Mann–Whitney rank sum.
///
/// Tied scores get their average rank, so a tied positive/negative pair
/// counts one half.
pub fn auc(scores: &[f64], labels: &[u32]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("auc: scores contain NaN"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("auc: label {bad} is not binary")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs at least one positive and one negative example".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ranks are 1-based; ties share the mean of their rank range.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Fraction of positions where the prediction equals the label.
pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "accuracy: {} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty list"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
