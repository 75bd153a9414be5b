//! Ranking metrics, area stratification, saliency, and evaluation reports.

pub mod report;
pub mod saliency;

pub use report::{evaluate, EvalOptions, EvalReport, MetricKind};
pub use saliency::{activation_shift, guided_backprop, localization_accuracy, write_heatmap_png};

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Classes ranked by descending score, ties by ascending index.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Fraction of `true_set` found among the `|true_set|` highest scores.
pub fn topk_accuracy(scores: &[f64], true_set: &[usize]) -> Result<f64> {
    let mut truth = true_set.to_vec();
    truth.sort_unstable();
    truth.dedup();
    if truth.is_empty() {
        return Err(invalid!("top-k accuracy needs a nonempty true set"));
    }
    if let Some(&c) = truth.iter().find(|&&c| c >= scores.len()) {
        return Err(invalid!("class {c} out of range for {} scores", scores.len()));
    }
    let k = truth.len();
    let hits = rank_classes(scores)[..k].iter().filter(|c| truth.binary_search(c).is_ok()).count();
    Ok(hits as f64 / k as f64)
}

/// All-points average precision: the mean, over positives, of precision at
/// each positive's rank. Ranking is by descending score, stable in input
/// order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(invalid!("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Area thresholds `t_1 < t_2 < …`; bin `i` is `[t_i, t_{i+1})` with
/// `t_0 = 0` and a final unbounded bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaBins {
    pub thresholds: Vec<f64>,
}

impl AreaBins {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) || thresholds.iter().any(|t| !t.is_finite()) {
            return Err(invalid!("area thresholds must be finite and increasing"));
        }
        Ok(AreaBins { thresholds })
    }

    /// Small / medium / large split at the 1/3 and 2/3 quantiles of `areas`.
    pub fn thirds(areas: &[usize]) -> Result<Self> {
        if areas.is_empty() {
            return Err(invalid!("no areas to split"));
        }
        let mut s = areas.to_vec();
        s.sort_unstable();
        let q = |f: f64| s[((s.len() as f64 * f).floor() as usize).min(s.len() - 1)] as f64;
        let (a, b) = (q(1.0 / 3.0), q(2.0 / 3.0));
        if a < b {
            AreaBins::new(vec![a, b])
        } else {
            AreaBins::new(vec![a])
        }
    }

    pub fn len(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Left-closed bin index of `area`.
    pub fn bin(&self, area: f64) -> usize {
        self.thresholds.iter().take_while(|&&t| area >= t).count()
    }

    /// `[lo, hi)` of bin `i`; `hi` is `None` for the last bin.
    pub fn bounds(&self, i: usize) -> (f64, Option<f64>) {
        let lo = if i == 0 { 0.0 } else { self.thresholds[i - 1] };
        (lo, self.thresholds.get(i).copied())
    }
}

/// Bin of every area.
pub fn stratify_by_area(areas: &[usize], bins: &AreaBins) -> Vec<usize> {
    areas.iter().map(|&a| bins.bin(a as f64)).collect()
}
