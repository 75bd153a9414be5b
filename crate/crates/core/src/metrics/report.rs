//! Test-set evaluation of a parameter set into an [`EvalReport`].

use super::saliency::{guided_backprop, localization_accuracy};
use super::{average_precision, rank_classes, stratify_by_area, topk_accuracy, AreaBins};
use crate::autodiff::ParamSet;
use crate::data::{make_context_sets, Sample};
use crate::error::{invalid, Error, Result};
use crate::nn::{predict, Head, NetworkSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Mean top-k accuracy with `k` = number of distinct classes present.
    #[default]
    Topk,
    /// Mean over classes of all-points average precision.
    Ap,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(MetricKind::Topk),
            "ap" => Ok(MetricKind::Ap),
            _ => Err(invalid!("unknown metric {s:?} (expected topk or ap)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metric: MetricKind,
    /// Stratify by object area; `Some(None)` uses thirds of the observed
    /// areas.
    pub stratify: Option<Option<AreaBins>>,
    /// Evaluate in-context vs out-of-context sets for every class.
    pub context: bool,
    pub context_seed: u64,
    /// Guided-backprop localization over (at most `localization_limit`)
    /// test samples.
    pub localization: bool,
    pub localization_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub bin: usize,
    pub lo: f64,
    pub hi: Option<f64>,
    pub instances: usize,
    /// `None` when the bin has no usable instance.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextResult {
    pub class: usize,
    pub positives: usize,
    pub negatives: usize,
    pub in_context: f64,
    pub out_of_context: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Mean over classes of the per-class mean over instances.
    pub mean: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub instances: usize,
    /// Instances whose heatmap was all zero.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: Option<usize>,
    pub metric: MetricKind,
    pub samples: usize,
    pub instances: usize,
    /// Headline value: mean top-k accuracy or mAP.
    pub value: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub strata: Vec<Stratum>,
    pub context: Vec<ContextResult>,
    pub localization: Option<Localization>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn check_metric(net: &NetworkSpec, metric: MetricKind) -> Result<()> {
    if metric == MetricKind::Ap && net.head != Head::IndependentSigmoid {
        return Err(invalid!("average precision needs the independent sigmoid head"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-class AP over samples, for classes with at least one positive.
pub fn per_class_ap(scores: &[Vec<f64>], samples: &[Sample], classes: usize) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for c in 0..classes {
        let labels: Vec<bool> = samples.iter().map(|s| s.labels().contains(&c)).collect();
        if labels.contains(&true) {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            out.insert(c, average_precision(&col, &labels)?);
        }
    }
    Ok(out)
}

fn headline(scores: &[Vec<f64>], samples: &[Sample], metric: MetricKind, classes: usize) -> Result<(f64, BTreeMap<usize, f64>)> {
    match metric {
        MetricKind::Topk => {
            let accs = scores
                .iter()
                .zip(samples)
                .map(|(s, x)| topk_accuracy(s, &x.label_set()))
                .collect::<Result<Vec<_>>>()?;
            Ok((mean(&accs), BTreeMap::new()))
        }
        MetricKind::Ap => {
            let ap = per_class_ap(scores, samples, classes)?;
            let v: Vec<f64> = ap.values().copied().collect();
            Ok((mean(&v), ap))
        }
    }
}

fn strata(scores: &[Vec<f64>], samples: &[Sample], metric: MetricKind, classes: usize, bins: Option<AreaBins>) -> Result<Vec<Stratum>> {
    // (sample, class, area) of every instance, in sample order.
    let inst: Vec<(usize, usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.objects().iter().map(move |o| (i, o.label(), o.area())))
        .collect();
    let areas: Vec<usize> = inst.iter().map(|t| t.2).collect();
    let bins = match bins {
        Some(b) => b,
        None => AreaBins::thirds(&areas)?,
    };
    let assign = stratify_by_area(&areas, &bins);
    let mut out = Vec::with_capacity(bins.len());
    for b in 0..bins.len() {
        let members: Vec<(usize, usize)> = inst
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == b)
            .map(|(t, _)| (t.0, t.1))
            .collect();
        let value = if members.is_empty() {
            None
        } else {
            match metric {
                MetricKind::Topk => {
                    let hits: Vec<f64> = members
                        .iter()
                        .map(|&(i, c)| {
                            let k = samples[i].label_set().len();
                            if rank_classes(&scores[i])[..k].contains(&c) {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    Some(mean(&hits))
                }
                MetricKind::Ap => {
                    let mut aps = Vec::new();
                    #[allow(clippy::needless_range_loop)]
                    for c in 0..classes {
                        let pos: Vec<usize> = {
                            let mut p: Vec<usize> = members.iter().filter(|m| m.1 == c).map(|m| m.0).collect();
                            p.dedup();
                            p
                        };
                        if pos.is_empty() {
                            continue;
                        }
                        let mut col = Vec::new();
                        let mut lab = Vec::new();
                        for (i, s) in samples.iter().enumerate() {
                            let has = s.labels().contains(&c);
                            if pos.contains(&i) || !has {
                                col.push(scores[i][c]);
                                lab.push(has);
                            }
                        }
                        aps.push(average_precision(&col, &lab)?);
                    }
                    (!aps.is_empty()).then(|| mean(&aps))
                }
            }
        };
        let (lo, hi) = bins.bounds(b);
        out.push(Stratum {
            bin: b,
            lo,
            hi,
            instances: members.len(),
            value,
        });
    }
    Ok(out)
}

/// Scores every sample and computes the requested metrics.
pub fn evaluate(net: &NetworkSpec, params: &ParamSet, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    let scores = samples
        .iter()
        .map(|s| predict(net, params, s.image()))
        .collect::<Result<Vec<_>>>()?;
    evaluate_with(net, params, samples, &scores, opts)
}

/// [`evaluate`] with precomputed scores (one row per sample).
pub fn evaluate_with(
    net: &NetworkSpec,
    params: &ParamSet,
    samples: &[Sample],
    scores: &[Vec<f64>],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_metric(net, opts.metric)?;
    if samples.is_empty() || samples.len() != scores.len() {
        return Err(invalid!("{} score rows for {} samples", scores.len(), samples.len()));
    }
    let classes = net.num_classes();
    if scores.iter().any(|s| s.len() != classes) {
        return Err(invalid!("score rows must have {classes} entries"));
    }
    let (value, per_class_ap) = headline(scores, samples, opts.metric, classes)?;
    let strata = match &opts.stratify {
        Some(bins) => strata(scores, samples, opts.metric, classes, bins.clone())?,
        None => Vec::new(),
    };

    let mut context = Vec::new();
    if opts.context {
        for c in 0..classes {
            let sets = make_context_sets(samples, c, opts.context_seed)?;
            if sets.in_context.is_empty() {
                continue;
            }
            let neg: Vec<&Vec<f64>> = sets.negatives.iter().map(|&i| &scores[i]).collect();
            let score_set = |pos: Vec<Vec<f64>>, scenes: Vec<&Sample>| -> Result<f64> {
                match opts.metric {
                    MetricKind::Topk => {
                        let hits: Vec<f64> = pos
                            .iter()
                            .zip(scenes)
                            .map(|(s, x)| {
                                let k = x.label_set().len();
                                if rank_classes(s)[..k].contains(&c) {
                                    1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        Ok(mean(&hits))
                    }
                    MetricKind::Ap => {
                        let col: Vec<f64> = pos.iter().chain(neg.iter().copied()).map(|s| s[c]).collect();
                        let lab: Vec<bool> = (0..col.len()).map(|i| i < pos.len()).collect();
                        average_precision(&col, &lab)
                    }
                }
            };
            let in_scores: Vec<Vec<f64>> = sets.in_context.iter().map(|p| scores[p.sample].clone()).collect();
            let out_scores = sets
                .out_of_context
                .iter()
                .map(|p| predict(net, params, p.scene.image()))
                .collect::<Result<Vec<_>>>()?;
            context.push(ContextResult {
                class: c,
                positives: sets.in_context.len(),
                negatives: sets.negatives.len(),
                in_context: score_set(in_scores, sets.in_context.iter().map(|p| &p.scene).collect())?,
                out_of_context: score_set(out_scores, sets.out_of_context.iter().map(|p| &p.scene).collect())?,
            });
        }
    }

    let localization = if opts.localization {
        let n = opts.localization_limit.unwrap_or(samples.len()).min(samples.len());
        let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut skipped = 0;
        let mut instances = 0;
        for s in &samples[..n] {
            for o in s.objects() {
                instances += 1;
                let heat = guided_backprop(net, params, s.image(), o.label())?;
                match localization_accuracy(&heat, o)? {
                    Some(v) => per_class.entry(o.label()).or_default().push(v),
                    None => skipped += 1,
                }
            }
        }
        let per_class: BTreeMap<usize, f64> = per_class.into_iter().map(|(c, v)| (c, mean(&v))).collect();
        let vals: Vec<f64> = per_class.values().copied().collect();
        Some(Localization {
            mean: if vals.is_empty() { 0.0 } else { mean(&vals) },
            per_class,
            instances,
            skipped,
        })
    } else {
        None
    };

    Ok(EvalReport {
        epoch: None,
        metric: opts.metric,
        samples: samples.len(),
        instances: samples.iter().map(|s| s.k()).sum(),
        value,
        per_class_ap,
        strata,
        context,
        localization,
    })
}
