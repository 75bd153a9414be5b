//! The training objective: a γ-blend of masked- and unmasked-branch
//! classification losses plus a λ-weighted penalty that pulls masked-branch
//! activations towards the (loss-masked) unmasked-branch activations.
//!
//! In training only two weight-sharing branches are built per sample: the
//! unmasked one, and a masked one for a single object drawn uniformly at
//! random, which estimates the average over objects without bias.

use crate::autodiff::{gradient_check, GradCheckOptions, GradCheckReport, NodeId, ParamSet, Tape};
use crate::data::Sample;
use crate::error::{invalid, shape_err, Error, Result};
use crate::masks::{build_loss_mask, LossMask, LossMaskVariant, ObjectMask};
use crate::nn::loss::multi_hot;
use crate::nn::regularize::{l2_penalty_node, DEFAULT_DROPOUT, DEFAULT_L2};
use crate::nn::{forward, BranchMask, Head, NetworkSpec};
use crate::tensor::Tensor;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Masked branch with mask reapplication; penalty outside other objects.
    CompFull,
    /// As `CompFull` but the penalty only covers the object itself.
    CompObjOnly,
    /// Masked input only, no reapplication inside the network.
    CompNoMask,
    Baseline,
    /// Half of every batch is replaced by single objects on black.
    BaselineAug,
    /// Weight decay and dropout.
    BaselineReg,
    BaselineAugReg,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::CompFull,
        Variant::CompObjOnly,
        Variant::CompNoMask,
        Variant::Baseline,
        Variant::BaselineAug,
        Variant::BaselineReg,
        Variant::BaselineAugReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CompFull => "comp-full",
            Variant::CompObjOnly => "comp-obj-only",
            Variant::CompNoMask => "comp-no-mask",
            Variant::Baseline => "baseline",
            Variant::BaselineAug => "baseline-aug",
            Variant::BaselineReg => "baseline-reg",
            Variant::BaselineAugReg => "baseline-aug-reg",
        }
    }

    pub fn is_compositional(self) -> bool {
        matches!(self, Variant::CompFull | Variant::CompObjOnly | Variant::CompNoMask)
    }

    pub fn augments(self) -> bool {
        matches!(self, Variant::BaselineAug | Variant::BaselineAugReg)
    }

    pub fn regularizes(self) -> bool {
        matches!(self, Variant::BaselineReg | Variant::BaselineAugReg)
    }

    /// Whether the masked branch multiplies the mask back in at mask layers.
    pub fn reapplies_mask(self) -> bool {
        matches!(self, Variant::CompFull | Variant::CompObjOnly)
    }

    /// Region of the unmasked branch compared by the penalty.
    pub fn loss_mask(self) -> Option<LossMaskVariant> {
        match self {
            Variant::CompFull | Variant::CompNoMask => Some(LossMaskVariant::CompFull),
            Variant::CompObjOnly => Some(LossMaskVariant::CompObjOnly),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: Variant,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Weight decay coefficient (`*-reg` variants only).
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// Dropout rate before the classifier (`*-reg` variants only).
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_l2() -> f64 {
    DEFAULT_L2
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

impl LossConfig {
    pub fn new(variant: Variant) -> Self {
        LossConfig {
            variant,
            gamma: DEFAULT_GAMMA,
            l2: DEFAULT_L2,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.l2 >= 0.0) {
            return Err(invalid!("l2 must be non-negative, got {}", self.l2));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid!("gamma must be in [0, 1], got {gamma}"));
    }
    Ok(())
}

/// Loss components; for a batch every field is the batch mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Masked-branch losses (one per object for a full evaluation, one per
    /// sample in a training step).
    pub masked: Vec<f64>,
    pub unmasked: f64,
    pub discriminative: f64,
    pub compositional: f64,
    /// Penalty contribution of each layer, λ included.
    pub layers: BTreeMap<usize, f64>,
    pub regularizer: f64,
    pub total: f64,
}

/// `(1/K) Σ_k γ L_{m_k} + (1 − γ) L_u`; just `L_u` without masked losses.
pub fn discriminative_loss(masked: &[f64], unmasked: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if masked.is_empty() {
        return Ok(unmasked);
    }
    let k = masked.len() as f64;
    Ok(masked.iter().map(|l| gamma * l).sum::<f64>() / k + (1.0 - gamma) * unmasked)
}

/// `(1/K) Σ_k Σ_n λ_n ‖φ_{m_k,n} − φ_{u,n} · m'_{k,n}‖² / size_n`.
///
/// Returns the total and the per-layer terms. Layers with λ = 0 are skipped.
pub fn compositional_loss(
    masked: &[BTreeMap<usize, Tensor>],
    unmasked: &BTreeMap<usize, Tensor>,
    loss_masks: &[LossMask],
    lambda: &BTreeMap<usize, f64>,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    if masked.len() != loss_masks.len() {
        return Err(invalid!("{} masked branches but {} loss masks", masked.len(), loss_masks.len()));
    }
    if masked.is_empty() {
        return Ok((0.0, BTreeMap::new()));
    }
    let k = masked.len() as f64;
    let mut layers = BTreeMap::new();
    for (&n, &lam) in lambda {
        if lam < 0.0 {
            return Err(invalid!("λ at layer {n} is negative"));
        }
        if lam == 0.0 {
            continue;
        }
        let u = unmasked.get(&n).ok_or_else(|| invalid!("layer {n} not recorded"))?;
        let mut term = 0.0;
        for (acts, lm) in masked.iter().zip(loss_masks) {
            let a = acts.get(&n).ok_or_else(|| invalid!("layer {n} not recorded"))?;
            let m = lm.layers.get(&n).ok_or_else(|| invalid!("no loss mask for layer {n}"))?;
            if a.shape() != u.shape() || m.shape() != u.shape() {
                return Err(shape_err!(
                    "layer {n}: masked {:?}, unmasked {:?}, loss mask {:?}",
                    a.shape(),
                    u.shape(),
                    m.shape()
                ));
            }
            let sq: f64 = a
                .data()
                .iter()
                .zip(u.data())
                .zip(m.data())
                .map(|((a, u), m)| {
                    let d = a - u * m;
                    d * d
                })
                .sum();
            term += lam * sq / a.len() as f64;
        }
        layers.insert(n, term / k);
    }
    Ok((layers.values().sum(), layers))
}

/// Classification loss of `logits` against a label list: mean softmax
/// cross-entropy over the listed labels, or mean sigmoid cross-entropy
/// against their multi-hot encoding.
pub fn classification_loss(tape: &mut Tape, logits: NodeId, labels: &[usize], head: Head) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(invalid!("no labels"));
    }
    match head {
        Head::JointSoftmax => {
            let mut total: Option<NodeId> = None;
            for &l in labels {
                let ce = tape.softmax_cross_entropy(logits, l)?;
                total = Some(match total {
                    Some(t) => tape.add(t, ce)?,
                    None => ce,
                });
            }
            let total = total.expect("labels nonempty");
            Ok(if labels.len() == 1 {
                total
            } else {
                tape.scale(total, 1.0 / labels.len() as f64)
            })
        }
        Head::IndependentSigmoid => {
            let classes = tape.value(logits).len();
            let targets = multi_hot(labels, classes)?;
            tape.sigmoid_cross_entropy(logits, &targets)
        }
    }
}

/// Records the loss for one sample on `tape` and returns the loss node with
/// its components.
///
/// `ids` are the bound parameter leaves of `params`. `k` selects the
/// object of the masked branch and is required for compositional variants
/// and ignored otherwise. `dropout_rng` enables dropout (regularized
/// variants only).
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    tape: &mut Tape,
    net: &NetworkSpec,
    params: &ParamSet,
    ids: &[NodeId],
    sample: &Sample,
    k: Option<usize>,
    cfg: &LossConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, LossBreakdown)> {
    cfg.validate()?;
    if sample.k() == 0 {
        return Err(invalid!("sample has no objects"));
    }
    let x = tape.constant(sample.image().clone());
    let labels = sample.labels();
    let mut out = LossBreakdown::default();

    if !cfg.variant.is_compositional() {
        let rng = if cfg.variant.regularizes() { dropout_rng } else { None };
        let acts = forward(net, ids, tape, x, None, rng)?;
        let lu = classification_loss(tape, acts.logits(), &labels, net.head)?;
        out.unmasked = tape.value(lu).item()?;
        out.discriminative = out.unmasked;
        let mut total = lu;
        if cfg.variant.regularizes() {
            if let Some(r) = l2_penalty_node(tape, params, ids, cfg.l2)? {
                out.regularizer = tape.value(r).item()?;
                total = tape.add(total, r)?;
            }
        }
        out.total = tape.value(total).item()?;
        return Ok((total, out));
    }

    let k = k.ok_or_else(|| invalid!("compositional variants need an object index"))?;
    let object: &ObjectMask = sample
        .objects()
        .get(k)
        .ok_or_else(|| invalid!("object {k} out of range for {} objects", sample.k()))?;
    let branch = BranchMask {
        mask: object.mask(),
        reapply: cfg.variant.reapplies_mask(),
    };
    let masked = forward(net, ids, tape, x, Some(branch), None)?;
    let unmasked = forward(net, ids, tape, x, None, None)?;

    let lm = classification_loss(tape, masked.logits(), &[object.label()], net.head)?;
    let lu = classification_loss(tape, unmasked.logits(), &labels, net.head)?;
    out.masked = vec![tape.value(lm).item()?];
    out.unmasked = tape.value(lu).item()?;
    let a = tape.scale(lm, cfg.gamma);
    let b = tape.scale(lu, 1.0 - cfg.gamma);
    let ld = tape.add(a, b)?;
    out.discriminative = tape.value(ld).item()?;

    let loss_mask = build_loss_mask(sample, k, net, cfg.variant.loss_mask().expect("compositional"))?;
    let mut lc: Option<NodeId> = None;
    for (&n, &lam) in &net.lambda {
        if lam == 0.0 {
            continue;
        }
        let m = tape.constant(loss_mask.layers[&n].clone());
        let um = tape.mul(unmasked.layer(n), m)?;
        let d = tape.sub(masked.layer(n), um)?;
        let sq = tape.sum_squares(d);
        let size = tape.value(d).len() as f64;
        let term = tape.scale(sq, lam / size);
        out.layers.insert(n, tape.value(term).item()?);
        lc = Some(match lc {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = match lc {
        Some(lc) => {
            out.compositional = tape.value(lc).item()?;
            tape.add(ld, lc)?
        }
        None => ld,
    };
    out.total = tape.value(total).item()?;
    Ok((total, out))
}

/// Outcome of one optimization step; gradients are left in the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    /// Object drawn for each sample's masked branch.
    pub drawn: Vec<Option<usize>>,
}

/// Computes batch-mean loss and gradients for one step.
///
/// Compositional variants build two weight-sharing branches per sample
/// (masked for one uniformly drawn object, unmasked); baselines build one.
/// Parameter gradients are overwritten with the batch mean.
pub fn two_branch_step(
    batch: &[Sample],
    net: &NetworkSpec,
    params: &mut ParamSet,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    cfg.validate()?;
    if let Some(i) = batch.iter().position(|s| s.k() == 0) {
        return Err(invalid!("sample {i} of the batch has no objects"));
    }
    params.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut drawn = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let k = cfg.variant.is_compositional().then(|| rng.gen_range(0..sample.k()));
        let mut dropout_rng = cfg
            .variant
            .regularizes()
            .then(|| ChaCha8Rng::seed_from_u64(rng.gen()));
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let (loss, parts) = sample_loss(&mut tape, net, params, &ids, sample, k, cfg, dropout_rng.as_mut())?;
        if !parts.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {} on batch sample {i}", parts.total)));
        }
        let grads = tape.backward(loss)?;
        params.accumulate_grads(&tape, &grads, &ids, scale)?;
        mean.masked.extend(parts.masked);
        mean.unmasked += scale * parts.unmasked;
        mean.discriminative += scale * parts.discriminative;
        mean.compositional += scale * parts.compositional;
        for (n, v) in parts.layers {
            *mean.layers.entry(n).or_insert(0.0) += scale * v;
        }
        mean.regularizer += scale * parts.regularizer;
        mean.total += scale * parts.total;
        drawn.push(k);
    }
    Ok(StepOutput { loss: mean, drawn })
}

/// Replaces `floor(n / 2)` randomly chosen samples by one of their objects
/// (chosen at random) on a black background, labelled with that object's
/// class alone.
pub fn baseline_aug_batch(batch: &[Sample], rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let mut out = batch.to_vec();
    let chosen = sample_indices(rng, batch.len(), batch.len() / 2).into_vec();
    let mut chosen_sorted = chosen;
    chosen_sorted.sort_unstable();
    for i in chosen_sorted {
        let s = &batch[i];
        let k = rng.gen_range(0..s.k());
        let o = &s.objects()[k];
        let single = ObjectMask::new(o.mask().clone(), 0, o.label())?;
        out[i] = Sample::new(s.isolated(k)?, vec![single], s.split(), s.seed())?;
    }
    Ok(out)
}

/// Evaluates the objective over all `K` masked branches of one sample
/// (no sampling), as the average over objects.
pub fn full_objective(net: &NetworkSpec, params: &ParamSet, sample: &Sample, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if !cfg.variant.is_compositional() {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.constant(p.value().clone())).collect();
        return sample_loss(&mut tape, net, params, &ids, sample, None, cfg, None).map(|r| r.1);
    }
    let labels = sample.labels();
    let run = |mask: Option<BranchMask<'_>>, labels: &[usize]| -> Result<(BTreeMap<usize, Tensor>, f64)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.constant(p.value().clone())).collect();
        let x = tape.constant(sample.image().clone());
        let acts = forward(net, &ids, &mut tape, x, mask, None)?;
        let l = classification_loss(&mut tape, acts.logits(), labels, net.head)?;
        Ok((acts.tensors(&tape), tape.value(l).item()?))
    };
    let (u_acts, lu) = run(None, &labels)?;
    let mut m_acts = Vec::with_capacity(sample.k());
    let mut lm = Vec::with_capacity(sample.k());
    let mut masks = Vec::with_capacity(sample.k());
    for (k, o) in sample.objects().iter().enumerate() {
        let (acts, l) = run(
            Some(BranchMask {
                mask: o.mask(),
                reapply: cfg.variant.reapplies_mask(),
            }),
            &[o.label()],
        )?;
        m_acts.push(acts);
        lm.push(l);
        masks.push(build_loss_mask(sample, k, net, cfg.variant.loss_mask().expect("compositional"))?);
    }
    let ld = discriminative_loss(&lm, lu, cfg.gamma)?;
    let (lc, layers) = compositional_loss(&m_acts, &u_acts, &masks, &net.lambda)?;
    Ok(LossBreakdown {
        masked: lm,
        unmasked: lu,
        discriminative: ld,
        compositional: lc,
        layers,
        regularizer: 0.0,
        total: ld + lc,
    })
}

/// Checks tape gradients of the per-sample objective of `variant` against
/// finite differences. For regularized variants the dropout mask is held
/// fixed across evaluations.
pub fn gradient_check_variant(
    net: &NetworkSpec,
    params: &ParamSet,
    sample: &Sample,
    variant: Variant,
    k: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let cfg = LossConfig::new(variant);
    gradient_check(
        |tape, ids| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            sample_loss(tape, net, params, ids, sample, Some(k), &cfg, Some(&mut rng)).map(|r| r.0)
        },
        params,
        opts,
    )
}

/// Initial parameters with biases moved off zero.
///
/// Freshly initialized biases are exactly zero, so wherever a masked branch
/// sees an all-zero input window the rectifier sits on its kink and finite
/// differences are meaningless. Gradient checks use these parameters.
pub fn gradcheck_params(net: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    let mut params = net.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in params.iter_mut() {
        if !p.is_weight() {
            for v in p.value_mut().data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    Ok(params)
}

/// A deterministic scene with two non-overlapping rectangular objects
/// (classes 2 and 7) on a textured background, sized for `net`.
pub fn two_object_scene(net: &NetworkSpec, seed: u64) -> Result<Sample> {
    let [h, w, c] = net.input_shape;
    if c != 1 {
        return Err(invalid!("scenes are single-channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn([h, w, 1], |_| rng.gen_range(0.0..1.0))?;
    let rect = |r0: usize, r1: usize, c0: usize, c1: usize| {
        Tensor::from_fn([h, w], |i| {
            let (y, x) = (i / w, i % w);
            if (r0..r1).contains(&y) && (c0..c1).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    };
    let a = rect(h / 8, h / 2, w / 8, w / 2)?;
    let b = rect(h / 2, h - h / 8, w / 2, w - w / 8)?;
    Sample::new(
        image,
        vec![ObjectMask::new(a, 0, 2)?, ObjectMask::new(b, 1, 7)?],
        crate::data::Split::Train,
        seed,
    )
}
