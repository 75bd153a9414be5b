//! Guided backpropagation heatmaps, localization mass, and activation shift.

use crate::autodiff::{NodeId, ParamSet, ReluRule, Tape};
use crate::data::Sample;
use crate::error::{invalid, shape_err, Result};
use crate::io;
use crate::masks::{project_mask, ObjectMask, Projection};
use crate::nn::{self, NetworkSpec};
use crate::tensor::Tensor;
use std::path::Path;

/// Input-space saliency of class `class`: backpropagate a one-hot seed from
/// the logits, letting each rectifier pass gradient only where both its
/// forward input and the incoming gradient are positive. The heatmap is the
/// per-pixel sum over channels of the absolute input gradient.
pub fn guided_backprop(net: &NetworkSpec, params: &ParamSet, input: &Tensor, class: usize) -> Result<Tensor> {
    input_gradient_map(net, params, input, class, ReluRule::Guided)
}

pub(crate) fn input_gradient_map(
    net: &NetworkSpec,
    params: &ParamSet,
    input: &Tensor,
    class: usize,
    rule: ReluRule,
) -> Result<Tensor> {
    let classes = net.num_classes();
    if class >= classes {
        return Err(invalid!("class {class} out of range for {classes} classes"));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.constant(p.value().clone())).collect();
    let x = tape.leaf(input.clone(), true);
    let acts = nn::forward(net, &ids, &mut tape, x, None, None)?;
    let mut seed = vec![0.0; classes];
    seed[class] = 1.0;
    let grads = tape.backward_from(acts.logits(), Tensor::new([classes], seed)?, rule)?;
    let g = grads.get_or_zeros(&tape, x);
    let (h, w, c) = g.hwc()?;
    let mut out = vec![0.0; h * w];
    for (i, v) in g.data().iter().enumerate() {
        out[i / c] += v.abs();
    }
    Tensor::new([h, w], out)
}

/// Share of heatmap mass inside the mask; `None` for an all-zero heatmap.
pub fn localization_accuracy(heatmap: &Tensor, mask: &ObjectMask) -> Result<Option<f64>> {
    if heatmap.shape() != mask.mask().shape() {
        return Err(shape_err!("heatmap {:?} vs mask {:?}", heatmap.shape(), mask.mask().shape()));
    }
    if heatmap.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(invalid!("heatmaps must be non-negative"));
    }
    let total = heatmap.sum();
    if total == 0.0 {
        return Ok(None);
    }
    let inside: f64 = heatmap
        .data()
        .iter()
        .zip(mask.mask().data())
        .filter(|(_, &m)| m != 0.0)
        .map(|(v, _)| v)
        .sum();
    Ok(Some((inside / total).clamp(0.0, 1.0)))
}

/// `|φ(X) − φ(m_k · X)|` at spatial layer `layer`, summed over channels and
/// zeroed outside object `k`'s projected mask.
pub fn activation_shift(net: &NetworkSpec, params: &ParamSet, scene: &Sample, k: usize, layer: usize) -> Result<Tensor> {
    let shapes = net.layer_shapes()?;
    let s = shapes.get(layer).ok_or_else(|| invalid!("layer {layer} out of range"))?;
    if s.len() != 3 {
        return Err(invalid!("layer {layer} is not spatial"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let obj = scene
        .objects()
        .get(k)
        .ok_or_else(|| invalid!("object {k} out of range"))?;
    let full = nn::activations(net, params, scene.image())?.remove(&layer).expect("layer exists");
    let alone = nn::activations(net, params, &scene.isolated(k)?)?
        .remove(&layer)
        .expect("layer exists");
    let region = project_mask(obj.mask(), (h, w, 1), Projection::Binary)?;
    let mut out = vec![0.0; h * w];
    for (i, (a, b)) in full.data().iter().zip(alone.data()).enumerate() {
        out[i / c] += (a - b).abs();
    }
    for (v, m) in out.iter_mut().zip(region.data()) {
        *v *= m;
    }
    Tensor::new([h, w], out)
}

/// Writes a heatmap as 8-bit grayscale scaled by its maximum.
pub fn write_heatmap_png(path: &Path, heatmap: &Tensor) -> Result<()> {
    let (h, w, c) = heatmap.hwc()?;
    if c != 1 {
        return Err(shape_err!("heatmaps are (H, W), got {:?}", heatmap.shape()));
    }
    let max = heatmap.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let px: Vec<u8> = heatmap
        .data()
        .iter()
        .map(|&v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 })
        .collect();
    io::write_png_gray8(path, w, h, &px)
}
