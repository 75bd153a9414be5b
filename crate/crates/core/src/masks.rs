//! Object masks, their projection onto feature maps, the loss masks used by
//! the compositional penalty, and the compositionality residual.
//!
//! Projecting a mask onto a layer of shape `(h, w, c)` block-averages the
//! input-resolution mask down to `(h, w)`, optionally thresholds it at 0.5,
//! and stacks `c` copies along the channel axis.

use crate::autodiff::ParamSet;
use crate::data::Sample;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{self, NetworkSpec};
use crate::tensor::{avg_downsample, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Projected values at or above this become 1 in binary mode.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Block averages in `[0, 1]`.
    Fractional,
    /// Block averages thresholded to `{0, 1}`.
    #[default]
    Binary,
}

/// Binary `(H, W)` mask of one object at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    mask: Tensor,
    object: usize,
    label: usize,
}

impl ObjectMask {
    pub fn new(mask: Tensor, object: usize, label: usize) -> Result<Self> {
        if mask.rank() != 2 {
            return Err(shape_err!("object masks are (H, W), got {:?}", mask.shape()));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid!("object mask {object} is not binary"));
        }
        if !mask.data().contains(&1.0) {
            return Err(invalid!("object mask {object} is empty"));
        }
        Ok(ObjectMask { mask, object, label })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn object(&self) -> usize {
        self.object
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// Number of pixels inside the mask.
    pub fn area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn project(&self, target: (usize, usize, usize), mode: Projection) -> Result<Tensor> {
        project_mask(&self.mask, target, mode)
    }
}

/// Projects an `(H, W)` mask onto a feature map of shape `(h, w, c)`.
pub fn project_mask(mask: &Tensor, target: (usize, usize, usize), mode: Projection) -> Result<Tensor> {
    let (h, w, c) = target;
    let small = avg_downsample(mask, (h, w))?;
    let plane: Vec<f64> = match mode {
        Projection::Fractional => small.into_data(),
        Projection::Binary => small
            .data()
            .iter()
            .map(|&v| if v >= BINARY_THRESHOLD { 1.0 } else { 0.0 })
            .collect(),
    };
    if c == 1 {
        return Tensor::new([h, w, 1], plane);
    }
    let mut out = Vec::with_capacity(h * w * c);
    for v in plane {
        out.extend(std::iter::repeat_n(v, c));
    }
    Tensor::new([h, w, c], out)
}

/// Which region of the unmasked branch the compositional penalty compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMaskVariant {
    /// Everything except the other objects.
    CompFull,
    /// Only the object itself.
    CompObjOnly,
}

/// Per-layer masks `m'_k`, one for each layer with a λ entry.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMask {
    pub variant: LossMaskVariant,
    pub layers: BTreeMap<usize, Tensor>,
}

/// Input-resolution region kept by the loss mask of object `k`.
pub fn loss_region(sample: &Sample, k: usize, variant: LossMaskVariant) -> Result<Tensor> {
    let objects = sample.objects();
    let target = objects
        .get(k)
        .ok_or_else(|| invalid!("object {k} out of range for {} objects", objects.len()))?;
    match variant {
        LossMaskVariant::CompObjOnly => Ok(target.mask().clone()),
        LossMaskVariant::CompFull => {
            let mut keep = Tensor::ones(target.mask().shape().to_vec())?;
            for (j, other) in objects.iter().enumerate() {
                if j == k {
                    continue;
                }
                for (kv, &ov) in keep.data_mut().iter_mut().zip(other.mask().data()) {
                    if ov != 0.0 {
                        *kv = 0.0;
                    }
                }
            }
            Ok(keep)
        }
    }
}

/// Builds `m'_k` for every layer in the λ support of `net`.
pub fn build_loss_mask(sample: &Sample, k: usize, net: &NetworkSpec, variant: LossMaskVariant) -> Result<LossMask> {
    let region = loss_region(sample, k, variant)?;
    let shapes = net.layer_shapes()?;
    let mut layers = BTreeMap::new();
    for &i in net.lambda.keys() {
        let s = &shapes[i];
        layers.insert(i, project_mask(&region, (s[0], s[1], s[2]), Projection::Binary)?);
    }
    Ok(LossMask { variant, layers })
}

/// `‖φ(m·X) − p(m)·φ(X)‖₂ / size` at layer `layer`, where both passes run the
/// plain network (no mask reapplication) and `p` is the binary projection.
pub fn compositionality_residual(
    net: &NetworkSpec,
    params: &ParamSet,
    image: &Tensor,
    mask: &ObjectMask,
    layer: usize,
) -> Result<f64> {
    let shapes = net.layer_shapes()?;
    let shape = shapes
        .get(layer)
        .ok_or_else(|| invalid!("layer {layer} out of range"))?;
    if shape.len() != 3 {
        return Err(invalid!("layer {layer} is not spatial"));
    }
    let [h, w, c] = net.input_shape;
    let m_in = project_mask(mask.mask(), (h, w, c), Projection::Binary)?;
    let masked = image.zip_map(&m_in, |x, m| x * m)?;
    let isolated = nn::activations(net, params, &masked)?.remove(&layer).expect("layer exists");
    let full = nn::activations(net, params, image)?.remove(&layer).expect("layer exists");
    let p = project_mask(mask.mask(), (shape[0], shape[1], shape[2]), Projection::Binary)?;
    let sq: f64 = isolated
        .data()
        .iter()
        .zip(full.data())
        .zip(p.data())
        .map(|((a, f), m)| {
            let d = a - f * m;
            d * d
        })
        .sum();
    Ok(sq.sqrt() / isolated.len() as f64)
}
