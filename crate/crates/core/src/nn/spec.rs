use crate::autodiff::{ParamSet, Parameter};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_KERNEL: usize = 3;

fn default_kernel() -> usize {
    DEFAULT_KERNEL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
    Pool,
    Relu,
    Fc {
        out: usize,
    },
    Dropout {
        rate: f64,
    },
}

/// Classification head used for the discriminative losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// One softmax over all classes (`softmax_cross_entropy`).
    #[default]
    JointSoftmax,
    /// One sigmoid per class (`sigmoid_cross_entropy`).
    IndependentSigmoid,
}

/// Layer stack plus where object masks are reapplied and where the
/// compositional penalty applies. Indices refer to layer outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub mask_layers: BTreeSet<usize>,
    pub lambda: BTreeMap<usize, f64>,
    pub head: Head,
}

/// One convolution block: `convs` × (conv, relu) at `channels`, then a pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub convs: usize,
    pub channels: usize,
}

impl Block {
    pub const fn new(convs: usize, channels: usize) -> Self {
        Block { convs, channels }
    }
}

impl NetworkSpec {
    /// `stem_pools` pooling layers, the conv blocks, and one fc layer.
    ///
    /// Masks are reapplied (and λ = `lambda` applied) at the rectified
    /// output of every conv in the last block and at the last pool.
    pub fn from_blocks(
        input_shape: [usize; 3],
        stem_pools: usize,
        blocks: &[Block],
        classes: usize,
        head: Head,
        lambda: f64,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid!("a network needs at least one conv block"));
        }
        let mut layers = vec![Layer::Pool; stem_pools];
        let mut top = BTreeSet::new();
        for (bi, b) in blocks.iter().enumerate() {
            if b.convs == 0 || b.channels == 0 {
                return Err(invalid!("block {bi} is empty"));
            }
            for _ in 0..b.convs {
                layers.push(Layer::Conv {
                    out_channels: b.channels,
                    kernel: DEFAULT_KERNEL,
                });
                layers.push(Layer::Relu);
                if bi + 1 == blocks.len() {
                    top.insert(layers.len() - 1);
                }
            }
            layers.push(Layer::Pool);
            if bi + 1 == blocks.len() {
                top.insert(layers.len() - 1);
            }
        }
        layers.push(Layer::Fc { out: classes });
        let net = NetworkSpec {
            input_shape,
            layers,
            lambda: top.iter().map(|&i| (i, lambda)).collect(),
            mask_layers: top,
            head,
        };
        net.layer_shapes()?;
        Ok(net)
    }

    /// 120×120 digits: three convs at 32 channels, two at 64, two at 128,
    /// each block pooled, then fc 15·15·128 → 10.
    pub fn mnist(head: Head) -> Self {
        Self::from_blocks(
            [120, 120, 1],
            0,
            &[Block::new(3, 32), Block::new(2, 64), Block::new(2, 128)],
            10,
            head,
            1.0,
        )
        .expect("valid built-in network")
    }

    /// 16×16 input, two single-conv blocks of 4 channels, fc → 10.
    pub fn toy(head: Head) -> Self {
        Self::from_blocks([16, 16, 1], 0, &[Block::new(1, 4), Block::new(1, 4)], 10, head, 1.0)
            .expect("valid built-in network")
    }

    /// Inserts dropout right before the first fc layer.
    pub fn with_dropout_before_fc(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid!("dropout rate must be in [0, 1), got {rate}"));
        }
        let fc = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Fc { .. }))
            .ok_or_else(|| invalid!("network has no fc layer"))?;
        if self.mask_layers.iter().chain(self.lambda.keys()).any(|&i| i >= fc) {
            return Err(invalid!("mask or λ layers after the fc layer"));
        }
        self.layers.insert(fc, Layer::Dropout { rate });
        Ok(self)
    }

    /// Output shape of every layer, validating the whole spec on the way.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(invalid!("input shape must be positive, got {:?}", self.input_shape));
        }
        let mut shape = vec![h, w, c];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape.as_slice()) {
                (Layer::Conv { out_channels, kernel }, &[h, w, _]) => {
                    if *out_channels == 0 || kernel % 2 == 0 {
                        return Err(invalid!("layer {i}: bad conv geometry"));
                    }
                    vec![h, w, *out_channels]
                }
                (Layer::Pool, &[h, w, c]) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(invalid!("layer {i}: cannot pool {h}x{w}"));
                    }
                    vec![h / 2, w / 2, c]
                }
                (Layer::Relu, s) => s.to_vec(),
                (Layer::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(invalid!("layer {i}: dropout rate {rate} outside [0, 1)"));
                    }
                    s.to_vec()
                }
                (Layer::Fc { out }, _) if *out > 0 => vec![*out],
                (l, s) => return Err(invalid!("layer {i}: {l:?} cannot follow shape {s:?}")),
            };
            out.push(shape.clone());
        }
        match out.last() {
            Some(s) if s.len() == 1 && s[0] >= 2 => {}
            _ => return Err(invalid!("network must end in a vector of at least 2 logits")),
        }
        for &i in self.mask_layers.iter().chain(self.lambda.keys()) {
            match out.get(i) {
                Some(s) if s.len() == 3 => {}
                Some(_) => return Err(invalid!("layer {i} is not spatial and cannot be masked")),
                None => return Err(invalid!("mask/λ index {i} beyond {} layers", out.len())),
            }
        }
        if let Some((i, l)) = self.lambda.iter().find(|(_, l)| !(**l >= 0.0)) {
            return Err(invalid!("λ at layer {i} must be non-negative, got {l}"));
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Fc { out }) => *out,
            _ => 0,
        }
    }

    /// λ of layer `index` (zero outside the configured support).
    pub fn lambda_at(&self, index: usize) -> f64 {
        self.lambda.get(&index).copied().unwrap_or(0.0)
    }

    /// Name, shape, fan-in and fan-out of every parameter in binding order.
    pub fn param_layout(&self) -> Result<Vec<ParamSlot>> {
        let shapes = self.layer_shapes()?;
        let mut prev = self.input_shape.to_vec();
        let mut slots = Vec::new();
        let (mut n_conv, mut n_fc) = (0, 0);
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match layer {
                Layer::Conv { out_channels, kernel } => {
                    n_conv += 1;
                    let c_in = prev[2];
                    slots.push(ParamSlot {
                        name: format!("conv{n_conv}.kernels"),
                        shape: vec![*kernel, *kernel, c_in, *out_channels],
                        fan_in: kernel * kernel * c_in,
                        fan_out: kernel * kernel * out_channels,
                    });
                    slots.push(ParamSlot::bias(format!("conv{n_conv}.bias"), *out_channels));
                }
                Layer::Fc { out } => {
                    n_fc += 1;
                    let n: usize = prev.iter().product();
                    slots.push(ParamSlot {
                        name: format!("fc{n_fc}.weights"),
                        shape: vec![n, *out],
                        fan_in: n,
                        fan_out: *out,
                    });
                    slots.push(ParamSlot::bias(format!("fc{n_fc}.bias"), *out));
                }
                _ => {}
            }
            prev = shape.clone();
        }
        Ok(slots)
    }

    /// Fresh parameters: weights uniform in ±√(6 / (fan_in + fan_out)),
    /// biases zero.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for slot in self.param_layout()? {
            let value = if slot.is_bias() {
                Tensor::zeros(slot.shape.clone())?
            } else {
                let limit = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
                Tensor::from_fn(slot.shape.clone(), |_| rng.gen_range(-limit..limit))?
            };
            set.push(Parameter::new(slot.name, value))?;
        }
        Ok(set)
    }

    /// Checks that `params` has exactly this network's layout.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let layout = self.param_layout()?;
        if layout.len() != params.len() {
            return Err(invalid!(
                "network expects {} parameters, got {}",
                layout.len(),
                params.len()
            ));
        }
        for (slot, p) in layout.iter().zip(params) {
            if slot.name != p.name() || slot.shape != p.value().shape() {
                return Err(invalid!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name(),
                    p.value().shape(),
                    slot.name,
                    slot.shape
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl ParamSlot {
    fn bias(name: String, n: usize) -> Self {
        ParamSlot {
            name,
            shape: vec![n],
            fan_in: 0,
            fan_out: 0,
        }
    }

    fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}
