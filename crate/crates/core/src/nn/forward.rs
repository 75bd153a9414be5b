use super::regularize::dropout_keep_mask;
use super::spec::{Layer, NetworkSpec};
use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::error::{invalid, shape_err, Result};
use crate::masks::{self, Projection};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Object mask handed to a masked branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchMask<'a> {
    /// Binary `(H, W)` mask at input resolution.
    pub mask: &'a Tensor,
    /// Multiply the projected mask into the mask layers' outputs. When
    /// false only the input is masked.
    pub reapply: bool,
}

/// Output node of every layer for one forward pass of one branch.
#[derive(Clone, Debug)]
pub struct Activations {
    input: NodeId,
    outputs: Vec<NodeId>,
}

impl Activations {
    /// The (possibly masked) input fed to the first layer.
    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn layer(&self, index: usize) -> NodeId {
        self.outputs[index]
    }

    pub fn logits(&self) -> NodeId {
        *self.outputs.last().expect("network has layers")
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Copies the recorded activation tensors out of `tape`.
    pub fn tensors(&self, tape: &Tape) -> BTreeMap<usize, Tensor> {
        self.outputs
            .iter()
            .enumerate()
            .map(|(i, &id)| (i, tape.value(id).clone()))
            .collect()
    }
}

fn check_binary_mask(mask: &Tensor, h: usize, w: usize) -> Result<()> {
    let (mh, mw, mc) = mask.hwc()?;
    if (mh, mw, mc) != (h, w, 1) {
        return Err(shape_err!(
            "mask shape {:?} does not match input {h}x{w}",
            mask.shape()
        ));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid!("branch masks must be binary"));
    }
    Ok(())
}

/// Runs `net` on `input`, recording every layer on `tape`.
///
/// `params` are the bound parameter leaves in layout order. With a mask the
/// input is multiplied by it first and, if `reapply` is set, every mask
/// layer's output is multiplied by the binarized projection of the mask.
/// Dropout layers are active only when `dropout_rng` is given.
pub fn forward(
    net: &NetworkSpec,
    params: &[NodeId],
    tape: &mut Tape,
    input: NodeId,
    mask: Option<BranchMask<'_>>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Activations> {
    let shapes = net.layer_shapes()?;
    let [h, w, c] = net.input_shape;
    if tape.value(input).shape() != [h, w, c] {
        return Err(shape_err!(
            "input shape {:?} does not match network input {:?}",
            tape.value(input).shape(),
            net.input_shape
        ));
    }
    let mut x = input;
    if let Some(bm) = mask {
        check_binary_mask(bm.mask, h, w)?;
        let m = tape.constant(masks::project_mask(bm.mask, (h, w, c), Projection::Binary)?);
        x = tape.mul(x, m)?;
    }
    let masked_input = x;

    let mut cursor = 0;
    let mut next_param = || -> Result<NodeId> {
        let id = params
            .get(cursor)
            .copied()
            .ok_or_else(|| invalid!("not enough bound parameters"))?;
        cursor += 1;
        Ok(id)
    };
    let mut outputs = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        x = match layer {
            Layer::Conv { .. } => {
                let k = next_param()?;
                let b = next_param()?;
                tape.conv2d(x, k, b)?
            }
            Layer::Pool => tape.maxpool2d(x)?,
            Layer::Relu => tape.relu(x),
            Layer::Fc { .. } => {
                let wts = next_param()?;
                let b = next_param()?;
                tape.affine(x, wts, b)?
            }
            Layer::Dropout { rate } => match dropout_rng.as_deref_mut() {
                Some(rng) if *rate > 0.0 => {
                    let keep = dropout_keep_mask(tape.value(x).shape(), *rate, rng)?;
                    let k = tape.constant(keep);
                    tape.mul(x, k)?
                }
                _ => x,
            },
        };
        if let Some(bm) = mask.filter(|bm| bm.reapply) {
            if net.mask_layers.contains(&i) {
                let s = &shapes[i];
                let p = masks::project_mask(bm.mask, (s[0], s[1], s[2]), Projection::Binary)?;
                let m = tape.constant(p);
                x = tape.mul(x, m)?;
            }
        }
        outputs.push(x);
    }
    if cursor != params.len() {
        return Err(invalid!(
            "{} parameters bound but the network uses {cursor}",
            params.len()
        ));
    }
    Ok(Activations {
        input: masked_input,
        outputs,
    })
}

/// Logits of an unmasked evaluation-mode pass.
pub fn predict(net: &NetworkSpec, params: &ParamSet, input: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.constant(p.value().clone())).collect();
    let x = tape.constant(input.clone());
    let acts = forward(net, &ids, &mut tape, x, None, None)?;
    Ok(tape.value(acts.logits()).data().to_vec())
}

/// Activation tensors of an unmasked evaluation-mode pass.
pub fn activations(net: &NetworkSpec, params: &ParamSet, input: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.constant(p.value().clone())).collect();
    let x = tape.constant(input.clone());
    let acts = forward(net, &ids, &mut tape, x, None, None)?;
    Ok(acts.tensors(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Head;

    fn setup() -> (NetworkSpec, ParamSet, Tensor) {
        let net = NetworkSpec::toy(Head::JointSoftmax);
        let params = net.init_params(11).unwrap();
        let x = Tensor::from_fn([16, 16, 1], |i| ((i * 37) % 17) as f64 / 17.0).unwrap();
        (net, params, x)
    }

    fn run(net: &NetworkSpec, params: &ParamSet, x: &Tensor, mask: Option<BranchMask<'_>>) -> BTreeMap<usize, Tensor> {
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let xi = tape.constant(x.clone());
        forward(net, &ids, &mut tape, xi, mask, None).unwrap().tensors(&tape)
    }

    #[test]
    fn ones_mask_is_bit_identical_to_unmasked() {
        let (net, params, x) = setup();
        let ones = Tensor::ones([16, 16]).unwrap();
        let plain = run(&net, &params, &x, None);
        let masked = run(&net, &params, &x, Some(BranchMask { mask: &ones, reapply: true }));
        assert_eq!(plain, masked);
    }

    #[test]
    fn zero_mask_zeroes_mask_layers() {
        let (net, params, x) = setup();
        let zeros = Tensor::zeros([16, 16]).unwrap();
        let acts = run(&net, &params, &x, Some(BranchMask { mask: &zeros, reapply: true }));
        for &i in &net.mask_layers {
            assert!(acts[&i].data().iter().all(|&v| v == 0.0), "layer {i}");
        }
    }

    #[test]
    fn logits_have_class_count() {
        let (net, params, x) = setup();
        assert_eq!(predict(&net, &params, &x).unwrap().len(), 10);
        let mnist = NetworkSpec::mnist(Head::JointSoftmax);
        let shapes = mnist.layer_shapes().unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![10]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (net, params, _) = setup();
        let wrong = Tensor::zeros([8, 8, 1]).unwrap();
        assert!(predict(&net, &params, &wrong).is_err());

        let x = Tensor::zeros([16, 16, 1]).unwrap();
        let soft = Tensor::full([16, 16], 0.5).unwrap();
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let xi = tape.constant(x);
        let r = forward(&net, &ids, &mut tape, xi, Some(BranchMask { mask: &soft, reapply: true }), None);
        assert!(r.is_err());
    }
}
