//! Literal loop implementations used as oracles. Nothing here calls the
//! library's kernels; only the data types are shared.
#![allow(dead_code)]

use compnet::autodiff::ParamSet;
use compnet::data::{Sample, Split};
use compnet::masks::ObjectMask;
use compnet::nn::{Layer, NetworkSpec};
use compnet::objective::Variant;
use std::collections::BTreeSet;
use compnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn at3(t: &Tensor, y: usize, x: usize, c: usize) -> f64 {
    let s = t.shape();
    t.data()[(y * s[1] + x) * s[2] + c]
}

/// Same-padded stride-1 cross-correlation, six nested loops.
pub fn conv(input: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let (h, w, ci) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0; h * w * co];
    for y in 0..h {
        for x in 0..w {
            for o in 0..co {
                let mut s = b.data()[o];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let (iy, ix) = (y as isize + dy as isize - ph as isize, x as isize + dx as isize - pw as isize);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for c in 0..ci {
                            s += at3(input, iy as usize, ix as usize, c) * k.data()[((dy * kw + dx) * ci + c) * co + o];
                        }
                    }
                }
                out[(y * w + x) * co + o] = s;
            }
        }
    }
    Tensor::new([h, w, co], out).unwrap()
}

/// Input gradient of [`conv`] by scattering every output gradient.
pub fn conv_input_grad(input_shape: &[usize], k: &Tensor, g: &Tensor) -> Tensor {
    let (h, w, ci) = (input_shape[0], input_shape[1], input_shape[2]);
    let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut dx = vec![0.0; h * w * ci];
    for y in 0..h {
        for x in 0..w {
            for o in 0..co {
                let gv = at3(g, y, x, o);
                for dy in 0..kh {
                    for ddx in 0..kw {
                        let (iy, ix) = (y as isize + dy as isize - ph as isize, x as isize + ddx as isize - pw as isize);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for c in 0..ci {
                            dx[((iy as usize) * w + ix as usize) * ci + c] += gv * k.data()[((dy * kw + ddx) * ci + c) * co + o];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx).unwrap()
}

/// 2×2 stride-2 max pool by window scan; returns values and, per output,
/// the flat input index of the first maximum in row-major window order.
pub fn pool(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if input.data()[i] > best {
                        best = input.data()[i];
                        bi = i;
                    }
                }
                out[(y * ow + x) * c + ch] = best;
                arg[(y * ow + x) * c + ch] = bi;
            }
        }
    }
    (Tensor::new([oh, ow, c], out).unwrap(), arg)
}

/// `out[j] = b[j] + Σ_i x[i] W[i][j]`.
pub fn affine(x: &Tensor, wts: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (wts.shape()[0], wts.shape()[1]);
    let out: Vec<f64> = (0..m)
        .map(|j| b.data()[j] + (0..n).map(|i| x.data()[i] * wts.data()[i * m + j]).sum::<f64>())
        .collect();
    Tensor::new([m], out).unwrap()
}

/// Block-average an (H, W) mask to (h, w), threshold at 1/2, copy to c channels.
pub fn project(mask: &Tensor, h: usize, w: usize, c: usize) -> Tensor {
    let (mh, mw) = (mask.shape()[0], mask.shape()[1]);
    let (by, bx) = (mh / h, mw / w);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for yy in 0..by {
                for xx in 0..bx {
                    s += mask.data()[(y * by + yy) * mw + x * bx + xx];
                }
            }
            let v = if s / (by * bx) as f64 >= 0.5 { 1.0 } else { 0.0 };
            for ch in 0..c {
                out[(y * w + x) * c + ch] = v;
            }
        }
    }
    Tensor::new([h, w, c], out).unwrap()
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()).unwrap()
}

/// Layer inputs and outputs of one forward pass.
pub struct Pass {
    pub inputs: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
    pub pool_args: Vec<Option<Vec<usize>>>,
    /// Projected masks multiplied in after each layer, if any.
    pub masks: Vec<Option<Tensor>>,
}

/// Layer-by-layer forward pass. With `mask`, the input is masked and, when
/// `reapply`, every mask layer's output is multiplied by the projection.
pub fn forward(net: &NetworkSpec, params: &ParamSet, x: &Tensor, mask: Option<(&Tensor, bool)>) -> Pass {
    let p: Vec<&Tensor> = params.iter().map(|p| p.value()).collect();
    let mut cur = match mask {
        Some((m, _)) => hadamard(x, &project(m, x.shape()[0], x.shape()[1], x.shape()[2])),
        None => x.clone(),
    };
    let mut pass = Pass {
        inputs: vec![],
        outputs: vec![],
        pool_args: vec![],
        masks: vec![],
    };
    let mut pi = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        pass.inputs.push(cur.clone());
        let mut arg = None;
        let mut out = match layer {
            Layer::Conv { .. } => {
                pi += 2;
                conv(&cur, p[pi - 2], p[pi - 1])
            }
            Layer::Relu => cur.map(|v| v.max(0.0)),
            Layer::Pool => {
                let (o, a) = pool(&cur);
                arg = Some(a);
                o
            }
            Layer::Fc { .. } => {
                pi += 2;
                affine(&cur, p[pi - 2], p[pi - 1])
            }
            Layer::Dropout { .. } => cur.clone(),
        };
        let mut applied = None;
        if let Some((m, true)) = mask {
            if net.mask_layers.contains(&i) {
                let s = out.shape().to_vec();
                let pm = project(m, s[0], s[1], s[2]);
                out = hadamard(&out, &pm);
                applied = Some(pm);
            }
        }
        pass.pool_args.push(arg);
        pass.masks.push(applied);
        pass.outputs.push(out.clone());
        cur = out;
    }
    pass
}

/// Input gradient of logit `class` where each rectifier passes a gradient
/// component only if its forward input and the component are both positive.
pub fn guided_input_grad(net: &NetworkSpec, params: &ParamSet, pass: &Pass, class: usize) -> Tensor {
    let p: Vec<&Tensor> = params.iter().map(|p| p.value()).collect();
    let n_out = pass.outputs.last().unwrap().len();
    let mut g = Tensor::from_fn([n_out], |i| if i == class { 1.0 } else { 0.0 }).unwrap();
    let mut pi = p.len();
    for i in (0..net.layers.len()).rev() {
        if let Some(m) = &pass.masks[i] {
            g = hadamard(&g, m);
        }
        let input = &pass.inputs[i];
        g = match &net.layers[i] {
            Layer::Fc { .. } => {
                pi -= 2;
                let wts = p[pi];
                let (n, m) = (wts.shape()[0], wts.shape()[1]);
                let d: Vec<f64> = (0..n).map(|r| (0..m).map(|j| wts.data()[r * m + j] * g.data()[j]).sum()).collect();
                Tensor::new(input.shape().to_vec(), d).unwrap()
            }
            Layer::Conv { .. } => {
                pi -= 2;
                conv_input_grad(input.shape(), p[pi], &g)
            }
            Layer::Relu => {
                let d: Vec<f64> = input
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > 0.0 && gv > 0.0 { gv } else { 0.0 })
                    .collect();
                Tensor::new(input.shape().to_vec(), d).unwrap()
            }
            Layer::Pool => {
                let mut d = vec![0.0; input.len()];
                for (o, &a) in pass.pool_args[i].as_ref().unwrap().iter().enumerate() {
                    d[a] += g.data()[o];
                }
                Tensor::new(input.shape().to_vec(), d).unwrap()
            }
            Layer::Dropout { .. } => g,
        };
    }
    g
}

pub fn log_softmax_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn topk_oracle(scores: &[f64], truth: &BTreeSet<usize>) -> f64 {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    // Full sort: descending score, then ascending index.
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let k = truth.len();
    pairs[..k].iter().filter(|p| truth.contains(&p.1)).count() as f64 / k as f64
}

pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    // Item j precedes i if it scores higher, or ties and comes first.
    let precedes = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let n = scores.len();
    // (rank, precision at rank) of every positive, by pairwise counting.
    let mut at: Vec<(usize, f64)> = (0..n)
        .filter(|&i| labels[i])
        .map(|i| {
            let rank = 1 + (0..n).filter(|&j| precedes(j, i)).count();
            let hits = 1 + (0..n).filter(|&j| labels[j] && precedes(j, i)).count();
            (rank, hits as f64 / rank as f64)
        })
        .collect();
    at.sort_by_key(|a| a.0);
    at.iter().map(|a| a.1).sum::<f64>() / at.len() as f64
}

pub fn rect_mask(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor {
    Tensor::from_fn([h, w], |i| {
        if (r0..r1).contains(&(i / w)) && (c0..c1).contains(&(i % w)) {
            1.0
        } else {
            0.0
        }
    })
    .unwrap()
}

/// A random 16×16 scene with two disjoint rectangles as objects.
pub fn random_toy_scene(r: &mut ChaCha8Rng) -> Sample {
    let img = Tensor::from_fn([16, 16, 1], |_| r.gen_range(0.0..1.0)).unwrap();
    let a_r = r.gen_range(2..8);
    let a_c = r.gen_range(2..14);
    let b_r = r.gen_range(10..15);
    let b_c = r.gen_range(1..12);
    let a = rect_mask(16, 16, a_r - 2, a_r + 2, a_c - 2, (a_c + 2).min(16));
    let b = rect_mask(16, 16, b_r - 2, b_r + 1, b_c - 1, b_c + 4);
    let (la, lb) = (r.gen_range(0..10), r.gen_range(0..10));
    Sample::new(img, vec![ObjectMask::new(a, 0, la).unwrap(), ObjectMask::new(b, 1, lb).unwrap()], Split::Train, 0).unwrap()
}

/// Literal objective: every one of the K masked branches and the unmasked
/// branch run separately; returns (per-k totals for single-k sampling,
/// full-K average total).
pub fn k_plus_one_reference(net: &NetworkSpec, params: &ParamSet, s: &Sample, variant: Variant, gamma: f64) -> (Vec<f64>, f64) {
    let x = s.image();
    let u = forward(net, params, x, None);
    let u_logits = u.outputs.last().unwrap().data().to_vec();
    let labels = s.labels();
    let lu = labels.iter().map(|&l| log_softmax_ce(&u_logits, l)).sum::<f64>() / labels.len() as f64;
    let reapply = variant != Variant::CompNoMask;
    let mut per_k = Vec::new();
    let (mut lm_sum, mut lc_sum) = (0.0, 0.0);
    for (k, o) in s.objects().iter().enumerate() {
        let m = forward(net, params, x, Some((o.mask(), reapply)));
        let lm = log_softmax_ce(m.outputs.last().unwrap().data(), o.label());
        // Loss-mask region at input resolution.
        let region = if variant == Variant::CompObjOnly {
            o.mask().clone()
        } else {
            let mut keep = vec![1.0; 256];
            for (j, other) in s.objects().iter().enumerate() {
                if j != k {
                    for (kv, ov) in keep.iter_mut().zip(other.mask().data()) {
                        if *ov == 1.0 {
                            *kv = 0.0;
                        }
                    }
                }
            }
            Tensor::new([16, 16], keep).unwrap()
        };
        let mut lc = 0.0;
        for (&n, &lam) in &net.lambda {
            let a = &m.outputs[n];
            let b = &u.outputs[n];
            let sh = a.shape();
            let pm = project(&region, sh[0], sh[1], sh[2]);
            let mut sq = 0.0;
            for i in 0..a.len() {
                let d = a.data()[i] - b.data()[i] * pm.data()[i];
                sq += d * d;
            }
            lc += lam * sq / a.len() as f64;
        }
        per_k.push(gamma * lm + (1.0 - gamma) * lu + lc);
        lm_sum += lm;
        lc_sum += lc;
    }
    let kk = s.k() as f64;
    let full = gamma * lm_sum / kk + (1.0 - gamma) * lu + lc_sum / kk;
    (per_k, full)
}
