//! Forward and backward kernels.
//!
//! Convolution is stride 1 with zero same-padding and goes through an
//! im2col matrix and a GEMM. Pooling is 2×2 max with stride 2. Every kernel
//! has a fixed reduction order, so repeated calls are bit-identical.

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Backward passes skip rows of an all-zero output gradient when fewer than
/// this fraction of rows carry signal.
const SPARSE_ROW_DENSITY: f64 = 0.9;

pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernels: &Tensor) -> Result<Self> {
        let (h, w, c_in) = input.hwc()?;
        let &[kh, kw, kc, c_out] = kernels.shape() else {
            return Err(shape_err!(
                "conv kernels must be (kh, kw, c_in, c_out), got {:?}",
                kernels.shape()
            ));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid!("conv kernel extents must be odd, got {kh}x{kw}"));
        }
        if kc != c_in {
            return Err(shape_err!(
                "conv kernels expect {kc} input channels, input has {c_in}"
            ));
        }
        Ok(ConvGeometry {
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn positions(&self) -> usize {
        self.h * self.w
    }
}

fn check_bias(bias: &Tensor, n: usize) -> Result<()> {
    if bias.len() != n || bias.rank() != 1 {
        return Err(shape_err!(
            "bias must be a vector of length {n}, got {:?}",
            bias.shape()
        ));
    }
    Ok(())
}

/// Copies the receptive field of each selected output position into one row
/// of a `rows × (kh·kw·c_in)` matrix. `rows = None` selects every position.
fn im2col(input: &[f64], g: &ConvGeometry, rows: Option<&[usize]>) -> Vec<f64> {
    let patch = g.patch();
    let n_rows = rows.map_or(g.positions(), |r| r.len());
    let mut col = vec![0.0; n_rows * patch];
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut fill = |out_row: usize, pos: usize| {
        let (y, x) = (pos / g.w, pos % g.w);
        let dst = &mut col[out_row * patch..(out_row + 1) * patch];
        for dy in 0..g.kh {
            let iy = y + dy;
            if iy < ph || iy - ph >= g.h {
                continue;
            }
            let iy = iy - ph;
            for dx in 0..g.kw {
                let ix = x + dx;
                if ix < pw || ix - pw >= g.w {
                    continue;
                }
                let ix = ix - pw;
                let src = (iy * g.w + ix) * g.c_in;
                let off = (dy * g.kw + dx) * g.c_in;
                dst[off..off + g.c_in].copy_from_slice(&input[src..src + g.c_in]);
            }
        }
    };
    match rows {
        None => (0..n_rows).for_each(|p| fill(p, p)),
        Some(r) => r.iter().enumerate().for_each(|(i, &p)| fill(i, p)),
    }
    col
}

/// Scatters column gradients back onto the padded input grid.
fn col2im_add(dcol: &[f64], g: &ConvGeometry, rows: Option<&[usize]>, out: &mut [f64]) {
    let patch = g.patch();
    let n_rows = rows.map_or(g.positions(), |r| r.len());
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    for i in 0..n_rows {
        let pos = rows.map_or(i, |r| r[i]);
        let (y, x) = (pos / g.w, pos % g.w);
        let src_row = &dcol[i * patch..(i + 1) * patch];
        for dy in 0..g.kh {
            let iy = y + dy;
            if iy < ph || iy - ph >= g.h {
                continue;
            }
            let iy = iy - ph;
            for dx in 0..g.kw {
                let ix = x + dx;
                if ix < pw || ix - pw >= g.w {
                    continue;
                }
                let ix = ix - pw;
                let dst = (iy * g.w + ix) * g.c_in;
                let off = (dy * g.kw + dx) * g.c_in;
                for c in 0..g.c_in {
                    out[dst + c] += src_row[off + c];
                }
            }
        }
    }
}

/// Same-padded, stride-1 cross-correlation with per-channel bias.
///
/// `input` is `(h, w, c_in)` (a rank-2 input counts as one channel),
/// `kernels` is `(kh, kw, c_in, c_out)` with odd spatial extents, and the
/// result is `(h, w, c_out)`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernels)?;
    check_bias(bias, g.c_out)?;
    let col = im2col(input.data(), &g, None);
    let mut out = vec![0.0; g.positions() * g.c_out];
    for row in out.chunks_exact_mut(g.c_out) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        g.positions(),
        g.patch(),
        g.c_out,
        &col,
        Layout::Normal,
        kernels.data(),
        Layout::Normal,
        &mut out,
        true,
    );
    Tensor::new([g.h, g.w, g.c_out], out)
}

/// Gradients of [`conv2d`] with respect to its operands.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor>,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d`].
///
/// Output positions whose gradient is zero in every channel contribute
/// nothing, so when such positions dominate (masked branches) only the
/// remaining rows are gathered and multiplied.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernels)?;
    if grad_out.shape() != [g.h, g.w, g.c_out] {
        return Err(shape_err!(
            "conv output gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.h, g.w, g.c_out]
        ));
    }
    let dy = grad_out.data();
    let live: Vec<usize> = (0..g.positions())
        .filter(|&p| dy[p * g.c_out..(p + 1) * g.c_out].iter().any(|&v| v != 0.0))
        .collect();

    let mut d_bias = vec![0.0; g.c_out];
    for &p in &live {
        for (acc, v) in d_bias.iter_mut().zip(&dy[p * g.c_out..(p + 1) * g.c_out]) {
            *acc += v;
        }
    }

    let sparse = (live.len() as f64) < SPARSE_ROW_DENSITY * g.positions() as f64;
    let (rows, dy_rows): (Option<&[usize]>, std::borrow::Cow<'_, [f64]>) = if sparse {
        let mut packed = Vec::with_capacity(live.len() * g.c_out);
        for &p in &live {
            packed.extend_from_slice(&dy[p * g.c_out..(p + 1) * g.c_out]);
        }
        (Some(&live), packed.into())
    } else {
        (None, dy.into())
    };
    let n_rows = rows.map_or(g.positions(), |r| r.len());

    let col = im2col(input.data(), &g, rows);
    let mut d_kernels = vec![0.0; g.patch() * g.c_out];
    gemm(
        g.patch(),
        n_rows,
        g.c_out,
        &col,
        Layout::Transposed,
        &dy_rows,
        Layout::Normal,
        &mut d_kernels,
        false,
    );

    let d_input = if want_input {
        let mut dcol = vec![0.0; n_rows * g.patch()];
        gemm(
            n_rows,
            g.c_out,
            g.patch(),
            &dy_rows,
            Layout::Normal,
            kernels.data(),
            Layout::Transposed,
            &mut dcol,
            false,
        );
        let mut dx = vec![0.0; input.len()];
        col2im_add(&dcol, &g, rows, &mut dx);
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: d_input,
        kernels: Tensor::new(kernels.shape().to_vec(), d_kernels)?,
        bias: Tensor::new([g.c_out], d_bias)?,
    })
}

/// Flat input index of the winning element of each pooling window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    winners: Vec<usize>,
}

impl PoolIndices {
    pub fn winners(&self) -> &[usize] {
        &self.winners
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

/// 2×2 max pooling with stride 2. Ties go to the smallest flat index.
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (h, w, c) = input.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid!("max pooling needs even spatial extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut winners = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let mut best = (2 * y * w + 2 * xo) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * y + dy) * w + 2 * xo + dx) * c + ch;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                winners.push(best);
            }
        }
    }
    let out_shape = if input.rank() == 2 {
        vec![oh, ow]
    } else {
        vec![oh, ow, c]
    };
    Ok((
        Tensor::new(out_shape, out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            winners,
        },
    ))
}

/// Routes each pooled gradient to its recorded winner.
pub fn maxpool2d_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != indices.winners.len() {
        return Err(shape_err!(
            "pool gradient has {} values, {} windows were recorded",
            grad_out.len(),
            indices.winners.len()
        ));
    }
    let mut dx = Tensor::zeros(indices.input_shape.clone())?;
    let d = dx.data_mut();
    for (&idx, &g) in indices.winners.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// `out = flatten(input)ᵀ · weights + bias` with `weights` shaped `(n, m)`.
pub fn affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[n, m] = weights.shape() else {
        return Err(shape_err!("affine weights must be (n, m), got {:?}", weights.shape()));
    };
    if input.len() != n {
        return Err(shape_err!(
            "affine expects {n} inputs, got {} (shape {:?})",
            input.len(),
            input.shape()
        ));
    }
    check_bias(bias, m)?;
    let mut out = bias.data().to_vec();
    gemm(1, n, m, input.data(), Layout::Normal, weights.data(), Layout::Normal, &mut out, true);
    Tensor::new([m], out)
}

/// Gradients of [`affine`]: `(input, weights, bias)`.
pub fn affine_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let &[n, m] = weights.shape() else {
        return Err(shape_err!("affine weights must be (n, m), got {:?}", weights.shape()));
    };
    if grad_out.len() != m || input.len() != n {
        return Err(shape_err!("affine backward operand sizes do not match"));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut dw = vec![0.0; n * m];
    for (i, row) in dw.chunks_exact_mut(m).enumerate() {
        let xi = x[i];
        if xi != 0.0 {
            for (d, gj) in row.iter_mut().zip(g) {
                *d = xi * gj;
            }
        }
    }
    let dx = if want_input {
        let w = weights.data();
        let d: Vec<f64> = (0..n)
            .map(|i| w[i * m..(i + 1) * m].iter().zip(g).map(|(a, b)| a * b).sum())
            .collect();
        Some(Tensor::new(input.shape().to_vec(), d)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new([n, m], dw)?,
        Tensor::new([m], g.to_vec())?,
    ))
}

/// Block-averages an `(H, W)` mask down to `(h, w)`; `H/h` and `W/w` must be
/// integers.
pub fn avg_downsample(mask: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (big_h, big_w, c) = mask.hwc()?;
    if c != 1 {
        return Err(shape_err!("masks are single channel, got {c} channels"));
    }
    let (h, w) = target;
    if h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0 {
        return Err(invalid!(
            "cannot block-average {big_h}x{big_w} down to {h}x{w}"
        ));
    }
    let (bh, bw) = (big_h / h, big_w / w);
    let area = (bh * bw) as f64;
    let src = mask.data();
    let mut out = vec![0.0; h * w];
    for (i, o) in out.iter_mut().enumerate() {
        let (y, x) = (i / w, i % w);
        let mut s = 0.0;
        for yy in y * bh..(y + 1) * bh {
            let row = &src[yy * big_w + x * bw..yy * big_w + (x + 1) * bw];
            s += row.iter().sum::<f64>();
        }
        *o = s / area;
    }
    Tensor::new([h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mask_selection() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(elementwise_mul(&a, &m).unwrap().data(), &[1.0, 0.0, 0.0, 4.0]);
        let ones = Tensor::ones([2, 2]).unwrap();
        assert_eq!(elementwise_mul(&a, &ones).unwrap(), a);
        assert!(elementwise_mul(&a, &Tensor::ones([4]).unwrap()).is_err());
    }

    #[test]
    fn relu_values() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let nonneg = t(&[3], &[0.0, 0.5, 2.0]);
        assert_eq!(relu(&nonneg), nonneg);
        let back = relu_backward(&x, &t(&[3], &[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(back.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn identity_kernel_and_constant_bias() {
        let x = Tensor::from_fn([3, 4, 2], |i| i as f64 - 5.0).unwrap();
        let mut k = Tensor::zeros([1, 1, 2, 2]).unwrap();
        k.data_mut()[0] = 1.0;
        k.data_mut()[3] = 1.0;
        let out = conv2d(&x, &k, &Tensor::zeros([2]).unwrap()).unwrap();
        assert_eq!(out, x);

        let zero = Tensor::zeros([4, 4, 1]).unwrap();
        let k = Tensor::from_fn([3, 3, 1, 2], |i| i as f64).unwrap();
        let out = conv2d(&zero, &k, &t(&[2], &[1.5, -2.0])).unwrap();
        for px in out.data().chunks(2) {
            assert_eq!(px, &[1.5, -2.0]);
        }
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros([4, 4, 2]).unwrap();
        let even = Tensor::zeros([2, 2, 2, 1]).unwrap();
        assert!(conv2d(&x, &even, &Tensor::zeros([1]).unwrap()).is_err());
        let wrong_c = Tensor::zeros([3, 3, 3, 1]).unwrap();
        assert!(conv2d(&x, &wrong_c, &Tensor::zeros([1]).unwrap()).is_err());
        let k = Tensor::zeros([3, 3, 2, 1]).unwrap();
        assert!(conv2d(&x, &k, &Tensor::zeros([2]).unwrap()).is_err());
    }

    #[test]
    fn pool_small_cases() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let (out, idx) = maxpool2d(&x).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.winners(), &[3]);

        let c = Tensor::full([4, 4, 1], 7.0).unwrap();
        let (out, idx) = maxpool2d(&c).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
        assert_eq!(idx.winners(), &[0, 2, 8, 10]);

        assert!(maxpool2d(&Tensor::zeros([3, 4, 1]).unwrap()).is_err());
    }

    #[test]
    fn pool_backward_routes_to_winner() {
        let x = t(&[2, 2, 1], &[1.0, 9.0, 3.0, 4.0]);
        let (_, idx) = maxpool2d(&x).unwrap();
        let dx = maxpool2d_backward(&idx, &t(&[1, 1, 1], &[2.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn affine_identity_and_bias() {
        let x = t(&[3], &[1.0, -2.0, 3.0]);
        let mut eye = Tensor::zeros([3, 3]).unwrap();
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(affine(&x, &eye, &Tensor::zeros([3]).unwrap()).unwrap().data(), x.data());
        let b = t(&[2], &[0.5, -0.5]);
        let w = Tensor::from_fn([3, 2], |i| i as f64).unwrap();
        let out = affine(&Tensor::zeros([3]).unwrap(), &w, &b).unwrap();
        assert_eq!(out.data(), b.data());
        assert!(affine(&t(&[2], &[1.0, 1.0]), &w, &b).is_err());
    }

    #[test]
    fn downsample_cases() {
        let ones = Tensor::ones([4, 4]).unwrap();
        assert_eq!(avg_downsample(&ones, (2, 2)).unwrap(), Tensor::ones([2, 2]).unwrap());

        let left = Tensor::from_fn([4, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(avg_downsample(&left, (2, 2)).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);

        let corner = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(avg_downsample(&corner, (1, 1)).unwrap().data(), &[0.25]);

        assert!(avg_downsample(&ones, (3, 3)).is_err());
    }
}
