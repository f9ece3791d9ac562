//! 2-D convolution (cross-correlation) with explicit backward pass.
//!
//! Two equivalent forward implementations exist: a direct loop for small
//! problems and im2col + GEMM for everything else. Results are identical;
//! the test suite pins both against a naive reference.

use super::LayerGradients;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Padding and stride of a convolution, (height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub pad: (usize, usize),
    pub stride: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(pad: (usize, usize), stride: (usize, usize)) -> Self {
        Conv2dSpec { pad, stride }
    }

    pub fn unit(pad: (usize, usize)) -> Self {
        Conv2dSpec { pad, stride: (1, 1) }
    }

    pub fn out_dims(&self, in_h: usize, in_w: usize, k_h: usize, k_w: usize) -> Result<(usize, usize)> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let ph = in_h + 2 * self.pad.0;
        let pw = in_w + 2 * self.pad.1;
        if k_h > ph || k_w > pw {
            return Err(Error::invalid(format!(
                "conv2d kernel {k_h}x{k_w} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - k_h) / self.stride.0 + 1, (pw - k_w) / self.stride.1 + 1))
    }
}

struct ConvDims {
    c_in: usize,
    in_h: usize,
    in_w: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
}

fn validate<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    spec: Conv2dSpec,
) -> Result<ConvDims> {
    if input.rank() != 3 {
        return Err(Error::shape(format!("conv2d input must be [C,H,W], got {:?}", input.shape())));
    }
    if kernels.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d kernels must be [C_out,C_in,kH,kW], got {:?}",
            kernels.shape()
        )));
    }
    let (c_in, in_h, in_w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kc_in, k_h, k_w) =
        (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2], kernels.shape()[3]);
    if kc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d input has {c_in} channels but kernels expect {kc_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv2d bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let (out_h, out_w) = spec.out_dims(in_h, in_w, k_h, k_w)?;
    Ok(ConvDims { c_in, in_h, in_w, c_out, k_h, k_w, out_h, out_w })
}

/// Cross-correlate `input` [C_in,H,W] with `kernels` [C_out,C_in,kH,kW],
/// add `bias` per output channel.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    spec: Conv2dSpec,
) -> Result<Tensor<S>> {
    let d = validate(input, kernels, bias, spec)?;
    let mut out = Tensor::zeros(&[d.c_out, d.out_h, d.out_w]);
    let mut scratch = Vec::new();
    conv2d_into(input.data(), kernels.data(), bias.data(), &d, spec, &mut scratch, out.data_mut());
    Ok(out)
}

// Small problems skip the im2col detour.
const DIRECT_WORK_LIMIT: usize = 1 << 14;

fn conv2d_into<S: Scalar>(
    input: &[S],
    kernels: &[S],
    bias: &[S],
    d: &ConvDims,
    spec: Conv2dSpec,
    scratch: &mut Vec<S>,
    out: &mut [S],
) {
    let k = d.c_in * d.k_h * d.k_w;
    let l = d.out_h * d.out_w;
    if k * l <= DIRECT_WORK_LIMIT {
        conv2d_direct(input, kernels, bias, d, spec, out);
    } else {
        im2col(input, d, spec, scratch);
        // out[C_out, L] = kernels[C_out, K] * col[K, L]
        unsafe {
            S::gemm(
                d.c_out,
                k,
                l,
                S::ONE,
                kernels.as_ptr(),
                k as isize,
                1,
                scratch.as_ptr(),
                l as isize,
                1,
                S::ZERO,
                out.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        for (o, row) in out.chunks_exact_mut(l).enumerate() {
            let b = bias[o];
            for v in row {
                *v += b;
            }
        }
    }
}

fn conv2d_direct<S: Scalar>(
    input: &[S],
    kernels: &[S],
    bias: &[S],
    d: &ConvDims,
    spec: Conv2dSpec,
    out: &mut [S],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    for o in 0..d.c_out {
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let mut acc = bias[o];
                for c in 0..d.c_in {
                    for dy in 0..d.k_h {
                        let iy = (oy * sh + dy) as isize - ph as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        for dx in 0..d.k_w {
                            let ix = (ox * sw + dx) as isize - pw as isize;
                            if ix < 0 || ix >= d.in_w as isize {
                                continue;
                            }
                            let iv = input[(c * d.in_h + iy as usize) * d.in_w + ix as usize];
                            let kv = kernels[((o * d.c_in + c) * d.k_h + dy) * d.k_w + dx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(o * d.out_h + oy) * d.out_w + ox] = acc;
            }
        }
    }
}

/// Unfold the padded input into a [C_in*kH*kW, out_h*out_w] patch matrix.
fn im2col<S: Scalar>(input: &[S], d: &ConvDims, spec: Conv2dSpec, col: &mut Vec<S>) {
    let k = d.c_in * d.k_h * d.k_w;
    let l = d.out_h * d.out_w;
    col.clear();
    col.resize(k * l, S::ZERO);
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    for c in 0..d.c_in {
        for dy in 0..d.k_h {
            for dx in 0..d.k_w {
                let row = ((c * d.k_h + dy) * d.k_w + dx) * l;
                for oy in 0..d.out_h {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    let dst = &mut col[row + oy * d.out_w..row + (oy + 1) * d.out_w];
                    if iy < 0 || iy >= d.in_h as isize {
                        for v in dst.iter_mut() {
                            *v = S::ZERO;
                        }
                        continue;
                    }
                    let src_row = (c * d.in_h + iy as usize) * d.in_w;
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + dx) as isize - pw as isize;
                        *v = if ix < 0 || ix >= d.in_w as isize {
                            S::ZERO
                        } else {
                            input[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a [K, L] gradient matrix back onto the input (scatter-add).
fn col2im<S: Scalar>(dcol: &[S], d: &ConvDims, spec: Conv2dSpec, dinput: &mut [S]) {
    let l = d.out_h * d.out_w;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    for c in 0..d.c_in {
        for dy in 0..d.k_h {
            for dx in 0..d.k_w {
                let row = ((c * d.k_h + dy) * d.k_w + dx) * l;
                for oy in 0..d.out_h {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    if iy < 0 || iy >= d.in_h as isize {
                        continue;
                    }
                    let src = &dcol[row + oy * d.out_w..row + (oy + 1) * d.out_w];
                    let dst_row = (c * d.in_h + iy as usize) * d.in_w;
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * sw + dx) as isize - pw as isize;
                        if ix >= 0 && ix < d.in_w as isize {
                            dinput[dst_row + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] w.r.t. input, kernels and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    spec: Conv2dSpec,
    output_grad: &Tensor<S>,
) -> Result<LayerGradients<S>> {
    let d = validate(input, kernels, bias, spec)?;
    if output_grad.shape() != [d.c_out, d.out_h, d.out_w] {
        return Err(Error::shape(format!(
            "conv2d output_grad must be [{}, {}, {}], got {:?}",
            d.c_out,
            d.out_h,
            d.out_w,
            output_grad.shape()
        )));
    }
    let mut dinput = Tensor::zeros(input.shape());
    let mut dkernels = Tensor::zeros(kernels.shape());
    let mut dbias = Tensor::zeros(&[d.c_out]);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    conv2d_backward_into(
        input.data(),
        kernels.data(),
        &d,
        spec,
        output_grad.data(),
        &mut col,
        &mut dcol,
        dinput.data_mut(),
        dkernels.data_mut(),
        dbias.data_mut(),
    );
    Ok(LayerGradients::new(dinput).with("weight", dkernels).with("bias", dbias))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_into<S: Scalar>(
    input: &[S],
    kernels: &[S],
    d: &ConvDims,
    spec: Conv2dSpec,
    output_grad: &[S],
    col: &mut Vec<S>,
    dcol: &mut Vec<S>,
    dinput: &mut [S],
    dkernels: &mut [S],
    dbias: &mut [S],
) {
    let k = d.c_in * d.k_h * d.k_w;
    let l = d.out_h * d.out_w;
    for (o, row) in output_grad.chunks_exact(l).enumerate() {
        let mut acc = S::ZERO;
        for &v in row {
            acc += v;
        }
        dbias[o] += acc;
    }
    im2col(input, d, spec, col);
    // dkernels[C_out, K] += dout[C_out, L] * col[K, L]^T
    unsafe {
        S::gemm(
            d.c_out,
            l,
            k,
            S::ONE,
            output_grad.as_ptr(),
            l as isize,
            1,
            col.as_ptr(),
            1,
            l as isize,
            S::ONE,
            dkernels.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    // dcol[K, L] = kernels[C_out, K]^T * dout[C_out, L]
    dcol.clear();
    dcol.resize(k * l, S::ZERO);
    unsafe {
        S::gemm(
            k,
            d.c_out,
            l,
            S::ONE,
            kernels.as_ptr(),
            1,
            k as isize,
            output_grad.as_ptr(),
            l as isize,
            1,
            S::ZERO,
            dcol.as_mut_ptr(),
            l as isize,
            1,
        );
    }
    col2im(dcol, d, spec, dinput);
}

/// Batched convolution over [N,C,H,W], one GEMM per example, examples in
/// parallel. Output is written per example into disjoint slices, so the
/// result does not depend on the thread count.
pub fn conv2d_batch<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    spec: Conv2dSpec,
) -> Result<Tensor<S>> {
    use rayon::prelude::*;
    if input.rank() != 4 {
        return Err(Error::shape(format!("conv2d_batch input must be [N,C,H,W], got {:?}", input.shape())));
    }
    let n = input.shape()[0];
    let one = Tensor::<S>::zeros(&input.shape()[1..]);
    let d = validate(&one, kernels, bias, spec)?;
    let in_len = d.c_in * d.in_h * d.in_w;
    let out_len = d.c_out * d.out_h * d.out_w;
    let mut out = Tensor::zeros(&[n, d.c_out, d.out_h, d.out_w]);
    out.data_mut()
        .par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each_init(Vec::new, |scratch, (dst, src)| {
            conv2d_into(src, kernels.data(), bias.data(), &d, spec, scratch, dst);
        });
    Ok(out)
}

/// Batched backward pass. Per-example kernel/bias gradient contributions are
/// reduced in example order, so results are thread-count independent.
pub fn conv2d_backward_batch<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    spec: Conv2dSpec,
    output_grad: &Tensor<S>,
) -> Result<LayerGradients<S>> {
    use rayon::prelude::*;
    let n = input.shape()[0];
    let one = Tensor::<S>::zeros(&input.shape()[1..]);
    let d = validate(&one, kernels, bias, spec)?;
    let in_len = d.c_in * d.in_h * d.in_w;
    let out_len = d.c_out * d.out_h * d.out_w;
    if output_grad.shape() != [n, d.c_out, d.out_h, d.out_w] {
        return Err(Error::shape(format!(
            "conv2d_batch output_grad shape {:?} does not match [{}, {}, {}, {}]",
            output_grad.shape(),
            n,
            d.c_out,
            d.out_h,
            d.out_w
        )));
    }
    let mut dinput = Tensor::zeros(input.shape());
    let kernel_len = kernels.len();
    let c_out = d.c_out;

    let per_example: Vec<(Vec<S>, Vec<S>)> = dinput
        .data_mut()
        .par_chunks_mut(in_len)
        .zip(input.data().par_chunks(in_len))
        .zip(output_grad.data().par_chunks(out_len))
        .map_init(
            || (Vec::new(), Vec::new()),
            |(col, dcol), ((dst, src), dout)| {
                let mut dk = vec![S::ZERO; kernel_len];
                let mut db = vec![S::ZERO; c_out];
                conv2d_backward_into(src, kernels.data(), &d, spec, dout, col, dcol, dst, &mut dk, &mut db);
                (dk, db)
            },
        )
        .collect();

    let mut dkernels = Tensor::zeros(kernels.shape());
    let mut dbias = Tensor::zeros(&[c_out]);
    for (dk, db) in per_example {
        for (a, b) in dkernels.data_mut().iter_mut().zip(&dk) {
            *a += *b;
        }
        for (a, b) in dbias.data_mut().iter_mut().zip(&db) {
            *a += *b;
        }
    }
    Ok(LayerGradients::new(dinput).with("weight", dkernels).with("bias", dbias))
}
