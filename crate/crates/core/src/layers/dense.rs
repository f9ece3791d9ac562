//! Fully connected layer: y = W x + b.

use super::LayerGradients;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn batch_view<S: Scalar>(input: &Tensor<S>, n_in: usize, what: &str) -> Result<usize> {
    match input.shape() {
        [n] if *n == n_in => Ok(1),
        [b, n] if *n == n_in => Ok(*b),
        other => Err(Error::shape(format!(
            "{what}: input shape {other:?} incompatible with {n_in} input features"
        ))),
    }
}

/// `input` is [N] or [B,N]; `weights` is [M,N]; `bias` is [M].
pub fn dense<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    if weights.rank() != 2 {
        return Err(Error::shape(format!("dense weights must be [M,N], got {:?}", weights.shape())));
    }
    let (m, n_in) = (weights.shape()[0], weights.shape()[1]);
    if bias.shape() != [m] {
        return Err(Error::shape(format!("dense bias must be [{m}], got {:?}", bias.shape())));
    }
    let b = batch_view(input, n_in, "dense")?;
    let mut out = if input.rank() == 1 { Tensor::zeros(&[m]) } else { Tensor::zeros(&[b, m]) };
    // out[B,M] = input[B,N] * W^T
    unsafe {
        S::gemm(
            b,
            n_in,
            m,
            S::ONE,
            input.data().as_ptr(),
            n_in as isize,
            1,
            weights.data().as_ptr(),
            1,
            n_in as isize,
            S::ZERO,
            out.data_mut().as_mut_ptr(),
            m as isize,
            1,
        );
    }
    for row in out.data_mut().chunks_exact_mut(m) {
        for (v, &bv) in row.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    Ok(out)
}

/// Gradients of [`dense`] w.r.t. input, weights and bias.
pub fn dense_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    output_grad: &Tensor<S>,
) -> Result<LayerGradients<S>> {
    let (m, n_in) = (weights.shape()[0], weights.shape()[1]);
    let b = batch_view(input, n_in, "dense_backward")?;
    let gb = batch_view(output_grad, m, "dense_backward output_grad")?;
    if gb != b {
        return Err(Error::shape(format!(
            "dense_backward: batch {b} vs output_grad batch {gb}"
        )));
    }
    let mut dinput = Tensor::zeros(input.shape());
    let mut dweights = Tensor::zeros(weights.shape());
    let mut dbias = Tensor::zeros(&[m]);
    unsafe {
        // dX[B,N] = dY[B,M] * W[M,N]
        S::gemm(
            b,
            m,
            n_in,
            S::ONE,
            output_grad.data().as_ptr(),
            m as isize,
            1,
            weights.data().as_ptr(),
            n_in as isize,
            1,
            S::ZERO,
            dinput.data_mut().as_mut_ptr(),
            n_in as isize,
            1,
        );
        // dW[M,N] = dY^T[M,B] * X[B,N]
        S::gemm(
            m,
            b,
            n_in,
            S::ONE,
            output_grad.data().as_ptr(),
            1,
            m as isize,
            input.data().as_ptr(),
            n_in as isize,
            1,
            S::ZERO,
            dweights.data_mut().as_mut_ptr(),
            n_in as isize,
            1,
        );
    }
    for row in output_grad.data().chunks_exact(m) {
        for (d, &g) in dbias.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok(LayerGradients::new(dinput).with("weight", dweights).with("bias", dbias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0f32;
        }
        let b = Tensor::zeros(&[3]);
        let x = Tensor::from_vec(&[3], vec![1.0f32, -2.0, 3.0]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_gives_bias() {
        let w = Tensor::filled(&[2, 4], 0.5f32);
        let b = Tensor::from_vec(&[2], vec![1.5f32, -0.5]).unwrap();
        let x = Tensor::zeros(&[4]);
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let w = Tensor::<f32>::zeros(&[2, 4]);
        let b = Tensor::<f32>::zeros(&[2]);
        let x = Tensor::<f32>::zeros(&[5]);
        assert!(dense(&x, &w, &b).is_err());
    }

    #[test]
    fn batched_matches_per_row() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1f32, 0.2]).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0f32, 1.0, 1.0, 2.0, 0.0, -2.0]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        let row0 = dense(&Tensor::from_vec(&[3], vec![1.0f32, 1.0, 1.0]).unwrap(), &w, &b).unwrap();
        assert_eq!(&y.data()[0..2], row0.data());
    }
}
