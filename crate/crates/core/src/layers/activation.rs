//! ReLU and inverted dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Elementwise max(0, x).
pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| v.max(S::ZERO))
}

/// Gradient is masked where the forward input was <= 0.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, output_grad: &Tensor<S>) -> Result<Tensor<S>> {
    if input.shape() != output_grad.shape() {
        return Err(Error::shape(format!(
            "relu_backward: input {:?} vs output_grad {:?}",
            input.shape(),
            output_grad.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(output_grad.data())
        .map(|(&x, &g)| if x > S::ZERO { g } else { S::ZERO })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Survivor mask of a dropout draw; needed to replay the same pattern in the
/// backward pass.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub rate: f64,
}

impl DropoutMask {
    pub fn scale<S: Scalar>(&self) -> S {
        S::from_f64(1.0 / (1.0 - self.rate))
    }

    /// Identity mask (eval mode or rate 0).
    pub fn identity(len: usize) -> Self {
        DropoutMask { keep: vec![true; len], rate: 0.0 }
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); eval mode is the identity.
/// Mask elements are drawn in row-major element order.
pub fn dropout_forward<S: Scalar, R: Rng>(
    input: &Tensor<S>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor<S>, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0,1), got {rate}")));
    }
    if !train || rate == 0.0 {
        return Ok((input.clone(), DropoutMask::identity(input.len())));
    }
    let keep: Vec<bool> = (0..input.len()).map(|_| rng.gen::<f64>() >= rate).collect();
    let scale = S::from_f64(1.0 / (1.0 - rate));
    let data = input
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v * scale } else { S::ZERO })
        .collect();
    let out = Tensor::from_vec(input.shape(), data)?;
    Ok((out, DropoutMask { keep, rate }))
}

/// Replay the forward mask on the gradient.
pub fn dropout_backward<S: Scalar>(mask: &DropoutMask, output_grad: &Tensor<S>) -> Result<Tensor<S>> {
    if mask.keep.len() != output_grad.len() {
        return Err(Error::shape(format!(
            "dropout_backward: mask has {} entries, grad {}",
            mask.keep.len(),
            output_grad.len()
        )));
    }
    let scale = mask.scale::<S>();
    let data = output_grad
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&g, &k)| if k { g * scale } else { S::ZERO })
        .collect();
    Tensor::from_vec(output_grad.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_basic() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_blocks_gradient() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, -5.0, -0.1]).unwrap();
        let g = Tensor::filled(&[3], 1.0f32);
        let dx = relu_backward(&x, &g).unwrap();
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(&[4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = dropout_forward(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::filled(&[100], 1.0f32);
        let (y, _) = dropout_forward(&x, 0.3, false, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::filled(&[4], 1.0f32);
        assert!(dropout_forward(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics_at_half_rate() {
        // 1e5 elements, rate 0.5: survivor fraction within 0.5 +- 0.01,
        // mean preserved within 2%.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::filled(&[100_000], 1.0f32);
        let (y, mask) = dropout_forward(&x, 0.5, true, &mut rng).unwrap();
        let survivors = mask.keep.iter().filter(|&&k| k).count() as f64 / 100_000.0;
        assert!((survivors - 0.5).abs() < 0.01, "survivor fraction {survivors}");
        let mean: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
