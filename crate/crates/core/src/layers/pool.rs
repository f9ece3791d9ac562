//! 2x2 max-pooling with stored argmax indices for the backward pass.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Max-pool [C,H,W] (or [N,C,H,W]) with a 2x2 window and stride 2. Odd
/// trailing rows/columns are dropped. Ties go to the first element in
/// row-major window order. Returns the pooled tensor plus the flat input
/// index of each window maximum.
pub fn maxpool2x2<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let (lead, h, w) = match input.shape() {
        [c, h, w] => (vec![*c], *h, *w),
        [n, c, h, w] => (vec![*n, *c], *h, *w),
        other => {
            return Err(Error::shape(format!("maxpool2x2 expects [C,H,W] or [N,C,H,W], got {other:?}")))
        }
    };
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("maxpool2x2 needs H,W >= 2, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let channels: usize = lead.iter().product();
    let mut out_shape = lead;
    out_shape.extend_from_slice(&[oh, ow]);
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0u32; channels * oh * ow];

    let src = input.data();
    let dst = out.data_mut();
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = src[best];
                for &i in &candidates[1..] {
                    if src[i] > best_v {
                        best_v = src[i];
                        best = i;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                dst[o] = best_v;
                argmax[o] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Route `output_grad` back to the stored argmax positions.
pub fn maxpool2x2_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    output_grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    if output_grad.len() != argmax.len() {
        return Err(Error::shape(format!(
            "maxpool2x2 backward: output_grad has {} values, argmax {}",
            output_grad.len(),
            argmax.len()
        )));
    }
    let mut dinput = Tensor::zeros(input_shape);
    let dst = dinput.data_mut();
    for (&idx, &g) in argmax.iter().zip(output_grad.data()) {
        dst[idx as usize] += g;
    }
    Ok(dinput)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_single_window() {
        let input = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = maxpool2x2(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);
    }

    #[test]
    fn table1_shape_64x40x195() {
        let input = Tensor::<f32>::zeros(&[64, 40, 195]);
        let (out, _) = maxpool2x2(&input).unwrap();
        assert_eq!(out.shape(), &[64, 20, 97]);
    }

    #[test]
    fn constant_input_ties_to_first_index() {
        let input = Tensor::filled(&[1, 4, 4], 7.0f32);
        let (out, argmax) = maxpool2x2(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
        // first (row-major) index of each 2x2 window
        assert_eq!(argmax, vec![0, 2, 8, 10]);
    }

    #[test]
    fn backward_puts_gradient_on_exactly_one_cell_per_window() {
        let input = Tensor::filled(&[1, 4, 4], 1.0f32);
        let (_, argmax) = maxpool2x2(&input).unwrap();
        let dout = Tensor::filled(&[1, 2, 2], 1.0f32);
        let dinput = maxpool2x2_backward(&[1, 4, 4], &argmax, &dout).unwrap();
        let nonzero = dinput.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn rejects_too_small_input() {
        let input = Tensor::<f32>::zeros(&[1, 1, 4]);
        assert!(maxpool2x2(&input).is_err());
    }

    #[test]
    fn odd_trailing_column_dropped() {
        let input = Tensor::from_vec(&[1, 2, 3], vec![1.0f32, 2.0, 9.0, 3.0, 4.0, 9.0]).unwrap();
        let (out, _) = maxpool2x2(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }
}
