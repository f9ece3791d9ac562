//! Softmax output layer and categorical cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

// Probabilities are clamped here before the log; keeps the loss finite
// without measurable bias.
const P_FLOOR: f64 = 1e-12;

/// Numerically stable softmax of a rank-1 logit vector.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.rank() != 1 || logits.is_empty() {
        return Err(Error::shape(format!(
            "softmax expects a non-empty rank-1 tensor, got {:?}",
            logits.shape()
        )));
    }
    let mut out = Tensor::zeros(logits.shape());
    softmax_slice(logits.data(), out.data_mut());
    Ok(out)
}

/// Row-wise softmax of [N,B] logits.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("softmax_rows expects [N,B], got {:?}", logits.shape())));
    }
    let b = logits.shape()[1];
    let mut out = Tensor::zeros(logits.shape());
    for (orow, irow) in out.data_mut().chunks_exact_mut(b).zip(logits.data().chunks_exact(b)) {
        softmax_slice(irow, orow);
    }
    Ok(out)
}

fn softmax_slice<S: Scalar>(logits: &[S], out: &mut [S]) {
    let mut max = logits[0];
    for &v in &logits[1..] {
        max = max.max(v);
    }
    let mut sum = S::ZERO;
    for (o, &v) in out.iter_mut().zip(logits) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Categorical cross entropy of a probability vector against a (soft) target
/// distribution. Returns the loss and its gradient w.r.t. the pre-softmax
/// logits, which for softmax + CCE is `p - t`.
pub fn cce_loss<S: Scalar>(predictions: &Tensor<S>, targets: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    if predictions.shape() != targets.shape() || predictions.rank() != 1 {
        return Err(Error::shape(format!(
            "cce_loss: predictions {:?} vs targets {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    let mut tsum = 0.0f64;
    for &t in targets.data() {
        let tv = t.to_f64();
        if tv < 0.0 {
            return Err(Error::invalid(format!("cce_loss: negative target {tv}")));
        }
        tsum += tv;
    }
    if (tsum - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!("cce_loss: targets sum to {tsum}, expected 1")));
    }
    let mut loss = 0.0f64;
    for (&p, &t) in predictions.data().iter().zip(targets.data()) {
        let tv = t.to_f64();
        if tv > 0.0 {
            loss -= tv * p.to_f64().max(P_FLOOR).ln();
        }
    }
    let grad_data = predictions
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| p - t)
        .collect();
    Ok((S::from_f64(loss), Tensor::from_vec(predictions.shape(), grad_data)?))
}
