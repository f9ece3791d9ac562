//! Batch normalization over [B,C] (per feature) or [B,C,H,W] (per channel
//! over batch and space). Biased variance, eps inside the square root,
//! running stats updated as 0.9 * old + 0.1 * new.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics captured by a train-mode forward, needed for backward.
#[derive(Clone, Debug)]
pub struct BnCache<S: Scalar> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

/// Forward result. Running stats are returned functionally; the caller
/// decides whether to commit them.
#[derive(Clone, Debug)]
pub struct BnOutput<S: Scalar> {
    pub output: Tensor<S>,
    pub cache: Option<BnCache<S>>,
    pub new_running_mean: Tensor<S>,
    pub new_running_var: Tensor<S>,
}

struct BnDims {
    batch: usize,
    channels: usize,
    spatial: usize,
}

fn dims<S: Scalar>(input: &Tensor<S>) -> Result<BnDims> {
    match input.shape() {
        [b, c] => Ok(BnDims { batch: *b, channels: *c, spatial: 1 }),
        [b, c, h, w] => Ok(BnDims { batch: *b, channels: *c, spatial: h * w }),
        other => Err(Error::shape(format!(
            "batchnorm expects [B,C] or [B,C,H,W], got {other:?}"
        ))),
    }
}

fn check_params<S: Scalar>(d: &BnDims, gamma: &Tensor<S>, beta: &Tensor<S>, rm: &Tensor<S>, rv: &Tensor<S>) -> Result<()> {
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", rm), ("running_var", rv)] {
        if t.shape() != [d.channels] {
            return Err(Error::shape(format!(
                "batchnorm {name} must be [{}], got {:?}",
                d.channels,
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Per-channel sums of `f(x)` over batch and space, accumulated in f64 in a
/// fixed order so results are thread-count independent.
fn channel_sums<S: Scalar>(data: &[S], d: &BnDims, f: impl Fn(S, usize) -> f64) -> Vec<f64> {
    let mut sums = vec![0.0f64; d.channels];
    let stride = d.channels * d.spatial;
    for b in 0..d.batch {
        for c in 0..d.channels {
            let start = b * stride + c * d.spatial;
            let mut acc = 0.0f64;
            for (i, &v) in data[start..start + d.spatial].iter().enumerate() {
                acc += f(v, start + i);
            }
            sums[c] += acc;
        }
    }
    sums
}

pub fn batchnorm_forward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    mode: Mode,
    eps: f64,
) -> Result<BnOutput<S>> {
    let d = dims(input)?;
    check_params(&d, gamma, beta, running_mean, running_var)?;

    match mode {
        Mode::Train => {
            if d.batch < 2 {
                return Err(Error::invalid(format!(
                    "batchnorm train mode needs batch >= 2, got {}",
                    d.batch
                )));
            }
            let m = (d.batch * d.spatial) as f64;
            let sums = channel_sums(input.data(), &d, |v, _| v.to_f64());
            let means: Vec<f64> = sums.iter().map(|s| s / m).collect();
            let sqsums = channel_sums(input.data(), &d, |v, _| {
                let x = v.to_f64();
                x * x
            });
            // biased variance
            let vars: Vec<f64> = sqsums
                .iter()
                .zip(&means)
                .map(|(sq, mu)| (sq / m - mu * mu).max(0.0))
                .collect();
            let inv_stds: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

            let mut out = Tensor::zeros(input.shape());
            normalize(input.data(), out.data_mut(), &d, &means, &inv_stds, gamma, beta);

            let mut new_rm = Tensor::zeros(&[d.channels]);
            let mut new_rv = Tensor::zeros(&[d.channels]);
            for c in 0..d.channels {
                new_rm.data_mut()[c] =
                    S::from_f64(0.9 * running_mean.data()[c].to_f64() + 0.1 * means[c]);
                new_rv.data_mut()[c] =
                    S::from_f64(0.9 * running_var.data()[c].to_f64() + 0.1 * vars[c]);
            }
            Ok(BnOutput {
                output: out,
                cache: Some(BnCache {
                    mean: means.iter().map(|&v| S::from_f64(v)).collect(),
                    inv_std: inv_stds.iter().map(|&v| S::from_f64(v)).collect(),
                }),
                new_running_mean: new_rm,
                new_running_var: new_rv,
            })
        }
        Mode::Eval => {
            let means: Vec<f64> = running_mean.data().iter().map(|v| v.to_f64()).collect();
            let inv_stds: Vec<f64> =
                running_var.data().iter().map(|v| 1.0 / (v.to_f64() + eps).sqrt()).collect();
            let mut out = Tensor::zeros(input.shape());
            normalize(input.data(), out.data_mut(), &d, &means, &inv_stds, gamma, beta);
            Ok(BnOutput {
                output: out,
                cache: None,
                new_running_mean: running_mean.clone(),
                new_running_var: running_var.clone(),
            })
        }
    }
}

fn normalize<S: Scalar>(
    input: &[S],
    out: &mut [S],
    d: &BnDims,
    means: &[f64],
    inv_stds: &[f64],
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) {
    use rayon::prelude::*;
    let stride = d.channels * d.spatial;
    let spatial = d.spatial;
    let channels = d.channels;
    let g: Vec<S> = gamma.data().to_vec();
    let bt: Vec<S> = beta.data().to_vec();
    let mu: Vec<S> = means.iter().map(|&v| S::from_f64(v)).collect();
    let is: Vec<S> = inv_stds.iter().map(|&v| S::from_f64(v)).collect();
    out.par_chunks_mut(stride).zip(input.par_chunks(stride)).for_each(|(orow, irow)| {
        for c in 0..channels {
            let (gc, bc, mc, sc) = (g[c], bt[c], mu[c], is[c]);
            let o = &mut orow[c * spatial..(c + 1) * spatial];
            let i = &irow[c * spatial..(c + 1) * spatial];
            for (ov, &iv) in o.iter_mut().zip(i) {
                *ov = gc * (iv - mc) * sc + bc;
            }
        }
    });
}

/// Train-mode backward from the cached batch statistics. Returns
/// (input_grad, dgamma, dbeta).
pub fn batchnorm_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    cache: &BnCache<S>,
    output_grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = dims(input)?;
    if output_grad.shape() != input.shape() {
        return Err(Error::shape(format!(
            "batchnorm_backward: output_grad {:?} vs input {:?}",
            output_grad.shape(),
            input.shape()
        )));
    }
    let m = (d.batch * d.spatial) as f64;
    let stride = d.channels * d.spatial;

    // Reductions: sum(dy) and sum(dy * xhat) per channel.
    let mut sum_dy = vec![0.0f64; d.channels];
    let mut sum_dy_xhat = vec![0.0f64; d.channels];
    let x = input.data();
    let dy = output_grad.data();
    for b in 0..d.batch {
        for c in 0..d.channels {
            let start = b * stride + c * d.spatial;
            let mean = cache.mean[c].to_f64();
            let inv_std = cache.inv_std[c].to_f64();
            let mut a0 = 0.0f64;
            let mut a1 = 0.0f64;
            for i in start..start + d.spatial {
                let g = dy[i].to_f64();
                a0 += g;
                a1 += g * (x[i].to_f64() - mean) * inv_std;
            }
            sum_dy[c] += a0;
            sum_dy_xhat[c] += a1;
        }
    }

    let mut dgamma = Tensor::zeros(&[d.channels]);
    let mut dbeta = Tensor::zeros(&[d.channels]);
    for c in 0..d.channels {
        dgamma.data_mut()[c] = S::from_f64(sum_dy_xhat[c]);
        dbeta.data_mut()[c] = S::from_f64(sum_dy[c]);
    }

    let mut dinput = Tensor::zeros(input.shape());
    {
        use rayon::prelude::*;
        let spatial = d.spatial;
        let channels = d.channels;
        let mean: Vec<f64> = cache.mean.iter().map(|v| v.to_f64()).collect();
        let inv_std: Vec<f64> = cache.inv_std.iter().map(|v| v.to_f64()).collect();
        let g: Vec<f64> = gamma.data().iter().map(|v| v.to_f64()).collect();
        let mean_dy: Vec<f64> = sum_dy.iter().map(|s| s / m).collect();
        let mean_dy_xhat: Vec<f64> = sum_dy_xhat.iter().map(|s| s / m).collect();
        dinput
            .data_mut()
            .par_chunks_mut(stride)
            .zip(x.par_chunks(stride))
            .zip(dy.par_chunks(stride))
            .for_each(|((drow, xrow), gyrow)| {
                for c in 0..channels {
                    let scale = g[c] * inv_std[c];
                    for i in c * spatial..(c + 1) * spatial {
                        let xhat = (xrow[i].to_f64() - mean[c]) * inv_std[c];
                        let v = scale * (gyrow[i].to_f64() - mean_dy[c] - xhat * mean_dy_xhat[c]);
                        drow[i] = S::from_f64(v);
                    }
                }
            });
    }
    Ok((dinput, dgamma, dbeta))
}

/// Eval-mode input gradient (running statistics are constants):
/// dx = dy * gamma / sqrt(running_var + eps). Used by saliency backprop.
pub fn batchnorm_eval_input_grad<S: Scalar>(
    gamma: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: f64,
    output_grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    let d = dims(output_grad)?;
    if gamma.shape() != [d.channels] || running_var.shape() != [d.channels] {
        return Err(Error::shape("batchnorm_eval_input_grad: parameter shape mismatch".to_string()));
    }
    let scale: Vec<S> = gamma
        .data()
        .iter()
        .zip(running_var.data())
        .map(|(&g, &v)| S::from_f64(g.to_f64() / (v.to_f64() + eps).sqrt()))
        .collect();
    let mut out = Tensor::zeros(output_grad.shape());
    let stride = d.channels * d.spatial;
    for b in 0..d.batch {
        for c in 0..d.channels {
            let start = b * stride + c * d.spatial;
            for i in start..start + d.spatial {
                out.data_mut()[i] = output_grad.data()[i] * scale[c];
            }
        }
    }
    Ok(out)
}
