//! Central finite-difference gradient checking for every layer.
//!
//! All checks run in f64 with h = 1e-5; the analytic backward passes are the
//! code under test, the numeric side only ever calls the forward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{self, Conv2dSpec, DropoutMask, Mode};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Per-layer tolerance on the max relative error.
pub const LAYER_TOL: f64 = 1e-4;
/// End-to-end tolerance for the full tiny-config model.
pub const MODEL_TOL: f64 = 1e-3;

/// Central finite differences of a scalar-valued function at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Max over elements of |a-n| / max(|a|, |n|, 1e-6).
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Fixed random projection so a tensor-valued layer output becomes a scalar
/// loss with a dense, well-scaled gradient.
fn proj_loss(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(&o, &w)| o * w).sum()
}

/// Run the per-layer finite-difference suite. Deterministic for a fixed seed.
pub fn layer_suite(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // conv2d: strided + padded configuration, gradients for input/weight/bias.
    {
        let input = rand_tensor(&mut rng, &[2, 6, 9], -1.0, 1.0);
        let kernels = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let spec = Conv2dSpec::new((1, 1), (1, 2));
        let out = layers::conv2d(&input, &kernels, &bias, spec).unwrap();
        let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
        let analytic = layers::conv2d_backward(&input, &kernels, &bias, spec, &w).unwrap();
        for (name, target, grad) in [
            ("conv2d/input", &input, &analytic.input_grad),
            ("conv2d/weight", &kernels, analytic.param("weight")),
            ("conv2d/bias", &bias, analytic.param("bias")),
        ] {
            let numeric = match name {
                "conv2d/input" => numeric_gradient(
                    |x| proj_loss(&layers::conv2d(x, &kernels, &bias, spec).unwrap(), &w),
                    target,
                    FD_STEP,
                ),
                "conv2d/weight" => numeric_gradient(
                    |k| proj_loss(&layers::conv2d(&input, k, &bias, spec).unwrap(), &w),
                    target,
                    FD_STEP,
                ),
                _ => numeric_gradient(
                    |b| proj_loss(&layers::conv2d(&input, &kernels, b, spec).unwrap(), &w),
                    target,
                    FD_STEP,
                ),
            };
            results.push(CheckResult {
                name: name.to_string(),
                max_rel_err: max_rel_error(grad, &numeric),
                tolerance: LAYER_TOL,
            });
        }
    }

    // dense 8 -> 4
    {
        let input = rand_tensor(&mut rng, &[8], -1.0, 1.0);
        let weights = rand_tensor(&mut rng, &[4, 8], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        let w = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let analytic = layers::dense_backward(&input, &weights, &w).unwrap();
        let checks: [(&str, &Tensor<f64>, &Tensor<f64>); 3] = [
            ("dense/input", &input, &analytic.input_grad),
            ("dense/weight", &weights, analytic.param("weight")),
            ("dense/bias", &bias, analytic.param("bias")),
        ];
        for (name, _, grad) in checks {
            let numeric = match name {
                "dense/input" => numeric_gradient(
                    |x| proj_loss(&layers::dense(x, &weights, &bias).unwrap(), &w),
                    &input,
                    FD_STEP,
                ),
                "dense/weight" => numeric_gradient(
                    |wt| proj_loss(&layers::dense(&input, wt, &bias).unwrap(), &w),
                    &weights,
                    FD_STEP,
                ),
                _ => numeric_gradient(
                    |b| proj_loss(&layers::dense(&input, &weights, b).unwrap(), &w),
                    &bias,
                    FD_STEP,
                ),
            };
            results.push(CheckResult {
                name: name.to_string(),
                max_rel_err: max_rel_error(grad, &numeric),
                tolerance: LAYER_TOL,
            });
        }
    }

    // batchnorm over [B,C,H,W], train mode
    {
        let input = rand_tensor(&mut rng, &[4, 3, 2, 3], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let rm = Tensor::zeros(&[3]);
        let rv = Tensor::filled(&[3], 1.0);
        let eps = 1e-5;
        let fwd = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            layers::batchnorm_forward(x, g, b, &rm, &rv, Mode::Train, eps).unwrap().output
        };
        let out = fwd(&input, &gamma, &beta);
        let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
        let bn = layers::batchnorm_forward(&input, &gamma, &beta, &rm, &rv, Mode::Train, eps).unwrap();
        let (dinput, dgamma, dbeta) =
            layers::batchnorm_backward(&input, &gamma, bn.cache.as_ref().unwrap(), &w).unwrap();
        let n_input = numeric_gradient(|x| proj_loss(&fwd(x, &gamma, &beta), &w), &input, FD_STEP);
        let n_gamma = numeric_gradient(|g| proj_loss(&fwd(&input, g, &beta), &w), &gamma, FD_STEP);
        let n_beta = numeric_gradient(|b| proj_loss(&fwd(&input, &gamma, b), &w), &beta, FD_STEP);
        results.push(CheckResult {
            name: "batchnorm/input".into(),
            max_rel_err: max_rel_error(&dinput, &n_input),
            tolerance: LAYER_TOL,
        });
        results.push(CheckResult {
            name: "batchnorm/gamma".into(),
            max_rel_err: max_rel_error(&dgamma, &n_gamma),
            tolerance: LAYER_TOL,
        });
        results.push(CheckResult {
            name: "batchnorm/beta".into(),
            max_rel_err: max_rel_error(&dbeta, &n_beta),
            tolerance: LAYER_TOL,
        });
    }

    // relu on mixed-sign input away from the kink
    {
        let mut input = rand_tensor(&mut rng, &[40], -1.0, 1.0);
        for v in input.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.1;
            }
        }
        let w = rand_tensor(&mut rng, &[40], -1.0, 1.0);
        let analytic = layers::relu_backward(&input, &w).unwrap();
        let numeric = numeric_gradient(|x| proj_loss(&layers::relu(x), &w), &input, FD_STEP);
        results.push(CheckResult {
            name: "relu/input".into(),
            max_rel_err: max_rel_error(&analytic, &numeric),
            tolerance: LAYER_TOL,
        });
    }

    // maxpool: distinct values so the argmax is stable under perturbation
    {
        let mut input = Tensor::<f64>::zeros(&[2, 4, 6]);
        let mut vals: Vec<f64> = (0..input.len()).map(|i| i as f64 * 0.37).collect();
        // deterministic shuffle for spread-out maxima
        for i in (1..vals.len()).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        input.data_mut().copy_from_slice(&vals);
        let (out, argmax) = layers::maxpool2x2(&input).unwrap();
        let w = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
        let analytic = layers::maxpool2x2_backward(input.shape(), &argmax, &w).unwrap();
        let numeric = numeric_gradient(
            |x| proj_loss(&layers::maxpool2x2(x).unwrap().0, &w),
            &input,
            FD_STEP,
        );
        results.push(CheckResult {
            name: "maxpool2x2/input".into(),
            max_rel_err: max_rel_error(&analytic, &numeric),
            tolerance: LAYER_TOL,
        });
    }

    // softmax + cce against logits (grad = p - t)
    {
        let logits = rand_tensor(&mut rng, &[10], -2.0, 2.0);
        let mut target = Tensor::<f64>::zeros(&[10]);
        target.data_mut()[3] = 0.4;
        target.data_mut()[4] = 0.6;
        let p = layers::softmax(&logits).unwrap();
        let (_, analytic) = layers::cce_loss(&p, &target).unwrap();
        let numeric = numeric_gradient(
            |l| {
                let p = layers::softmax(l).unwrap();
                layers::cce_loss(&p, &target).unwrap().0
            },
            &logits,
            FD_STEP,
        );
        results.push(CheckResult {
            name: "softmax_cce/logits".into(),
            max_rel_err: max_rel_error(&analytic, &numeric),
            tolerance: LAYER_TOL,
        });
    }

    // dropout with a frozen mask (the mask is part of the function being
    // differentiated, so it must not be resampled between evaluations)
    {
        let input = rand_tensor(&mut rng, &[50], -1.0, 1.0);
        let keep: Vec<bool> = (0..50).map(|_| rng.gen::<f64>() >= 0.3).collect();
        let mask = DropoutMask { keep, rate: 0.3 };
        let w = rand_tensor(&mut rng, &[50], -1.0, 1.0);
        let apply = |x: &Tensor<f64>| {
            let scale = mask.scale::<f64>();
            let data: Vec<f64> = x
                .data()
                .iter()
                .zip(&mask.keep)
                .map(|(&v, &k)| if k { v * scale } else { 0.0 })
                .collect();
            Tensor::from_vec(x.shape(), data).unwrap()
        };
        let analytic = layers::dropout_backward(&mask, &w).unwrap();
        let numeric = numeric_gradient(|x| proj_loss(&apply(x), &w), &input, FD_STEP);
        results.push(CheckResult {
            name: "dropout/input".into(),
            max_rel_err: max_rel_error(&analytic, &numeric),
            tolerance: LAYER_TOL,
        });
    }

    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_finite_difference_check() {
        for r in layer_suite(1234) {
            assert!(
                r.passed(),
                "{} failed gradient check: max rel err {:.3e} (tol {:.0e})",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }

    #[test]
    fn rel_error_metric_flags_wrong_gradient() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0f64, 2.5]).unwrap();
        assert!(max_rel_error(&a, &b) > 0.1);
        assert_eq!(max_rel_error(&a, &a), 0.0);
    }
}
