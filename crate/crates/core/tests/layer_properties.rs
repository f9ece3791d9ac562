//! Cross-checks of the layer implementations against independent reference
//! computations, plus property tests of the layer contracts.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sheetmatch_core::layers::{self, Conv2dSpec};
use sheetmatch_core::Tensor;

/// Reference convolution: literal quadruple loop over the output, written
/// independently of the library's direct/im2col code paths. Accumulates in
/// f64 regardless of the input precision.
fn naive_conv(
    input: &Tensor<f32>,
    kernels: &Tensor<f32>,
    bias: &Tensor<f32>,
    pad: (usize, usize),
    stride: (usize, usize),
) -> Tensor<f32> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, _, kh, kw) =
        (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2], kernels.shape()[3]);
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias.data()[o] as f64;
                for c in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = y as isize * stride.0 as isize + dy as isize - pad.0 as isize;
                            let ix = x as isize * stride.1 as isize + dx as isize - pad.1 as isize;
                            let iv = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                input.at3(c, iy as usize, ix as usize) as f64
                            } else {
                                0.0
                            };
                            let kv = kernels.data()[((o * c_in + c) * kh + dy) * kw + dx] as f64;
                            acc += iv * kv;
                        }
                    }
                }
                out.data_mut()[(o * oh + y) * ow + x] = acc as f32;
            }
        }
    }
    out
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn conv_matches_naive_oracle_on_spec_example() {
    // random 1x4x4 input, random 2x1x3x3 kernel, pad 1, stride 1
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = rand_tensor(&mut rng, &[1, 4, 4]);
    let kernels = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let bias = rand_tensor(&mut rng, &[2]);
    let got = layers::conv2d(&input, &kernels, &bias, Conv2dSpec::unit((1, 1))).unwrap();
    let want = naive_conv(&input, &kernels, &bias, (1, 1), (1, 1));
    assert_eq!(got.shape(), want.shape());
    for (g, w) in got.data().iter().zip(want.data()) {
        assert!((g - w).abs() < 1e-5, "{g} vs {w}");
    }
}

#[test]
fn conv_im2col_path_matches_naive_oracle() {
    // large enough that the im2col + GEMM path is taken
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = rand_tensor(&mut rng, &[4, 30, 40]);
    let kernels = rand_tensor(&mut rng, &[8, 4, 3, 3]);
    let bias = rand_tensor(&mut rng, &[8]);
    for spec in [Conv2dSpec::unit((1, 1)), Conv2dSpec::new((2, 2), (1, 2)), Conv2dSpec::new((0, 0), (2, 2))] {
        let got = layers::conv2d(&input, &kernels, &bias, spec).unwrap();
        let want = naive_conv(&input, &kernels, &bias, spec.pad, spec.stride);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-4, "{g} vs {w} at spec {spec:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_naive_oracle_on_random_instances(
        seed in 0u64..1u64 << 32,
        c_in in 1usize..4,
        c_out in 1usize..4,
        h in 3usize..8,
        w in 3usize..8,
        kh in 1usize..4,
        kw in 1usize..4,
        ph in 0usize..2,
        pw in 0usize..2,
    ) {
        prop_assume!(kh <= h + 2 * ph && kw <= w + 2 * pw);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rand_tensor(&mut rng, &[c_in, h, w]);
        let kernels = rand_tensor(&mut rng, &[c_out, c_in, kh, kw]);
        let bias = rand_tensor(&mut rng, &[c_out]);
        let spec = Conv2dSpec::unit((ph, pw));
        let got = layers::conv2d(&input, &kernels, &bias, spec).unwrap();
        let want = naive_conv(&input, &kernels, &bias, (ph, pw), (1, 1));
        for (g, v) in got.data().iter().zip(want.data()) {
            prop_assert!((g - v).abs() < 1e-5);
        }
    }

    #[test]
    fn maxpool_backward_hits_one_cell_per_window(seed in 0u64..1u64 << 32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rand_tensor(&mut rng, &[2, 6, 8]);
        let (out, argmax) = layers::maxpool2x2(&input).unwrap();
        let dout = Tensor::filled(out.shape(), 1.0f32);
        let dinput = layers::maxpool2x2_backward(input.shape(), &argmax, &dout).unwrap();
        // exactly one nonzero per 2x2 window
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let mut count = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            if dinput.at3(c, 2 * oy + dy, 2 * ox + dx) != 0.0 {
                                count += 1;
                            }
                        }
                    }
                    prop_assert_eq!(count, 1);
                }
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(seed in 0u64..1u64 << 32, n in 2usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_vec(&[n], (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
        let p = layers::softmax(&logits).unwrap();
        let sum: f32 = p.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        // open interval (0,1) in exact arithmetic; f32 saturates at extreme
        // logit gaps, so allow exactly 1.0 here
        for &v in p.data() {
            prop_assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn forward_backward_chain_stays_finite(seed in 0u64..1u64 << 32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rand_tensor(&mut rng, &[2, 8, 8]);
        let kernels = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        let bias = rand_tensor(&mut rng, &[4]);
        let spec = Conv2dSpec::unit((1, 1));
        let conv = layers::conv2d(&input, &kernels, &bias, spec).unwrap();
        let act = layers::relu(&conv);
        let (pooled, argmax) = layers::maxpool2x2(&act).unwrap();
        prop_assert!(pooled.all_finite());
        let dout = rand_tensor(&mut rng, pooled.shape());
        let dpool = layers::maxpool2x2_backward(act.shape(), &argmax, &dout).unwrap();
        let drelu = layers::relu_backward(&conv, &dpool).unwrap();
        let grads = layers::conv2d_backward(&input, &kernels, &bias, spec, &drelu).unwrap();
        prop_assert!(grads.input_grad.all_finite());
        prop_assert!(grads.param("weight").all_finite());
        prop_assert!(grads.param("bias").all_finite());
    }
}
