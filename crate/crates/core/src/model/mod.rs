//! The two-branch multi-modal network: a sheet-image branch and a
//! spectrogram branch, fused by concatenation into a dense head with a
//! B-way softmax over horizontal image buckets.
//!
//! Topology is fixed, so forward and backward are hand-chained. To keep the
//! training memory footprint down, only conv pre-activations, pool outputs
//! and dropout masks are cached; batchnorm/ReLU activations are recomputed
//! during the backward pass.

pub mod checkpoint;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, batchnorm_forward, conv2d_backward_batch, conv2d_batch, dense, dense_backward,
    dropout_backward, dropout_forward, maxpool2x2, maxpool2x2_backward, softmax_rows, BnCache,
    Conv2dSpec, DropoutMask, Mode,
};
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters. The baseline (`paper()`) follows the fixed
/// two-branch topology; width presets scale every channel count uniformly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_shape: (usize, usize),
    pub excerpt_shape: (usize, usize),
    pub num_buckets: usize,
    pub sheet_channels: [usize; 4],
    pub audio_channels: [usize; 4],
    pub dense_units: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Full-width baseline architecture.
    pub fn paper() -> Self {
        ModelConfig {
            image_shape: (40, 390),
            excerpt_shape: (136, 40),
            num_buckets: 40,
            sheet_channels: [64, 64, 128, 128],
            audio_channels: [64, 64, 96, 96],
            dense_units: 1024,
            conv_dropout: 0.15,
            dense_dropout: 0.3,
            bn_eps: 1e-5,
        }
    }

    /// Uniformly scale every channel width and the dense size.
    pub fn scale_widths(&self, factor: f64) -> Self {
        let s = |w: usize| ((w as f64 * factor).round() as usize).max(1);
        ModelConfig {
            sheet_channels: self.sheet_channels.map(s),
            audio_channels: self.audio_channels.map(s),
            dense_units: s(self.dense_units),
            ..self.clone()
        }
    }

    pub fn half_width() -> Self {
        Self::paper().scale_widths(0.5)
    }

    /// Narrow preset for memorization smoke tests (real input geometry).
    pub fn tiny_width() -> Self {
        Self::paper().scale_widths(0.125)
    }

    /// Miniature geometry for end-to-end gradient checking.
    pub fn tiny_gradcheck() -> Self {
        ModelConfig {
            image_shape: (12, 30),
            excerpt_shape: (16, 12),
            num_buckets: 4,
            sheet_channels: [2, 2, 4, 4],
            audio_channels: [2, 2, 3, 3],
            dense_units: 8,
            conv_dropout: 0.0,
            dense_dropout: 0.0,
            bn_eps: 1e-5,
        }
    }
}

/// One step of a convolutional branch.
#[derive(Clone, Copy, Debug)]
enum BranchOp {
    /// Conv + BN + ReLU block; `channel_idx` selects the output width.
    Conv { idx: usize, kernel: (usize, usize), spec: Conv2dSpec },
    /// 2x2 max pool followed by dropout.
    Pool,
}

fn sheet_ops() -> Vec<BranchOp> {
    vec![
        BranchOp::Conv { idx: 0, kernel: (5, 5), spec: Conv2dSpec::new((2, 2), (1, 2)) },
        BranchOp::Conv { idx: 1, kernel: (3, 3), spec: Conv2dSpec::unit((1, 1)) },
        BranchOp::Pool,
        BranchOp::Conv { idx: 2, kernel: (3, 3), spec: Conv2dSpec::unit((1, 1)) },
        BranchOp::Conv { idx: 3, kernel: (3, 3), spec: Conv2dSpec::unit((1, 1)) },
        BranchOp::Pool,
    ]
}

fn audio_ops() -> Vec<BranchOp> {
    vec![
        BranchOp::Conv { idx: 0, kernel: (3, 3), spec: Conv2dSpec::unit((1, 1)) },
        BranchOp::Conv { idx: 1, kernel: (3, 3), spec: Conv2dSpec::unit((1, 1)) },
        BranchOp::Pool,
        BranchOp::Conv { idx: 2, kernel: (3, 3), spec: Conv2dSpec::unit((1, 1)) },
        BranchOp::Pool,
        BranchOp::Conv { idx: 3, kernel: (3, 3), spec: Conv2dSpec::unit((1, 1)) },
        BranchOp::Pool,
    ]
}

/// Intermediate shapes of one branch, [C,H,W] per stage.
#[derive(Clone, Debug)]
pub struct BranchAudit {
    pub stages: Vec<(String, [usize; 3])>,
    pub flat_len: usize,
}

/// Construction-time shape audit of the whole network.
#[derive(Clone, Debug)]
pub struct ShapeAudit {
    pub sheet: BranchAudit,
    pub audio: BranchAudit,
    pub concat_len: usize,
    pub output_len: usize,
}

fn audit_branch(
    name: &str,
    ops: &[BranchOp],
    channels: &[usize; 4],
    input: [usize; 3],
) -> Result<BranchAudit> {
    let mut shape = input;
    let mut stages = vec![(format!("{name}.input"), shape)];
    let mut conv_no = 0;
    let mut pool_no = 0;
    for op in ops {
        match *op {
            BranchOp::Conv { idx, kernel, spec } => {
                conv_no += 1;
                let (h, w) = spec.out_dims(shape[1], shape[2], kernel.0, kernel.1)?;
                shape = [channels[idx], h, w];
                stages.push((format!("{name}.conv{conv_no}"), shape));
            }
            BranchOp::Pool => {
                pool_no += 1;
                if shape[1] < 2 || shape[2] < 2 {
                    return Err(Error::shape(format!(
                        "{name}.pool{pool_no}: input {shape:?} too small to pool"
                    )));
                }
                shape = [shape[0], shape[1] / 2, shape[2] / 2];
                stages.push((format!("{name}.pool{pool_no}"), shape));
            }
        }
    }
    let flat_len = shape[0] * shape[1] * shape[2];
    Ok(BranchAudit { stages, flat_len })
}

impl ModelConfig {
    /// Propagate shapes through both branches; fails on any inconsistency.
    pub fn audit(&self) -> Result<ShapeAudit> {
        if self.num_buckets < 2 {
            return Err(Error::invalid(format!("num_buckets = {} too small", self.num_buckets)));
        }
        let sheet = audit_branch(
            "sheet",
            &sheet_ops(),
            &self.sheet_channels,
            [1, self.image_shape.0, self.image_shape.1],
        )?;
        let audio = audit_branch(
            "audio",
            &audio_ops(),
            &self.audio_channels,
            [1, self.excerpt_shape.0, self.excerpt_shape.1],
        )?;
        Ok(ShapeAudit {
            sheet,
            audio,
            concat_len: 2 * self.dense_units,
            output_len: self.num_buckets,
        })
    }
}

/// Ordered name -> tensor map holding every kernel, bias, batchnorm
/// gamma/beta and running statistic of the network.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar = f32> {
    order: Vec<String>,
    map: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ModelParams<S> {
    fn default() -> Self {
        ModelParams { order: Vec::new(), map: HashMap::new() }
    }
}

impl<S: Scalar> ModelParams<S> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        if !self.map.contains_key(&name) {
            self.order.push(name.clone());
        }
        self.map.insert(name, t);
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown model parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown model parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.order.iter().map(move |n| (n.as_str(), &self.map[n]))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Running statistics are state, not weights.
    pub fn is_trainable(name: &str) -> bool {
        !name.contains("running_")
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.iter().filter(|(n, _)| Self::is_trainable(n))
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let mut out = ModelParams::default();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }
}

/// The network: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
}

fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| S::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn insert_bn<S: Scalar>(params: &mut ModelParams<S>, name: &str, channels: usize) {
    params.insert(format!("{name}.gamma"), Tensor::filled(&[channels], S::ONE));
    params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
    params.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
    params.insert(format!("{name}.running_var"), Tensor::filled(&[channels], S::ONE));
}

fn init_branch<S: Scalar>(
    rng: &mut ChaCha8Rng,
    params: &mut ModelParams<S>,
    name: &str,
    ops: &[BranchOp],
    channels: &[usize; 4],
    audit: &BranchAudit,
    dense_units: usize,
) {
    let mut in_ch = 1usize;
    let mut conv_no = 0;
    for op in ops {
        if let BranchOp::Conv { idx, kernel, .. } = *op {
            conv_no += 1;
            let out_ch = channels[idx];
            let fan_in = in_ch * kernel.0 * kernel.1;
            params.insert(
                format!("{name}.conv{conv_no}.weight"),
                uniform_init(rng, &[out_ch, in_ch, kernel.0, kernel.1], fan_in),
            );
            params.insert(format!("{name}.conv{conv_no}.bias"), Tensor::zeros(&[out_ch]));
            insert_bn(params, &format!("{name}.bn{conv_no}"), out_ch);
            in_ch = out_ch;
        }
    }
    params.insert(
        format!("{name}.dense.weight"),
        uniform_init(rng, &[dense_units, audit.flat_len], audit.flat_len),
    );
    params.insert(format!("{name}.dense.bias"), Tensor::zeros(&[dense_units]));
    insert_bn(params, &format!("{name}.bn_dense"), dense_units);
}

impl<S: Scalar> Model<S> {
    /// Initialize parameters: uniform weights scaled by sqrt(2/fan_in),
    /// zero biases, unit gamma, zero beta, unit running variance.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let audit = config.audit()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::default();
        init_branch(&mut rng, &mut params, "sheet", &sheet_ops(), &config.sheet_channels, &audit.sheet, config.dense_units);
        init_branch(&mut rng, &mut params, "audio", &audio_ops(), &config.audio_channels, &audit.audio, config.dense_units);
        let units = config.dense_units;
        params.insert("head.dense1.weight", uniform_init(&mut rng, &[units, 2 * units], 2 * units));
        params.insert("head.dense1.bias", Tensor::zeros(&[units]));
        insert_bn(&mut params, "head.bn1", units);
        params.insert("head.dense2.weight", uniform_init(&mut rng, &[units, units], units));
        params.insert("head.dense2.bias", Tensor::zeros(&[units]));
        insert_bn(&mut params, "head.bn2", units);
        params.insert(
            "head.out.weight",
            uniform_init(&mut rng, &[config.num_buckets, units], units),
        );
        params.insert("head.out.bias", Tensor::zeros(&[config.num_buckets]));
        Ok(Model { config, params })
    }

    /// Expected shape of every parameter, in construction order.
    pub fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let probe: Model<f32> = Model::init(config.clone(), 0)?;
        Ok(probe.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }
}

/// Cached state of one branch forward pass.
pub struct BranchCache<S: Scalar> {
    conv_outs: Vec<Tensor<S>>,
    bn_caches: Vec<Option<BnCache<S>>>,
    pool_outs: Vec<Tensor<S>>,
    pool_argmax: Vec<Vec<u32>>,
    pool_masks: Vec<DropoutMask>,
    dense_out: Tensor<S>,
    dense_bn_cache: Option<BnCache<S>>,
    dense_mask: DropoutMask,
    /// Branch output [N, units] after dense block dropout.
    output: Tensor<S>,
}

/// Everything backward needs from a forward pass.
pub struct ForwardCache<S: Scalar> {
    pub mode: Mode,
    batch: usize,
    sheet: BranchCache<S>,
    audio: BranchCache<S>,
    concat: Tensor<S>,
    head_dense_out: [Tensor<S>; 2],
    head_bn_caches: [Option<BnCache<S>>; 2],
    head_masks: [DropoutMask; 2],
    logits: Tensor<S>,
    /// Softmax output, [N, B].
    pub probs: Tensor<S>,
    /// Running-stat updates produced by train-mode batchnorm, to be
    /// committed by the caller after the optimizer step.
    pub running_updates: Vec<(String, Tensor<S>)>,
}

fn bn_relu<S: Scalar>(
    params: &ModelParams<S>,
    bn: &str,
    input: &Tensor<S>,
    mode: Mode,
    eps: f64,
    running_updates: &mut Vec<(String, Tensor<S>)>,
) -> Result<(Tensor<S>, Option<BnCache<S>>)> {
    let out = batchnorm_forward(
        input,
        params.get(&format!("{bn}.gamma")),
        params.get(&format!("{bn}.beta")),
        params.get(&format!("{bn}.running_mean")),
        params.get(&format!("{bn}.running_var")),
        mode,
        eps,
    )?;
    if mode == Mode::Train {
        running_updates.push((format!("{bn}.running_mean"), out.new_running_mean));
        running_updates.push((format!("{bn}.running_var"), out.new_running_var));
    }
    Ok((layers::relu(&out.output), out.cache))
}

#[allow(clippy::too_many_arguments)]
fn branch_forward<S: Scalar>(
    params: &ModelParams<S>,
    name: &str,
    ops: &[BranchOp],
    input: &Tensor<S>,
    mode: Mode,
    cfg: &ModelConfig,
    rng: &mut Option<&mut ChaCha8Rng>,
    running_updates: &mut Vec<(String, Tensor<S>)>,
) -> Result<BranchCache<S>> {
    let train = mode == Mode::Train;
    let mut conv_outs = Vec::new();
    let mut bn_caches = Vec::new();
    let mut pool_outs = Vec::new();
    let mut pool_argmax = Vec::new();
    let mut pool_masks = Vec::new();

    let mut current = input.clone();
    let mut conv_no = 0;
    for op in ops {
        match *op {
            BranchOp::Conv { kernel: _, spec, .. } => {
                conv_no += 1;
                let conv_out = conv2d_batch(
                    &current,
                    params.get(&format!("{name}.conv{conv_no}.weight")),
                    params.get(&format!("{name}.conv{conv_no}.bias")),
                    spec,
                )
                .map_err(|e| Error::shape(format!("{name}.conv{conv_no}: {e}")))?;
                let (act, cache) = bn_relu(
                    params,
                    &format!("{name}.bn{conv_no}"),
                    &conv_out,
                    mode,
                    cfg.bn_eps,
                    running_updates,
                )?;
                conv_outs.push(conv_out);
                bn_caches.push(cache);
                current = act;
            }
            BranchOp::Pool => {
                let (pooled, argmax) = maxpool2x2(&current)
                    .map_err(|e| Error::shape(format!("{name}.pool: {e}")))?;
                let (dropped, mask) = match rng {
                    Some(r) => dropout_forward(&pooled, cfg.conv_dropout, train, *r)?,
                    None => dropout_forward(&pooled, cfg.conv_dropout, false, &mut dummy_rng())?,
                };
                pool_outs.push(pooled);
                pool_argmax.push(argmax);
                pool_masks.push(mask);
                current = dropped;
            }
        }
    }

    // flatten [N,C,H,W] -> [N, C*H*W] (channel-major, then row, then column)
    let n = current.shape()[0];
    let flat: usize = current.shape()[1..].iter().product();
    let flat_in = current.reshape(&[n, flat])?;
    let dense_out = dense(
        &flat_in,
        params.get(&format!("{name}.dense.weight")),
        params.get(&format!("{name}.dense.bias")),
    )
    .map_err(|e| Error::shape(format!("{name}.dense: {e}")))?;
    let (act, dense_bn_cache) =
        bn_relu(params, &format!("{name}.bn_dense"), &dense_out, mode, cfg.bn_eps, running_updates)?;
    let (output, dense_mask) = match rng {
        Some(r) => dropout_forward(&act, cfg.dense_dropout, train, *r)?,
        None => dropout_forward(&act, cfg.dense_dropout, false, &mut dummy_rng())?,
    };

    Ok(BranchCache {
        conv_outs,
        bn_caches,
        pool_outs,
        pool_argmax,
        pool_masks,
        dense_out,
        dense_bn_cache,
        dense_mask,
        output,
    })
}

fn dummy_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl<S: Scalar> Model<S> {
    /// Batched forward pass. `images` is [N,1,H,W], `excerpts` [N,1,bins,frames].
    /// Train mode needs N >= 2 (batch statistics) and an rng for dropout.
    /// Dropout masks are drawn sheet branch first, then audio, then head.
    pub fn forward(
        &self,
        images: &Tensor<S>,
        excerpts: &Tensor<S>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache<S>> {
        let (ih, iw) = self.config.image_shape;
        let (eb, ef) = self.config.excerpt_shape;
        let n = match images.shape() {
            [n, 1, h, w] if *h == ih && *w == iw => *n,
            other => {
                return Err(Error::shape(format!(
                    "model input: images must be [N,1,{ih},{iw}], got {other:?}"
                )))
            }
        };
        match excerpts.shape() {
            [m, 1, b, f] if *m == n && *b == eb && *f == ef => {}
            other => {
                return Err(Error::shape(format!(
                    "model input: excerpts must be [{n},1,{eb},{ef}], got {other:?}"
                )))
            }
        }
        if mode == Mode::Train && rng.is_none() && (self.config.conv_dropout > 0.0 || self.config.dense_dropout > 0.0) {
            return Err(Error::invalid("train-mode forward needs an rng for dropout"));
        }

        let mut running_updates = Vec::new();
        let sheet = branch_forward(
            &self.params,
            "sheet",
            &sheet_ops(),
            images,
            mode,
            &self.config,
            &mut rng,
            &mut running_updates,
        )?;
        let audio = branch_forward(
            &self.params,
            "audio",
            &audio_ops(),
            excerpts,
            mode,
            &self.config,
            &mut rng,
            &mut running_updates,
        )?;

        // concatenation layer: pure join, no parameters
        let units = self.config.dense_units;
        let mut concat = Tensor::zeros(&[n, 2 * units]);
        for i in 0..n {
            concat.data_mut()[i * 2 * units..i * 2 * units + units]
                .copy_from_slice(&sheet.output.data()[i * units..(i + 1) * units]);
            concat.data_mut()[i * 2 * units + units..(i + 1) * 2 * units]
                .copy_from_slice(&audio.output.data()[i * units..(i + 1) * units]);
        }

        let mut current = concat.clone();
        let mut head_dense_out = Vec::new();
        let mut head_bn_caches = Vec::new();
        let mut head_masks = Vec::new();
        for layer in 1..=2 {
            let d = dense(
                &current,
                self.params.get(&format!("head.dense{layer}.weight")),
                self.params.get(&format!("head.dense{layer}.bias")),
            )
            .map_err(|e| Error::shape(format!("head.dense{layer}: {e}")))?;
            let (act, cache) = bn_relu(
                &self.params,
                &format!("head.bn{layer}"),
                &d,
                mode,
                self.config.bn_eps,
                &mut running_updates,
            )?;
            let (dropped, mask) = match &mut rng {
                Some(r) => dropout_forward(&act, self.config.dense_dropout, mode == Mode::Train, *r)?,
                None => dropout_forward(&act, self.config.dense_dropout, false, &mut dummy_rng())?,
            };
            head_dense_out.push(d);
            head_bn_caches.push(cache);
            head_masks.push(mask);
            current = dropped;
        }

        let logits = dense(
            &current,
            self.params.get("head.out.weight"),
            self.params.get("head.out.bias"),
        )
        .map_err(|e| Error::shape(format!("head.out: {e}")))?;
        let probs = softmax_rows(&logits)?;

        let [d1, d2] = <[Tensor<S>; 2]>::try_from(head_dense_out).unwrap();
        let [c1, c2] = <[Option<BnCache<S>>; 2]>::try_from(head_bn_caches).unwrap();
        let [m1, m2] = <[DropoutMask; 2]>::try_from(head_masks).unwrap();
        Ok(ForwardCache {
            mode,
            batch: n,
            sheet,
            audio,
            concat,
            head_dense_out: [d1, d2],
            head_bn_caches: [c1, c2],
            head_masks: [m1, m2],
            logits,
            probs,
            running_updates,
        })
    }

    /// Single-example eval helper: image [1,H,W], excerpt [1,bins,frames],
    /// returns probabilities [B].
    pub fn forward_single(&self, image: &Tensor<S>, excerpt: &Tensor<S>) -> Result<Tensor<S>> {
        let (ih, iw) = self.config.image_shape;
        let (eb, ef) = self.config.excerpt_shape;
        let images = Tensor::from_vec(&[1, 1, ih, iw], image.data().to_vec())
            .map_err(|_| Error::shape(format!("image shape {:?}", image.shape())))?;
        let excerpts = Tensor::from_vec(&[1, 1, eb, ef], excerpt.data().to_vec())
            .map_err(|_| Error::shape(format!("excerpt shape {:?}", excerpt.shape())))?;
        let cache = self.forward(&images, &excerpts, Mode::Eval, None)?;
        cache.probs.reshape(&[self.config.num_buckets])
    }

    /// Commit the running-statistic updates of a train-mode forward.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache<S>) {
        for (name, value) in &cache.running_updates {
            *self.params.get_mut(name) = value.clone();
        }
    }
}

/// Gradients keyed by parameter name (trainable parameters only).
pub type GradMap<S> = HashMap<String, Tensor<S>>;

/// Recompute BN + ReLU output of a cached conv block (train mode).
fn recompute_act<S: Scalar>(
    params: &ModelParams<S>,
    bn: &str,
    conv_out: &Tensor<S>,
    cache: &BnCache<S>,
) -> Tensor<S> {
    let gamma = params.get(&format!("{bn}.gamma"));
    let beta = params.get(&format!("{bn}.beta"));
    let shape = conv_out.shape();
    let (channels, spatial) = match shape {
        [_, c] => (*c, 1),
        [_, c, h, w] => (*c, h * w),
        _ => unreachable!("bn tensors are rank 2 or 4"),
    };
    let stride = channels * spatial;
    let mut out = Tensor::zeros(shape);
    let src = conv_out.data();
    let dst = out.data_mut();
    for b in 0..shape[0] {
        for c in 0..channels {
            let g = gamma.data()[c];
            let bt = beta.data()[c];
            let mu = cache.mean[c];
            let is = cache.inv_std[c];
            let start = b * stride + c * spatial;
            for i in start..start + spatial {
                let v = g * (src[i] - mu) * is + bt;
                dst[i] = v.max(S::ZERO);
            }
        }
    }
    out
}

/// ReLU-backward through a recomputed BN activation: grad masked where
/// gamma*xhat+beta <= 0, then batchnorm backward.
fn conv_block_backward<S: Scalar>(
    params: &ModelParams<S>,
    name: &str,
    conv_no: usize,
    conv_in: &Tensor<S>,
    conv_out: &Tensor<S>,
    bn_cache: &BnCache<S>,
    spec: Conv2dSpec,
    dout_act: &Tensor<S>,
    grads: &mut GradMap<S>,
) -> Result<Tensor<S>> {
    let bn = format!("{name}.bn{conv_no}");
    let act = recompute_act(params, &bn, conv_out, bn_cache);
    let d_bn_out = masked_grad(&act, dout_act);
    let (d_conv_out, dgamma, dbeta) =
        layers::batchnorm_backward(conv_out, params.get(&format!("{bn}.gamma")), bn_cache, &d_bn_out)?;
    grads.insert(format!("{bn}.gamma"), dgamma);
    grads.insert(format!("{bn}.beta"), dbeta);
    let conv = format!("{name}.conv{conv_no}");
    let g = conv2d_backward_batch(
        conv_in,
        params.get(&format!("{conv}.weight")),
        params.get(&format!("{conv}.bias")),
        spec,
        &d_conv_out,
    )?;
    let mut g = g;
    grads.insert(format!("{conv}.weight"), g.param_grads.remove("weight").unwrap());
    grads.insert(format!("{conv}.bias"), g.param_grads.remove("bias").unwrap());
    Ok(g.input_grad)
}

/// Zero the gradient wherever the activation was clamped to zero.
fn masked_grad<S: Scalar>(act: &Tensor<S>, grad: &Tensor<S>) -> Tensor<S> {
    let data = act
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&a, &g)| if a > S::ZERO { g } else { S::ZERO })
        .collect();
    Tensor::from_vec(act.shape(), data).unwrap()
}

fn branch_backward<S: Scalar>(
    params: &ModelParams<S>,
    name: &str,
    ops: &[BranchOp],
    input: &Tensor<S>,
    cache: &BranchCache<S>,
    dout: &Tensor<S>,
    cfg: &ModelConfig,
    grads: &mut GradMap<S>,
) -> Result<()> {
    // dense block backward
    let bn = format!("{name}.bn_dense");
    let dense_bn_cache = cache
        .dense_bn_cache
        .as_ref()
        .ok_or_else(|| Error::invalid("backward requires a train-mode forward cache"))?;
    let d_act = dropout_backward(&cache.dense_mask, dout)?;
    let act = recompute_act(params, &bn, &cache.dense_out, dense_bn_cache);
    let d_dense_out = masked_grad(&act, &d_act);
    let (d_dense, dgamma, dbeta) = layers::batchnorm_backward(
        &cache.dense_out,
        params.get(&format!("{bn}.gamma")),
        dense_bn_cache,
        &d_dense_out,
    )?;
    grads.insert(format!("{bn}.gamma"), dgamma);
    grads.insert(format!("{bn}.beta"), dbeta);

    // dense input = flattened final pool output after dropout
    let last_pool = cache.pool_outs.last().expect("branches end with a pool");
    let last_mask = cache.pool_masks.last().unwrap();
    let n = last_pool.shape()[0];
    let flat: usize = last_pool.shape()[1..].iter().product();
    let flat_in = {
        let (dropped, _) = apply_mask(last_pool, last_mask);
        dropped.reshape(&[n, flat])?
    };
    let g = dense_backward(&flat_in, params.get(&format!("{name}.dense.weight")), &d_dense)?;
    let mut g = g;
    grads.insert(format!("{name}.dense.weight"), g.param_grads.remove("weight").unwrap());
    grads.insert(format!("{name}.dense.bias"), g.param_grads.remove("bias").unwrap());
    let mut current_grad = g.input_grad.reshape(last_pool.shape())?;

    // walk the conv/pool ops backwards
    let mut conv_no = ops.iter().filter(|o| matches!(o, BranchOp::Conv { .. })).count();
    let mut pool_no = cache.pool_outs.len();
    for (op_idx, op) in ops.iter().enumerate().rev() {
        match *op {
            BranchOp::Pool => {
                pool_no -= 1;
                // dropout backward, then unpool onto the pre-pool activation
                let d_pool_out = dropout_backward(&cache.pool_masks[pool_no], &current_grad)?;
                let pre_pool_shape = stage_output_shape(cache, ops, op_idx, input);
                current_grad = maxpool2x2_backward(
                    &pre_pool_shape,
                    &cache.pool_argmax[pool_no],
                    &d_pool_out,
                )?;
            }
            BranchOp::Conv { spec, .. } => {
                let conv_in = stage_input(params, name, cache, ops, op_idx, input);
                let d_in = conv_block_backward(
                    params,
                    name,
                    conv_no,
                    &conv_in,
                    &cache.conv_outs[conv_no - 1],
                    cache.bn_caches[conv_no - 1]
                        .as_ref()
                        .ok_or_else(|| Error::invalid("backward requires train-mode bn caches"))?,
                    spec,
                    &current_grad,
                    grads,
                )?;
                current_grad = d_in;
                conv_no -= 1;
            }
        }
    }
    Ok(())
}

fn apply_mask<S: Scalar>(t: &Tensor<S>, mask: &DropoutMask) -> (Tensor<S>, ()) {
    if mask.rate == 0.0 {
        return (t.clone(), ());
    }
    let scale = mask.scale::<S>();
    let data = t
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| if k { v * scale } else { S::ZERO })
        .collect();
    (Tensor::from_vec(t.shape(), data).unwrap(), ())
}

/// Shape of the activation feeding op `op_idx`.
fn stage_output_shape<S: Scalar>(
    cache: &BranchCache<S>,
    ops: &[BranchOp],
    op_idx: usize,
    input: &Tensor<S>,
) -> Vec<usize> {
    if op_idx == 0 {
        return input.shape().to_vec();
    }
    let mut conv_no = 0;
    let mut pool_no = 0;
    for op in &ops[..op_idx] {
        match op {
            BranchOp::Conv { .. } => conv_no += 1,
            BranchOp::Pool => pool_no += 1,
        }
    }
    match ops[op_idx - 1] {
        BranchOp::Conv { .. } => cache.conv_outs[conv_no - 1].shape().to_vec(),
        BranchOp::Pool => cache.pool_outs[pool_no - 1].shape().to_vec(),
    }
}

/// Recompute the tensor feeding op `op_idx` from the cached artifacts.
fn stage_input<S: Scalar>(
    params: &ModelParams<S>,
    name: &str,
    cache: &BranchCache<S>,
    ops: &[BranchOp],
    op_idx: usize,
    input: &Tensor<S>,
) -> Tensor<S> {
    if op_idx == 0 {
        return input.clone();
    }
    let mut conv_no = 0;
    let mut pool_no = 0;
    for op in &ops[..op_idx] {
        match op {
            BranchOp::Conv { .. } => conv_no += 1,
            BranchOp::Pool => pool_no += 1,
        }
    }
    match ops[op_idx - 1] {
        BranchOp::Conv { .. } => {
            let bn = format!("{name}.bn{conv_no}");
            recompute_act(
                params,
                &bn,
                &cache.conv_outs[conv_no - 1],
                cache.bn_caches[conv_no - 1].as_ref().expect("train cache"),
            )
        }
        BranchOp::Pool => apply_mask(&cache.pool_outs[pool_no - 1], &cache.pool_masks[pool_no - 1]).0,
    }
}

impl<S: Scalar> Model<S> {
    /// Backward pass from a train-mode forward cache. Returns the mean CCE
    /// loss over the batch and gradients for every trainable parameter.
    pub fn backward(
        &self,
        images: &Tensor<S>,
        excerpts: &Tensor<S>,
        cache: &ForwardCache<S>,
        targets: &Tensor<S>,
    ) -> Result<(f64, GradMap<S>)> {
        let n = cache.batch;
        let b = self.config.num_buckets;
        if targets.shape() != [n, b] {
            return Err(Error::shape(format!(
                "targets must be [{n}, {b}], got {:?}",
                targets.shape()
            )));
        }
        if cache.mode != Mode::Train {
            return Err(Error::invalid("backward requires a train-mode forward cache"));
        }

        // mean CCE loss and its logit gradient (p - t) / N
        let mut loss = 0.0f64;
        let mut dlogits = Tensor::zeros(&[n, b]);
        for i in 0..n {
            let p = Tensor::from_vec(&[b], cache.probs.data()[i * b..(i + 1) * b].to_vec())?;
            let t = Tensor::from_vec(&[b], targets.data()[i * b..(i + 1) * b].to_vec())?;
            let (l, g) = layers::cce_loss(&p, &t)?;
            loss += l.to_f64();
            for (j, &v) in g.data().iter().enumerate() {
                dlogits.data_mut()[i * b + j] = v / S::from_f64(n as f64);
            }
        }
        loss /= n as f64;

        let mut grads: GradMap<S> = HashMap::new();

        // output layer
        let head_in2 = {
            let act = recompute_act(
                &self.params,
                "head.bn2",
                &cache.head_dense_out[1],
                cache.head_bn_caches[1].as_ref().unwrap(),
            );
            apply_mask(&act, &cache.head_masks[1]).0
        };
        let g = dense_backward(&head_in2, self.params.get("head.out.weight"), &dlogits)?;
        let mut g = g;
        grads.insert("head.out.weight".into(), g.param_grads.remove("weight").unwrap());
        grads.insert("head.out.bias".into(), g.param_grads.remove("bias").unwrap());
        let mut current = g.input_grad;

        // two dense head blocks, in reverse
        for layer in (1..=2).rev() {
            let bn = format!("head.bn{layer}");
            let bn_cache = cache.head_bn_caches[layer - 1].as_ref().unwrap();
            let d_act = dropout_backward(&cache.head_masks[layer - 1], &current)?;
            let act = recompute_act(&self.params, &bn, &cache.head_dense_out[layer - 1], bn_cache);
            let d_dense_out = masked_grad(&act, &d_act);
            let (d_dense, dgamma, dbeta) = layers::batchnorm_backward(
                &cache.head_dense_out[layer - 1],
                self.params.get(&format!("{bn}.gamma")),
                bn_cache,
                &d_dense_out,
            )?;
            grads.insert(format!("{bn}.gamma"), dgamma);
            grads.insert(format!("{bn}.beta"), dbeta);
            let layer_in = if layer == 2 {
                let act = recompute_act(
                    &self.params,
                    "head.bn1",
                    &cache.head_dense_out[0],
                    cache.head_bn_caches[0].as_ref().unwrap(),
                );
                apply_mask(&act, &cache.head_masks[0]).0
            } else {
                cache.concat.clone()
            };
            let g = dense_backward(
                &layer_in,
                self.params.get(&format!("head.dense{layer}.weight")),
                &d_dense,
            )?;
            let mut g = g;
            grads.insert(format!("head.dense{layer}.weight"), g.param_grads.remove("weight").unwrap());
            grads.insert(format!("head.dense{layer}.bias"), g.param_grads.remove("bias").unwrap());
            current = g.input_grad;
        }

        // split the concat gradient back onto the two branches
        let units = self.config.dense_units;
        let mut d_sheet = Tensor::zeros(&[n, units]);
        let mut d_audio = Tensor::zeros(&[n, units]);
        for i in 0..n {
            d_sheet.data_mut()[i * units..(i + 1) * units]
                .copy_from_slice(&current.data()[i * 2 * units..i * 2 * units + units]);
            d_audio.data_mut()[i * units..(i + 1) * units]
                .copy_from_slice(&current.data()[i * 2 * units + units..(i + 1) * 2 * units]);
        }
        branch_backward(&self.params, "sheet", &sheet_ops(), images, &cache.sheet, &d_sheet, &self.config, &mut grads)?;
        branch_backward(&self.params, "audio", &audio_ops(), excerpts, &cache.audio, &d_audio, &self.config, &mut grads)?;

        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_reproduces_table_shapes() {
        let audit = ModelConfig::paper().audit().unwrap();
        let sheet: Vec<[usize; 3]> = audit.sheet.stages.iter().map(|(_, s)| *s).collect();
        assert_eq!(
            sheet,
            vec![
                [1, 40, 390],
                [64, 40, 195],
                [64, 40, 195],
                [64, 20, 97],
                [128, 20, 97],
                [128, 20, 97],
                [128, 10, 48],
            ]
        );
        let audio: Vec<[usize; 3]> = audit.audio.stages.iter().map(|(_, s)| *s).collect();
        assert_eq!(
            audio,
            vec![
                [1, 136, 40],
                [64, 136, 40],
                [64, 136, 40],
                [64, 68, 20],
                [96, 68, 20],
                [96, 34, 10],
                [96, 34, 10],
                [96, 17, 5],
            ]
        );
        assert_eq!(audit.sheet.flat_len, 61_440);
        assert_eq!(audit.audio.flat_len, 8_160);
        assert_eq!(audit.concat_len, 2_048);
        assert_eq!(audit.output_len, 40);
    }

    #[test]
    fn init_is_deterministic_and_well_scaled() {
        let cfg = ModelConfig::tiny_gradcheck();
        let a: Model<f32> = Model::init(cfg.clone(), 7).unwrap();
        let b: Model<f32> = Model::init(cfg, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        // gammas exactly 1
        for (n, t) in a.params.iter() {
            if n.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn kernel_init_std_matches_uniform_he_scale() {
        // a 64x64x3x3 kernel drawn from U(-a, a), a = sqrt(2/576):
        // std should be a/sqrt(3) within 10%
        let mut cfg = ModelConfig::paper();
        cfg.sheet_channels = [64, 64, 64, 64];
        let model: Model<f32> = Model::init(cfg, 3).unwrap();
        let kernel = model.params.get("sheet.conv2.weight");
        assert_eq!(kernel.shape(), &[64, 64, 3, 3]);
        let (_, var) = kernel.mean_var();
        let want = (2.0f64 / 576.0).sqrt() / 3.0f64.sqrt();
        let got = var.sqrt();
        assert!((got - want).abs() / want < 0.10, "std {got} vs {want}");
    }

    #[test]
    fn trainable_count_ignores_dropout_rates() {
        let a = ModelConfig::tiny_gradcheck();
        let mut b = a.clone();
        b.conv_dropout = 0.4;
        b.dense_dropout = 0.1;
        let ma: Model<f32> = Model::init(a, 1).unwrap();
        let mb: Model<f32> = Model::init(b, 1).unwrap();
        assert_eq!(ma.params.num_trainable_values(), mb.params.num_trainable_values());
    }

    #[test]
    fn eval_forward_is_deterministic_and_normalized() {
        let cfg = ModelConfig::tiny_gradcheck();
        let model: Model<f32> = Model::init(cfg.clone(), 11).unwrap();
        let images = Tensor::filled(&[3, 1, cfg.image_shape.0, cfg.image_shape.1], 0.3f32);
        let excerpts = Tensor::filled(&[3, 1, cfg.excerpt_shape.0, cfg.excerpt_shape.1], 0.1f32);
        let a = model.forward(&images, &excerpts, Mode::Eval, None).unwrap();
        let b = model.forward(&images, &excerpts, Mode::Eval, None).unwrap();
        assert_eq!(a.probs.data(), b.probs.data());
        for i in 0..3 {
            let row = &a.probs.data()[i * 4..(i + 1) * 4];
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_batch_permutes_eval_outputs() {
        let cfg = ModelConfig::tiny_gradcheck();
        let model: Model<f32> = Model::init(cfg.clone(), 13).unwrap();
        let (ih, iw) = cfg.image_shape;
        let (eb, ef) = cfg.excerpt_shape;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let len: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
        };
        let images = mk(&mut rng, &[2, 1, ih, iw]);
        let excerpts = mk(&mut rng, &[2, 1, eb, ef]);
        let fwd = model.forward(&images, &excerpts, Mode::Eval, None).unwrap();

        // swap the two examples
        let swap = |t: &Tensor<f32>| {
            let half = t.len() / 2;
            let mut data = t.data()[half..].to_vec();
            data.extend_from_slice(&t.data()[..half]);
            Tensor::from_vec(t.shape(), data).unwrap()
        };
        let fwd2 = model
            .forward(&swap(&images), &swap(&excerpts), Mode::Eval, None)
            .unwrap();
        let b = cfg.num_buckets;
        assert_eq!(&fwd.probs.data()[0..b], &fwd2.probs.data()[b..2 * b]);
        assert_eq!(&fwd.probs.data()[b..2 * b], &fwd2.probs.data()[0..b]);
    }

    #[test]
    fn shape_mismatch_names_the_seam() {
        let cfg = ModelConfig::tiny_gradcheck();
        let model: Model<f32> = Model::init(cfg, 1).unwrap();
        let images = Tensor::<f32>::zeros(&[2, 1, 12, 31]); // wrong width
        let excerpts = Tensor::<f32>::zeros(&[2, 1, 16, 12]);
        let err = match model.forward(&images, &excerpts, Mode::Eval, None) {
            Err(e) => e,
            Ok(_) => panic!("expected a shape error"),
        };
        assert!(err.to_string().contains("images"), "{err}");
    }

    #[test]
    fn softmax_cce_head_gradient_is_p_minus_t() {
        // mean loss over batch of 2: dlogits = (p - t)/2 shows up at head.out.bias
        let cfg = ModelConfig::tiny_gradcheck();
        let model: Model<f64> = Model::<f32>::init(cfg.clone(), 21).unwrap().cast();
        let (ih, iw) = cfg.image_shape;
        let (eb, ef) = cfg.excerpt_shape;
        let images = Tensor::filled(&[2, 1, ih, iw], 0.5f64);
        let excerpts = Tensor::filled(&[2, 1, eb, ef], 0.2f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = model.forward(&images, &excerpts, Mode::Train, Some(&mut rng)).unwrap();
        let mut targets = Tensor::zeros(&[2, 4]);
        targets.data_mut()[0] = 1.0;
        targets.data_mut()[4 + 2] = 1.0;
        let (_, grads) = model.backward(&images, &excerpts, &cache, &targets).unwrap();
        // bias gradient of the output layer = sum over batch of dlogits
        let dbias = &grads["head.out.bias"];
        for j in 0..4 {
            let want: f64 = (0..2)
                .map(|i| (cache.probs.data()[i * 4 + j] - targets.data()[i * 4 + j]) / 2.0)
                .sum();
            assert!((dbias.data()[j] - want).abs() < 1e-12);
        }
    }
}
