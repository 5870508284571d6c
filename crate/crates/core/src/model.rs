//! The four-block CNN: `[batch norm → conv → ReLU → 2x2 max pool] x4`, then
//! three dropout + dense layers (sigmoid, sigmoid, softmax).

use std::fmt::Write as _;

use crate::error::{FerError, Result};
use crate::label::{EmotionLabel, NUM_CLASSES};
use crate::nn::{self, BatchNormCache, BatchNormStats, DropoutMask, Mode, PoolIndices};
use crate::optim::{Parameter, Sgd};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

pub const INPUT_SIZE: usize = 48;
pub const NUM_BLOCKS: usize = 4;
pub const NUM_DENSE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct FerConfig {
    /// Side length of the square grayscale input.
    pub input_size: usize,
    /// Odd convolution kernel side length, shared by all blocks.
    pub kernel_size: usize,
    pub conv_channels: [usize; NUM_BLOCKS],
    /// The last entry is the class count and must be 7.
    pub dense_sizes: [usize; NUM_DENSE],
    /// Drop probability of the dropout layer in front of each dense layer.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for FerConfig {
    fn default() -> Self {
        FerConfig {
            input_size: INPUT_SIZE,
            kernel_size: 3,
            conv_channels: [64, 128, 512, 512],
            dense_sizes: [256, 256, NUM_CLASSES],
            dropout: 0.3,
            seed: 42,
        }
    }
}

impl FerConfig {
    /// Small-width variant used for quick experiments and tests.
    pub fn reduced() -> Self {
        FerConfig {
            conv_channels: [8, 8, 8, 8],
            dense_sizes: [16, 16, NUM_CLASSES],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(FerError::config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FerError::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.conv_channels.contains(&0) || self.dense_sizes.contains(&0) {
            return Err(FerError::config("layer widths must be positive"));
        }
        if self.dense_sizes[NUM_DENSE - 1] != NUM_CLASSES {
            return Err(FerError::config(format!(
                "output layer must have {NUM_CLASSES} units, got {}",
                self.dense_sizes[NUM_DENSE - 1]
            )));
        }
        let div = 1 << NUM_BLOCKS;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(FerError::config(format!(
                "input size must be a positive multiple of {div}, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial side of the feature map after the last pool.
    pub fn final_spatial(&self) -> usize {
        self.input_size >> NUM_BLOCKS
    }

    pub fn flatten_size(&self) -> usize {
        self.final_spatial() * self.final_spatial() * self.conv_channels[NUM_BLOCKS - 1]
    }

    /// Closed-form learnable parameter count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let mut total = 0;
        let mut c_in = 1;
        for &c_out in &self.conv_channels {
            total += 2 * c_in; // gamma, beta
            total += c_out * c_in * k2 + c_out;
            c_in = c_out;
        }
        let mut n_in = self.flatten_size();
        for &n_out in &self.dense_sizes {
            total += n_out * n_in + n_out;
            n_in = n_out;
        }
        total
    }

    /// Canonical text description of every layer; hashed into checkpoints.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "fer-cnn/v1;input=1x{0}x{0};",
            self.input_size
        );
        let mut c_in = 1;
        let mut side = self.input_size;
        for (i, &c_out) in self.conv_channels.iter().enumerate() {
            let _ = write!(
                s,
                "block{i}:bn({c_in})+conv({c_in}->{c_out},k{k},same,s1)+relu+maxpool2({side}->{half});",
                k = self.kernel_size,
                half = side / 2,
            );
            c_in = c_out;
            side /= 2;
        }
        let _ = write!(s, "flatten({});", self.flatten_size());
        let mut n_in = self.flatten_size();
        for (i, &n_out) in self.dense_sizes.iter().enumerate() {
            let act = if i + 1 == NUM_DENSE { "softmax" } else { "sigmoid" };
            let _ = write!(
                s,
                "dense{i}:dropout({:.6})+fc({n_in}->{n_out})+{act};",
                self.dropout
            );
            n_in = n_out;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub stats: BatchNormStats<T>,
    pub kernels: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn is_frozen(&self) -> bool {
        self.kernels.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in [&mut self.gamma, &mut self.beta, &mut self.kernels, &mut self.bias] {
            p.frozen = frozen;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T = f32> {
    pub weights: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn is_frozen(&self) -> bool {
        self.weights.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weights.frozen = frozen;
        self.bias.frozen = frozen;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FerModel<T = f32> {
    config: FerConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub dense: Vec<DenseLayer<T>>,
}

struct BlockCache<T> {
    /// Batch-norm output, i.e. the convolution input.
    conv_in: Tensor<T>,
    bn: Option<BatchNormCache<T>>,
    pre_relu: Tensor<T>,
    pools: Vec<PoolIndices>,
}

struct DenseCache<T> {
    mask: DropoutMask<T>,
    input: Tensor<T>,
    output: Tensor<T>,
}

/// Intermediate values kept by a train-mode forward pass for [`FerModel::backward`].
pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    conv_out_shape: Vec<usize>,
    dense: Vec<DenseCache<T>>,
}

/// Gradients for every learnable parameter, in [`FerModel::parameters`] order.
#[derive(Debug, Clone)]
pub struct Gradients<T>(pub Vec<Tensor<T>>);

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> FerModel<T> {
    /// Freshly initialized network with He-normal weights drawn from `config.seed`.
    pub fn new(config: FerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed);
        let k = config.kernel_size;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = 1;
        for &c_out in &config.conv_channels {
            blocks.push(ConvBlock {
                gamma: Parameter::new(Tensor::full(&[c_in], T::one())),
                beta: Parameter::new(Tensor::zeros(&[c_in])),
                stats: BatchNormStats::new(c_in),
                kernels: Parameter::new(he_normal(&[c_out, c_in, k, k], c_in * k * k, &mut rng)),
                bias: Parameter::new(Tensor::zeros(&[c_out])),
            });
            c_in = c_out;
        }
        let mut dense = Vec::with_capacity(NUM_DENSE);
        let mut n_in = config.flatten_size();
        for &n_out in &config.dense_sizes {
            dense.push(DenseLayer {
                weights: Parameter::new(he_normal(&[n_out, n_in], n_in, &mut rng)),
                bias: Parameter::new(Tensor::zeros(&[n_out])),
            });
            n_in = n_out;
        }
        Ok(FerModel {
            config,
            blocks,
            dense,
        })
    }

    pub fn config(&self) -> &FerConfig {
        &self.config
    }

    /// Learnable parameters with their canonical names, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bn.gamma"), &b.gamma));
            out.push((format!("block{i}.bn.beta"), &b.beta));
            out.push((format!("block{i}.conv.kernels"), &b.kernels));
            out.push((format!("block{i}.conv.bias"), &b.bias));
        }
        for (i, d) in self.dense.iter().enumerate() {
            out.push((format!("dense{i}.weights"), &d.weights));
            out.push((format!("dense{i}.bias"), &d.bias));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.gamma, &mut b.beta, &mut b.kernels, &mut b.bias]);
        }
        for d in &mut self.dense {
            out.extend([&mut d.weights, &mut d.bias]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn running_stats_populated(&self) -> bool {
        self.blocks.iter().all(|b| b.stats.populated)
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let s = self.config.input_size;
        match *batch.shape() {
            [b, 1, h, w] if h == s && w == s => Ok(b),
            _ => Err(FerError::shape(format!(
                "model input must be [B, 1, {s}, {s}], got {:?}",
                batch.shape()
            ))),
        }
    }

    fn conv_relu_pool(
        &self,
        block: usize,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Vec<PoolIndices>)> {
        let blk = &self.blocks[block];
        let (b, c_in, h, w) = match *x.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => unreachable!("block input is always rank 4"),
        };
        let c_out = blk.kernels.value.shape()[0];
        let k = self.config.kernel_size;
        let mut pre = Tensor::zeros(&[b, c_out, h, w]);
        let (in_len, out_len) = (c_in * h * w, c_out * h * w);
        for n in 0..b {
            nn::conv2d_forward_raw(
                &x.data()[n * in_len..(n + 1) * in_len],
                (c_in, h, w),
                blk.kernels.value.data(),
                c_out,
                k,
                blk.bias.value.data(),
                &mut pre.data_mut()[n * out_len..(n + 1) * out_len],
            );
        }
        let act = nn::relu(&pre);
        let mut pooled = Vec::with_capacity(b);
        let mut pools = Vec::with_capacity(b);
        for n in 0..b {
            let (p, idx) = nn::maxpool2x2_forward(&act.slice_outer(n))?;
            pooled.push(p);
            pools.push(idx);
        }
        Ok((pre, Tensor::stack(&pooled)?, pools))
    }

    fn flatten(x: Tensor<T>) -> Result<Tensor<T>> {
        let b = x.shape()[0];
        let f = x.len() / b;
        x.reshape(vec![b, f])
    }

    /// Eval-mode logits. Never mutates the model.
    pub fn logits_eval(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (i, blk) in self.blocks.iter().enumerate() {
            let y = nn::batchnorm_eval(&x, &blk.gamma.value, &blk.beta.value, &blk.stats)?;
            x = self.conv_relu_pool(i, &y)?.1;
        }
        let mut h = Self::flatten(x)?;
        for (i, d) in self.dense.iter().enumerate() {
            let z = nn::dense_forward(&h, &d.weights.value, &d.bias.value)?;
            h = if i + 1 < NUM_DENSE { nn::sigmoid(&z) } else { z };
        }
        Ok(h)
    }

    /// Eval-mode class probabilities, one row per image.
    pub fn forward_eval(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        nn::softmax(&self.logits_eval(batch)?)
    }

    /// Class probabilities in either mode. Train mode updates batch-norm running
    /// statistics and draws dropout masks from `rng`.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut RngState) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train => nn::softmax(&self.forward_train(batch, rng)?.0),
        }
    }

    /// Train-mode forward pass returning logits and the cache needed by [`Self::backward`].
    ///
    /// Frozen blocks normalize with their running statistics and leave them untouched.
    pub fn forward_train(
        &mut self,
        batch: &Tensor<T>,
        rng: &mut RngState,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut block_caches = Vec::with_capacity(NUM_BLOCKS);
        for i in 0..NUM_BLOCKS {
            let blk = &mut self.blocks[i];
            let (y, bn) = if blk.is_frozen() {
                (
                    nn::batchnorm_eval(&x, &blk.gamma.value, &blk.beta.value, &blk.stats)?,
                    None,
                )
            } else {
                nn::batchnorm_forward(
                    &x,
                    &blk.gamma.value,
                    &blk.beta.value,
                    &mut blk.stats,
                    Mode::Train,
                )?
            };
            let (pre_relu, pooled, pools) = self.conv_relu_pool(i, &y)?;
            block_caches.push(BlockCache {
                conv_in: y,
                bn,
                pre_relu,
                pools,
            });
            x = pooled;
        }
        let conv_out_shape = x.shape().to_vec();
        let mut h = Self::flatten(x)?;
        let mut dense_caches = Vec::with_capacity(NUM_DENSE);
        for (i, d) in self.dense.iter().enumerate() {
            let (dropped, mask) = nn::dropout(&h, self.config.dropout, rng, Mode::Train)?;
            let z = nn::dense_forward(&dropped, &d.weights.value, &d.bias.value)?;
            let out = if i + 1 < NUM_DENSE { nn::sigmoid(&z) } else { z };
            dense_caches.push(DenseCache {
                mask,
                input: dropped,
                output: out.clone(),
            });
            h = out;
        }
        Ok((
            h,
            ForwardCache {
                blocks: block_caches,
                conv_out_shape,
                dense: dense_caches,
            },
        ))
    }

    /// Position of the earliest layer with a trainable parameter; layers
    /// `0..NUM_BLOCKS` are blocks, the rest dense layers.
    fn first_trainable_layer(&self) -> Option<usize> {
        self.blocks
            .iter()
            .map(|b| !b.is_frozen())
            .chain(self.dense.iter().map(|d| !d.is_frozen()))
            .position(|t| t)
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the logits).
    /// Gradients of frozen parameters are returned as zeros.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads: Vec<Tensor<T>> = self
            .parameters()
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let Some(first) = self.first_trainable_layer() else {
            return Ok(Gradients(grads));
        };
        let dense_base = 4 * NUM_BLOCKS;

        let mut g = dlogits.clone();
        for i in (0..NUM_DENSE).rev() {
            let layer = NUM_BLOCKS + i;
            let c = &cache.dense[i];
            if i + 1 < NUM_DENSE {
                g = nn::sigmoid_backward(&c.output, &g)?;
            }
            let d = &self.dense[i];
            let lg = nn::dense_backward(&c.input, &d.weights.value, &g)?;
            if !d.is_frozen() {
                grads[dense_base + 2 * i] = lg.params[0].1.clone();
                grads[dense_base + 2 * i + 1] = lg.params[1].1.clone();
            }
            if layer == first {
                return Ok(Gradients(grads));
            }
            g = nn::dropout_backward(&c.mask, &lg.input)?;
        }

        let mut g = g.reshape(cache.conv_out_shape.clone())?;
        let k = self.config.kernel_size;
        for i in (0..NUM_BLOCKS).rev() {
            let blk = &self.blocks[i];
            let c = &cache.blocks[i];
            let b = g.shape()[0];
            let mut dact = Vec::with_capacity(b);
            for n in 0..b {
                dact.push(nn::maxpool2x2_backward(&c.pools[n], &g.slice_outer(n))?);
            }
            let dpre = nn::relu_backward(&c.pre_relu, &Tensor::stack(&dact)?)?;

            let (c_out, c_in) = (blk.kernels.value.shape()[0], blk.kernels.value.shape()[1]);
            let (h, w) = (c.conv_in.shape()[2], c.conv_in.shape()[3]);
            // Blocks before `first` are never visited, so this block either
            // trains (its batch norm needs dconv_in) or passes gradient through.
            let need_input = i > first;
            let mut dk = Tensor::zeros(blk.kernels.value.shape());
            let mut db = Tensor::zeros(&[c_out]);
            let mut dconv_in = Tensor::zeros(c.conv_in.shape());
            let (in_len, out_len) = (c_in * h * w, c_out * h * w);
            for n in 0..b {
                let dx = Some(&mut dconv_in.data_mut()[n * in_len..(n + 1) * in_len]);
                nn::conv2d_backward_raw(
                    &c.conv_in.data()[n * in_len..(n + 1) * in_len],
                    (c_in, h, w),
                    blk.kernels.value.data(),
                    c_out,
                    k,
                    &dpre.data()[n * out_len..(n + 1) * out_len],
                    dk.data_mut(),
                    db.data_mut(),
                    dx,
                );
            }

            let bn_grads = match &c.bn {
                Some(bn_cache) if !blk.is_frozen() || need_input => {
                    Some(nn::batchnorm_backward(bn_cache, &dconv_in)?)
                }
                _ => None,
            };
            if !blk.is_frozen() {
                let bn = bn_grads
                    .as_ref()
                    .ok_or_else(|| FerError::Internal("trainable block without batch-norm cache".into()))?;
                grads[4 * i] = bn.params[0].1.clone();
                grads[4 * i + 1] = bn.params[1].1.clone();
                grads[4 * i + 2] = dk;
                grads[4 * i + 3] = db;
            }
            if !need_input {
                break;
            }
            g = match bn_grads {
                Some(bn) => bn.input,
                None => self.eval_bn_input_grad(i, &dconv_in),
            };
        }
        Ok(Gradients(grads))
    }

    /// Input gradient of eval-mode batch norm, which is a per-channel affine map.
    fn eval_bn_input_grad(&self, block: usize, upstream: &Tensor<T>) -> Tensor<T> {
        let blk = &self.blocks[block];
        let (c, hw) = (upstream.shape()[1], upstream.shape()[2] * upstream.shape()[3]);
        let eps = T::from_f64(nn::BN_EPSILON);
        let scale: Vec<T> = (0..c)
            .map(|ch| blk.gamma.value.data()[ch] / (blk.stats.var.data()[ch] + eps).sqrt())
            .collect();
        let mut out = upstream.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * scale[(i / hw) % c];
        }
        out
    }

    pub fn apply_gradients(&mut self, grads: &Gradients<T>, opt: &Sgd) -> Result<()> {
        let refs: Vec<&Tensor<T>> = grads.0.iter().collect();
        let mut params = self.parameters_mut();
        opt.step(&mut params, &refs)
    }

    /// Freezes (or unfreezes) every conv block.
    pub fn freeze_blocks(&mut self, frozen: bool) {
        for b in &mut self.blocks {
            b.set_frozen(frozen);
        }
    }

    pub fn reset_momentum(&mut self) {
        for p in self.parameters_mut() {
            p.reset_velocity();
        }
    }

    /// Classifies one `[1, H, W]` image; ties go to the lowest class index.
    pub fn predict(&self, image: &Tensor<T>) -> Result<(EmotionLabel, Vec<T>)> {
        let s = self.config.input_size;
        image.expect_shape(&[1, s, s])?;
        let batch = image.clone().reshape(vec![1, 1, s, s])?;
        let probs = self.forward_eval(&batch)?.into_data();
        let label = EmotionLabel::from_index(argmax(&probs))
            .ok_or_else(|| FerError::Internal("argmax outside class range".into()))?;
        Ok((label, probs))
    }
}
