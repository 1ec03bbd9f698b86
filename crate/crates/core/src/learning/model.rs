//! The residual refiner network.
//!
//! stem: 3×3 conv → BN → ReLU
//! block: 3×3 conv → BN → ReLU → 3×3 conv → BN, plus a skip (identity, or
//!        1×1 conv → BN when the width changes), then ReLU
//! head: 1×1 conv with bias → ReLU
//!
//! With a vector input, a dense layer first lifts it to a two-channel image.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::nn::{gemm, relu_backward, relu_inplace, Allocator, BatchNorm, BnCache, Conv, Op, Real, Shape, Span};
use super::LearningError;

/// What the network consumes per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelInput {
    /// A `channels × height × width` image.
    Image { channels: usize },
    /// A flat vector of `len` reals, lifted to a two-channel image.
    Vector { len: usize },
}

impl ModelInput {
    pub fn sample_len(&self, plane: usize) -> usize {
        match *self {
            ModelInput::Image { channels } => channels * plane,
            ModelInput::Vector { len } => len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    pub height: usize,
    pub width: usize,
    pub input: ModelInput,
    pub stem_width: usize,
    pub block_widths: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

const HEAD_INIT_GAIN: f64 = 0.05;

/// Residual block widths.
pub const DEFAULT_BLOCK_WIDTHS: [usize; 6] = [64, 128, 128, 128, 64, 32];

impl RefinerConfig {
    /// Default architecture over an `height × width` image with a
    /// two-channel (real, imaginary) input.
    pub fn new(height: usize, width: usize) -> Self {
        RefinerConfig {
            height,
            width,
            input: ModelInput::Image { channels: 2 },
            stem_width: 64,
            block_widths: DEFAULT_BLOCK_WIDTHS.to_vec(),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), LearningError> {
        let bad = |m| Err(LearningError::InvalidArchitecture(m));
        if self.height == 0 || self.width == 0 {
            return bad("image must be nonempty");
        }
        if self.stem_width == 0 || self.block_widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        match self.input {
            ModelInput::Image { channels: 0 } | ModelInput::Vector { len: 0 } => return bad("input must be nonempty"),
            _ => {}
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("batch-norm constants out of range");
        }
        Ok(())
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone)]
struct Dense {
    n_in: usize,
    n_out: usize,
    weight: Span,
    bias: Span,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    proj: Option<(Conv, BatchNorm)>,
}

#[derive(Debug, Clone)]
struct Layout {
    lift: Option<Dense>,
    stem: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    head: Conv,
    n_params: usize,
    n_stats: usize,
}

impl Layout {
    fn new(config: &RefinerConfig) -> Self {
        let mut p = Allocator::default();
        let mut s = Allocator::default();
        let (lift, cin) = match config.input {
            ModelInput::Image { channels } => (None, channels),
            ModelInput::Vector { len } => {
                let n_out = 2 * config.plane();
                (
                    Some(Dense {
                        n_in: len,
                        n_out,
                        weight: p.take(n_out * len),
                        bias: p.take(n_out),
                    }),
                    2,
                )
            }
        };
        let stem = Conv::new(&mut p, cin, config.stem_width, 3, false);
        let stem_bn = BatchNorm::new(&mut p, &mut s, config.stem_width);
        let mut blocks = Vec::with_capacity(config.block_widths.len());
        let mut c = config.stem_width;
        for &w in &config.block_widths {
            let conv1 = Conv::new(&mut p, c, w, 3, false);
            let bn1 = BatchNorm::new(&mut p, &mut s, w);
            let conv2 = Conv::new(&mut p, w, w, 3, false);
            let bn2 = BatchNorm::new(&mut p, &mut s, w);
            let proj = (c != w).then(|| {
                let conv = Conv::new(&mut p, c, w, 1, false);
                (conv, BatchNorm::new(&mut p, &mut s, w))
            });
            blocks.push(Block {
                conv1,
                bn1,
                conv2,
                bn2,
                proj,
            });
            c = w;
        }
        let head = Conv::new(&mut p, c, 1, 1, true);
        Layout {
            lift,
            stem,
            stem_bn,
            blocks,
            head,
            n_params: p.next,
            n_stats: s.next,
        }
    }

    fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        core::iter::once(&self.stem_bn).chain(self.blocks.iter().flat_map(|b| {
            [Some(&b.bn1), Some(&b.bn2), b.proj.as_ref().map(|(_, bn)| bn)]
                .into_iter()
                .flatten()
        }))
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        core::iter::once(&self.stem)
            .chain(self.blocks.iter().flat_map(|b| {
                [Some(&b.conv1), Some(&b.conv2), b.proj.as_ref().map(|(c, _)| c)]
                    .into_iter()
                    .flatten()
            }))
            .chain(core::iter::once(&self.head))
    }
}

struct BlockTape<T> {
    r1: Vec<T>,
    bn1: BnCache<T>,
    bn2: BnCache<T>,
    proj: Option<BnCache<T>>,
}

/// Intermediate values kept by a training-mode forward pass.
pub struct Tape<T> {
    shape: Shape,
    lift_input: Option<Vec<T>>,
    stem_input: Vec<T>,
    stem_bn: BnCache<T>,
    /// `acts[0]` is the stem output, `acts[i + 1]` the output of block `i`.
    acts: Vec<Vec<T>>,
    blocks: Vec<BlockTape<T>>,
    output: Vec<T>,
}

impl<T> Tape<T> {
    /// Predictions, `n` images of `height × width` back to back.
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

/// Network parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct RefinerModel<T = f32> {
    config: RefinerConfig,
    layout: Layout,
    params: Vec<T>,
    stats: Vec<T>,
    input_scale: f64,
}

impl<T: Real> RefinerModel<T> {
    /// He-normal convolutions, unit BN scale, zero shifts and biases.
    pub fn new<R: Rng + ?Sized>(config: RefinerConfig, rng: &mut R) -> Result<Self, LearningError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.n_params];
        for conv in layout.convs() {
            let std = libm::sqrt(2.0 / conv.fan_in() as f64);
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in conv.weight.of_mut(&mut params) {
                *w = T::from_f64(normal.sample(rng));
            }
        }
        // small head so initial outputs sit near the label scale instead of
        // saturating the rectifier on the first steps
        let head = layout.head;
        for w in head.weight.of_mut(&mut params) {
            *w = *w * T::from_f64(HEAD_INIT_GAIN);
        }
        if let Some(b) = head.bias {
            b.of_mut(&mut params).fill(T::from_f64(0.1));
        }
        if let Some(d) = &layout.lift {
            let normal = Normal::new(0.0, libm::sqrt(1.0 / d.n_in as f64)).expect("finite std");
            for w in d.weight.of_mut(&mut params) {
                *w = T::from_f64(normal.sample(rng));
            }
        }
        let mut stats = vec![T::zero(); layout.n_stats];
        for bn in layout.batch_norms() {
            bn.gamma.of_mut(&mut params).fill(T::one());
            bn.stats.of_mut(&mut stats)[bn.c..].fill(T::one());
        }
        Ok(RefinerModel {
            config,
            layout,
            params,
            stats,
            input_scale: 1.0,
        })
    }

    /// Rebuilds a model from stored tensors.
    pub fn from_parts(config: RefinerConfig, params: Vec<T>, stats: Vec<T>) -> Result<Self, LearningError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.n_params {
            return Err(LearningError::ShapeMismatch {
                what: "parameters",
                expected: layout.n_params,
                got: params.len(),
            });
        }
        if stats.len() != layout.n_stats {
            return Err(LearningError::ShapeMismatch {
                what: "running statistics",
                expected: layout.n_stats,
                got: stats.len(),
            });
        }
        Ok(RefinerModel {
            config,
            layout,
            params,
            stats,
            input_scale: 1.0,
        })
    }

    /// Number of trainable parameters for `config`.
    pub fn parameter_count(config: &RefinerConfig) -> usize {
        Layout::new(config).n_params
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn stats(&self) -> &[T] {
        &self.stats
    }

    /// Constant that raw priors are divided by before entering the network.
    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn set_input_scale(&mut self, scale: f64) {
        self.input_scale = scale;
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the output projection, so every prediction is 0.
    pub fn zero_head(&mut self) {
        let head = self.layout.head;
        head.weight.of_mut(&mut self.params).fill(T::zero());
        if let Some(b) = head.bias {
            b.of_mut(&mut self.params).fill(T::zero());
        }
    }

    fn check_inputs(&self, inputs: &[&[T]]) -> Result<(), LearningError> {
        let expected = self.config.input.sample_len(self.config.plane());
        for x in inputs {
            if x.len() != expected {
                return Err(LearningError::ShapeMismatch {
                    what: "network input",
                    expected,
                    got: x.len(),
                });
            }
        }
        Ok(())
    }

    fn shape(&self, n: usize) -> Shape {
        Shape {
            n,
            h: self.config.height,
            w: self.config.width,
        }
    }

    /// Stacks per-sample images into channel-major layout.
    fn gather(inputs: &[&[T]], channels: usize, plane: usize) -> Vec<T> {
        let m = inputs.len() * plane;
        let mut x = vec![T::zero(); channels * m];
        for (n, s) in inputs.iter().enumerate() {
            for c in 0..channels {
                x[c * m + n * plane..c * m + (n + 1) * plane].copy_from_slice(&s[c * plane..(c + 1) * plane]);
            }
        }
        x
    }

    /// Dense lift: rows of `N × len` to a channel-major `2 × (N·plane)` image.
    fn lift_forward(&self, d: &Dense, flat: &[T], n: usize) -> Vec<T> {
        let plane = self.config.plane();
        let mut z = vec![T::zero(); n * d.n_out];
        for row in z.chunks_exact_mut(d.n_out) {
            row.copy_from_slice(d.bias.of(&self.params));
        }
        gemm(n, d.n_in, d.n_out, T::one(), flat, Op::N, d.weight.of(&self.params), Op::T, T::one(), &mut z);
        let m = n * plane;
        let mut x = vec![T::zero(); 2 * m];
        for s in 0..n {
            for c in 0..2 {
                x[c * m + s * plane..c * m + (s + 1) * plane]
                    .copy_from_slice(&z[s * d.n_out + c * plane..s * d.n_out + (c + 1) * plane]);
            }
        }
        x
    }

    fn network_input(&self, inputs: &[&[T]]) -> (Option<Vec<T>>, Vec<T>) {
        let plane = self.config.plane();
        match (&self.config.input, &self.layout.lift) {
            (ModelInput::Image { channels }, _) => (None, Self::gather(inputs, *channels, plane)),
            (ModelInput::Vector { len }, Some(d)) => {
                let flat = Self::gather(inputs, 1, *len);
                let x = self.lift_forward(d, &flat, inputs.len());
                (Some(flat), x)
            }
            (ModelInput::Vector { .. }, None) => unreachable!("vector input always has a lift layer"),
        }
    }

    /// Inference-mode forward pass over a batch; returns one image per input.
    pub fn forward(&self, inputs: &[&[T]]) -> Result<Vec<Vec<T>>, LearningError> {
        self.check_inputs(inputs)?;
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let shape = self.shape(inputs.len());
        let m = shape.cols();
        let eps = T::from_f64(self.config.bn_eps);
        let (p, st) = (&self.params[..], &self.stats[..]);
        let mut scratch = Vec::new();
        let (_, x) = self.network_input(inputs);
        let mut h = self.layout.stem.forward(p, &x, shape, &mut scratch);
        self.layout.stem_bn.forward_eval(p, st, &mut h, m, eps);
        relu_inplace(&mut h);
        for b in &self.layout.blocks {
            let mut r1 = b.conv1.forward(p, &h, shape, &mut scratch);
            b.bn1.forward_eval(p, st, &mut r1, m, eps);
            relu_inplace(&mut r1);
            let mut out = b.conv2.forward(p, &r1, shape, &mut scratch);
            b.bn2.forward_eval(p, st, &mut out, m, eps);
            match &b.proj {
                Some((conv, bn)) => {
                    let mut s = conv.forward(p, &h, shape, &mut scratch);
                    bn.forward_eval(p, st, &mut s, m, eps);
                    add_assign(&mut out, &s);
                }
                None => add_assign(&mut out, &h),
            }
            relu_inplace(&mut out);
            h = out;
        }
        let mut y = self.layout.head.forward(p, &h, shape, &mut scratch);
        relu_inplace(&mut y);
        Ok(y.chunks_exact(shape.plane()).map(<[T]>::to_vec).collect())
    }

    /// Training-mode forward pass: batch statistics, running-estimate
    /// updates, and a tape for [`RefinerModel::backward`].
    pub fn forward_train(&mut self, inputs: &[&[T]]) -> Result<Tape<T>, LearningError> {
        self.check_inputs(inputs)?;
        if inputs.is_empty() {
            return Err(LearningError::EmptyDataset);
        }
        let shape = self.shape(inputs.len());
        let m = shape.cols();
        let eps = T::from_f64(self.config.bn_eps);
        let mom = T::from_f64(self.config.bn_momentum);
        let (lift_input, stem_input) = self.network_input(inputs);
        let layout = &self.layout;
        let p = &self.params[..];
        let st = &mut self.stats[..];
        let mut scratch = Vec::new();

        let a = layout.stem.forward(p, &stem_input, shape, &mut scratch);
        let (mut h, stem_bn) = layout.stem_bn.forward_train(p, st, &a, m, mom, eps);
        relu_inplace(&mut h);
        let mut acts = vec![h];
        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for b in &layout.blocks {
            let x = acts.last().unwrap();
            let a1 = b.conv1.forward(p, x, shape, &mut scratch);
            let (mut r1, bn1) = b.bn1.forward_train(p, st, &a1, m, mom, eps);
            drop(a1);
            relu_inplace(&mut r1);
            let a2 = b.conv2.forward(p, &r1, shape, &mut scratch);
            let (mut out, bn2) = b.bn2.forward_train(p, st, &a2, m, mom, eps);
            drop(a2);
            let proj = match &b.proj {
                Some((conv, bn)) => {
                    let s = conv.forward(p, x, shape, &mut scratch);
                    let (s, cache) = bn.forward_train(p, st, &s, m, mom, eps);
                    add_assign(&mut out, &s);
                    Some(cache)
                }
                None => {
                    add_assign(&mut out, x);
                    None
                }
            };
            relu_inplace(&mut out);
            blocks.push(BlockTape { r1, bn1, bn2, proj });
            acts.push(out);
        }
        let mut output = layout.head.forward(p, acts.last().unwrap(), shape, &mut scratch);
        relu_inplace(&mut output);
        Ok(Tape {
            shape,
            lift_input,
            stem_input,
            stem_bn,
            acts,
            blocks,
            output,
        })
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output` (same layout as
    /// [`Tape::output`]).
    pub fn backward(&self, tape: &Tape<T>, d_output: &[T], grads: &mut [T]) -> Result<(), LearningError> {
        if grads.len() != self.params.len() {
            return Err(LearningError::ShapeMismatch {
                what: "gradient buffer",
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        if d_output.len() != tape.output.len() {
            return Err(LearningError::ShapeMismatch {
                what: "output gradient",
                expected: tape.output.len(),
                got: d_output.len(),
            });
        }
        let shape = tape.shape;
        let m = shape.cols();
        let p = &self.params[..];
        let layout = &self.layout;
        let mut scratch = Vec::new();

        let mut d = d_output.to_vec();
        output_rectifier_backward(&tape.output, &mut d);
        let mut d = layout
            .head
            .backward(p, grads, tape.acts.last().unwrap(), &d, shape, true, &mut scratch)
            .unwrap();
        for (i, b) in layout.blocks.iter().enumerate().rev() {
            let bt = &tape.blocks[i];
            let x = &tape.acts[i];
            relu_backward(&tape.acts[i + 1], &mut d);
            let d_a2 = b.bn2.backward(p, grads, &bt.bn2, &d, m);
            let mut d_r1 = b.conv2.backward(p, grads, &bt.r1, &d_a2, shape, true, &mut scratch).unwrap();
            drop(d_a2);
            relu_backward(&bt.r1, &mut d_r1);
            let d_a1 = b.bn1.backward(p, grads, &bt.bn1, &d_r1, m);
            drop(d_r1);
            let mut dx = b.conv1.backward(p, grads, x, &d_a1, shape, true, &mut scratch).unwrap();
            match (&b.proj, &bt.proj) {
                (Some((conv, bn)), Some(cache)) => {
                    let ds = bn.backward(p, grads, cache, &d, m);
                    let dxs = conv.backward(p, grads, x, &ds, shape, true, &mut scratch).unwrap();
                    add_assign(&mut dx, &dxs);
                }
                _ => add_assign(&mut dx, &d),
            }
            d = dx;
        }
        relu_backward(&tape.acts[0], &mut d);
        let d_a = layout.stem_bn.backward(p, grads, &tape.stem_bn, &d, m);
        let need_dx = layout.lift.is_some();
        let dx = layout
            .stem
            .backward(p, grads, &tape.stem_input, &d_a, shape, need_dx, &mut scratch);
        if let (Some(dense), Some(dx), Some(flat)) = (&layout.lift, dx, &tape.lift_input) {
            let plane = shape.plane();
            let n = shape.n;
            // back to per-sample rows
            let mut dz = vec![T::zero(); n * dense.n_out];
            for s in 0..n {
                for c in 0..2 {
                    dz[s * dense.n_out + c * plane..s * dense.n_out + (c + 1) * plane]
                        .copy_from_slice(&dx[c * m + s * plane..c * m + (s + 1) * plane]);
                }
            }
            for row in dz.chunks_exact(dense.n_out) {
                for (g, v) in dense.bias.of_mut(grads).iter_mut().zip(row) {
                    *g = *g + *v;
                }
            }
            gemm(
                dense.n_out,
                n,
                dense.n_in,
                T::one(),
                &dz,
                Op::T,
                flat,
                Op::N,
                T::one(),
                dense.weight.of_mut(grads),
            );
        }
        Ok(())
    }
}

/// Backward rule for the output rectifier. A clipped pixel still passes its
/// gradient when the loss asks for a larger value, so target pixels that
/// fell below zero can recover; requests to push a zero output further down
/// are dropped as in a plain ReLU.
fn output_rectifier_backward<T: Real>(out: &[T], dy: &mut [T]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if *o <= T::zero() && *d >= T::zero() {
            *d = T::zero();
        }
    }
}

fn add_assign<T: Real>(a: &mut [T], b: &[T]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = *x + *y;
    }
}
