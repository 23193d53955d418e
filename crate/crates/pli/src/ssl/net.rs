//! Small residual convolutional encoder with hand-written backpropagation.
//!
//! The network is a stem convolution, a configurable stack of stride-2 stages
//! with residual blocks, global average pooling to the feature vector, and a
//! two-layer projection head. Convolutions run as im2col plus matrix products
//! so the whole model is a handful of dense kernels. Everything is generic
//! over the float type: training uses f32, gradient verification f64.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::loss::{l2_normalize_rows, l2_normalize_rows_backward, Real};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

const STREAM_INIT: u64 = 21;

/// Nonlinearity used throughout the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Pass-through; makes the whole network linear for exactness tests.
    Identity,
}

impl Activation {
    fn forward<T: Real>(self, x: &mut ArrayD<T>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(T::zero()));
        }
    }

    /// Gradient through the activation given the *post*-activation values.
    fn backward<T: Real>(self, dpost: &mut ArrayD<T>, post: &ArrayD<T>) {
        if self == Activation::Relu {
            ndarray::Zip::from(dpost).and(post).for_each(|d, &p| {
                if p <= T::zero() {
                    *d = T::zero();
                }
            });
        }
    }
}

/// Architecture description of the encoder and projection head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Number of stride-2 stages.
    pub stages: usize,
    /// Output channels per stage.
    pub channels: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    /// Feature vector length; must equal the last stage's channel count.
    pub feature_dim: usize,
    /// Projection head output length.
    pub projection_dim: usize,
    pub activation: Activation,
    /// Group count for the per-sample normalization after every convolution;
    /// 0 disables it. Without normalization a deep randomly initialized ReLU
    /// stack maps every input to nearly the same pooled direction and the
    /// contrastive loss starts (and stays) at its uniform plateau, so keep
    /// this on for anything deeper than a couple of layers. A layer whose
    /// channel count the value does not divide uses the largest divisor below
    /// it.
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stages: 4,
            channels: vec![32, 64, 128, 256],
            blocks: vec![2, 2, 2, 2],
            feature_dim: 256,
            projection_dim: 32,
            activation: Activation::Relu,
            norm_groups: 8,
        }
    }
}

impl EncoderConfig {
    /// Small configuration sized for the desk-scale pipeline.
    #[must_use]
    pub fn desk() -> Self {
        EncoderConfig {
            stages: 4,
            channels: vec![8, 16, 32, 64],
            blocks: vec![1, 1, 1, 0],
            feature_dim: 64,
            ..EncoderConfig::default()
        }
    }

    /// Minimal configuration for finite-difference gradient checks.
    #[must_use]
    pub fn tiny() -> Self {
        EncoderConfig {
            stages: 1,
            channels: vec![4],
            blocks: vec![1],
            feature_dim: 4,
            projection_dim: 3,
            activation: Activation::Relu,
            norm_groups: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::invalid("encoder needs at least one stage"));
        }
        if self.channels.len() != self.stages || self.blocks.len() != self.stages {
            return Err(Error::invalid(
                "channels and blocks must list one entry per stage",
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid("stage channel counts must be positive"));
        }
        if self.feature_dim != *self.channels.last().unwrap() {
            return Err(Error::invalid(
                "feature_dim must equal the last stage's channel count",
            ));
        }
        if self.projection_dim == 0 {
            return Err(Error::invalid("projection_dim must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter storage and Adam
// ---------------------------------------------------------------------------

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Named parameter tensors with gradients and optimizer state.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    grads: Vec<ArrayD<T>>,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    #[must_use]
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<T>) -> usize {
        let zeros = ArrayD::zeros(value.raw_dim());
        self.names.push(name.to_string());
        self.grads.push(zeros.clone());
        self.m.push(zeros.clone());
        self.v.push(zeros);
        self.values.push(value);
        self.values.len() - 1
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    #[must_use]
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    #[must_use]
    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    #[must_use]
    pub fn value(&self, id: usize) -> &ArrayD<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut ArrayD<T> {
        &mut self.values[id]
    }

    /// Accumulated gradient for one parameter.
    #[must_use]
    pub fn grad(&self, id: usize) -> &ArrayD<T> {
        &self.grads[id]
    }

    fn value2(&self, id: usize) -> ArrayView2<'_, T> {
        self.values[id]
            .view()
            .into_shape((self.values[id].shape()[0], self.values[id].len() / self.values[id].shape()[0]))
            .expect("contiguous parameter")
    }

    fn value1(&self, id: usize) -> ArrayView1<'_, T> {
        self.values[id]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("vector parameter")
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    fn accumulate2(&mut self, id: usize, delta: &Array2<T>) {
        let shape = self.grads[id].raw_dim();
        let flat = delta
            .view()
            .into_shape(shape.clone())
            .expect("gradient shape matches parameter");
        self.grads[id] += &flat;
    }

    fn accumulate1(&mut self, id: usize, delta: &Array1<T>) {
        let mut g = self.grads[id]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("vector parameter");
        g += delta;
    }

    /// Merge another store's gradients into this one (same layout).
    pub fn merge_grads(&mut self, other: &ParamStore<T>) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            *g += o;
        }
    }

    /// One bias-corrected Adam update over all parameters.
    pub fn adam_step(&mut self, hp: &AdamParams) {
        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64(hp.lr).unwrap();
        let wd = T::from_f64(hp.weight_decay).unwrap();
        let b1 = T::from_f64(hp.beta1).unwrap();
        let b2 = T::from_f64(hp.beta2).unwrap();
        let eps = T::from_f64(hp.epsilon).unwrap();
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for ((value, grad), (m, v)) in self
            .values
            .iter_mut()
            .zip(&self.grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g + wd * *w;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Iterate over `(name, value)` pairs, e.g. for checkpointing.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

fn conv_out(len: usize, stride: usize) -> usize {
    (len + 2 - 3) / stride + 1
}

/// Unfold a padded `[C, H, W]` sample into `[C·9, Ho·Wo]` patch columns.
fn im2col<T: Real>(x: &ArrayView3<'_, T>, stride: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let mut col = Array2::<T>::zeros((c * 9, ho * wo));
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let mut dst = col.index_axis_mut(Axis(0), row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of column gradients back onto the input layout.
fn col2im<T: Real>(dcol: &ArrayView2<'_, T>, c: usize, h: usize, w: usize, stride: usize) -> Array3<T> {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let mut dx = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let src = dcol.index_axis(Axis(0), row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dx[[ci, iy as usize, ix as usize]] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 3x3 convolution with padding 1; returns pre-activation output.
fn conv_forward<T: Real>(
    w2: &ArrayView2<'_, T>,
    b: &ArrayView1<'_, T>,
    x: &Array4<T>,
    stride: usize,
) -> Array4<T> {
    let (bs, _c, h, w) = x.dim();
    let cout = w2.nrows();
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let mut out = Array4::<T>::zeros((bs, cout, ho, wo));
    for bi in 0..bs {
        let col = im2col(&x.index_axis(Axis(0), bi), stride);
        let mut out_mat = out
            .index_axis_mut(Axis(0), bi)
            .into_shape((cout, ho * wo))
            .expect("contiguous output");
        general_mat_mul(T::one(), w2, &col.view(), T::zero(), &mut out_mat);
        for (mut row, &bias) in out_mat.outer_iter_mut().zip(b.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
    }
    out
}

/// Backward pass of [`conv_forward`]; returns input gradients, accumulates
/// weight/bias gradients into the given buffers.
fn conv_backward<T: Real>(
    w2: &ArrayView2<'_, T>,
    x: &Array4<T>,
    dout: &Array4<T>,
    stride: usize,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array4<T> {
    let (bs, c, h, w) = x.dim();
    let (_, cout, ho, wo) = dout.dim();
    let mut dx = Array4::<T>::zeros((bs, c, h, w));
    for bi in 0..bs {
        let col = im2col(&x.index_axis(Axis(0), bi), stride);
        let dout_mat = dout
            .index_axis(Axis(0), bi)
            .into_shape((cout, ho * wo))
            .expect("contiguous gradient");
        general_mat_mul(T::one(), &dout_mat, &col.t(), T::one(), &mut dw.view_mut());
        for (dbias, row) in db.iter_mut().zip(dout_mat.outer_iter()) {
            *dbias += row.sum();
        }
        let mut dcol = Array2::<T>::zeros(col.raw_dim());
        general_mat_mul(T::one(), &w2.t(), &dout_mat, T::zero(), &mut dcol.view_mut());
        dx.index_axis_mut(Axis(0), bi)
            .assign(&col2im(&dcol.view(), c, h, w, stride));
    }
    dx
}

fn linear_forward<T: Real>(w: &ArrayView2<'_, T>, b: &ArrayView1<'_, T>, x: &ArrayView2<'_, T>) -> Array2<T> {
    let mut out = Array2::<T>::zeros((x.nrows(), w.nrows()));
    general_mat_mul(T::one(), x, &w.t(), T::zero(), &mut out.view_mut());
    out += b;
    out
}

fn linear_backward<T: Real>(
    w: &ArrayView2<'_, T>,
    x: &ArrayView2<'_, T>,
    dout: &ArrayView2<'_, T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &dout.t(), x, T::one(), &mut dw.view_mut());
    *db += &dout.sum_axis(Axis(0));
    let mut dx = Array2::<T>::zeros(x.raw_dim());
    general_mat_mul(T::one(), dout, w, T::zero(), &mut dx.view_mut());
    dx
}

fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (bs, c, h, w) = x.dim();
    let scale = T::from_f64(1.0 / (h * w) as f64).unwrap();
    let mut out = Array2::<T>::zeros((bs, c));
    for bi in 0..bs {
        for ci in 0..c {
            let mut acc = T::zero();
            for yy in 0..h {
                for xx in 0..w {
                    acc += x[[bi, ci, yy, xx]];
                }
            }
            out[[bi, ci]] = acc * scale;
        }
    }
    out
}

fn global_avg_pool_backward<T: Real>(dpool: &ArrayView2<'_, T>, h: usize, w: usize) -> Array4<T> {
    let (bs, c) = dpool.dim();
    let scale = T::from_f64(1.0 / (h * w) as f64).unwrap();
    let mut dx = Array4::<T>::zeros((bs, c, h, w));
    for bi in 0..bs {
        for ci in 0..c {
            let g = dpool[[bi, ci]] * scale;
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

const NORM_EPS: f64 = 1e-5;

/// Largest group count that divides `channels` without exceeding `requested`.
fn effective_groups(channels: usize, requested: usize) -> usize {
    (1..=requested.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Per-sample group statistics recorded for the backward pass.
struct NormTape<T> {
    /// Standardized activations before gain and shift.
    hat: Array4<T>,
    /// `1/sqrt(var + eps)` per `[sample, group]`.
    inv_std: Array2<T>,
    groups: usize,
}

/// Group normalization over `[C/groups, H, W]` slices of each sample,
/// followed by a per-channel affine map: `y = gamma * (x - mu)/sigma + beta`.
fn group_norm_forward<T: Real>(
    x: &Array4<T>,
    groups: usize,
    gamma: &ArrayView1<'_, T>,
    beta: &ArrayView1<'_, T>,
) -> (Array4<T>, NormTape<T>) {
    let (bs, c, h, w) = x.dim();
    let per = c / groups;
    let m = T::from_f64((per * h * w) as f64).unwrap();
    let eps = T::from_f64(NORM_EPS).unwrap();
    let mut hat = Array4::<T>::zeros((bs, c, h, w));
    let mut inv_std = Array2::<T>::zeros((bs, groups));
    let mut y = Array4::<T>::zeros((bs, c, h, w));
    for bi in 0..bs {
        for g in 0..groups {
            let c0 = g * per;
            let mut sum = T::zero();
            for ci in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        sum += x[[bi, ci, yy, xx]];
                    }
                }
            }
            let mu = sum / m;
            let mut var = T::zero();
            for ci in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        let d = x[[bi, ci, yy, xx]] - mu;
                        var += d * d;
                    }
                }
            }
            let is = T::one() / (var / m + eps).sqrt();
            inv_std[[bi, g]] = is;
            for ci in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        let hh = (x[[bi, ci, yy, xx]] - mu) * is;
                        hat[[bi, ci, yy, xx]] = hh;
                        y[[bi, ci, yy, xx]] = gamma[ci] * hh + beta[ci];
                    }
                }
            }
        }
    }
    (y, NormTape { hat, inv_std, groups })
}

/// Backward pass of [`group_norm_forward`]; accumulates gain/shift gradients
/// and returns the input gradient.
fn group_norm_backward<T: Real>(
    dy: &Array4<T>,
    tape: &NormTape<T>,
    gamma: &ArrayView1<'_, T>,
    dgamma: &mut Array1<T>,
    dbeta: &mut Array1<T>,
) -> Array4<T> {
    let (bs, c, h, w) = tape.hat.dim();
    let groups = tape.groups;
    let per = c / groups;
    let m = T::from_f64((per * h * w) as f64).unwrap();
    let mut dx = Array4::<T>::zeros((bs, c, h, w));
    for bi in 0..bs {
        for g in 0..groups {
            let c0 = g * per;
            // Channel-wise affine gradients plus the two group reductions
            // that the standardization couples every element through.
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ci in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        let d = dy[[bi, ci, yy, xx]];
                        let hh = tape.hat[[bi, ci, yy, xx]];
                        dgamma[ci] += d * hh;
                        dbeta[ci] += d;
                        let dh = d * gamma[ci];
                        s1 += dh;
                        s2 += dh * hh;
                    }
                }
            }
            s1 /= m;
            s2 /= m;
            let is = tape.inv_std[[bi, g]];
            for ci in c0..c0 + per {
                for yy in 0..h {
                    for xx in 0..w {
                        let dh = dy[[bi, ci, yy, xx]] * gamma[ci];
                        let hh = tape.hat[[bi, ci, yy, xx]];
                        dx[[bi, ci, yy, xx]] = is * (dh - s1 - hh * s2);
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Encoder network
// ---------------------------------------------------------------------------

/// Parameter ids of one normalization layer's gain and shift.
#[derive(Debug, Clone, Copy)]
struct NormIds {
    g: usize,
    b: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct BlockIds {
    w1: usize,
    b1: usize,
    n1: Option<NormIds>,
    w2: usize,
    b2: usize,
    n2: Option<NormIds>,
}

#[derive(Debug, Clone)]
struct StageIds {
    down_w: usize,
    down_b: usize,
    down_n: Option<NormIds>,
    blocks: Vec<BlockIds>,
}

/// The encoder topology bound to parameter ids in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub cfg: EncoderConfig,
    pub in_channels: usize,
    stem_w: usize,
    stem_b: usize,
    stem_n: Option<NormIds>,
    stages: Vec<StageIds>,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

fn he_conv<T: Real>(store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, seed: u64) -> usize {
    let id = store.len() as u64;
    let mut rng = keyed_rng(seed, STREAM_INIT, id);
    let std = (2.0 / (cin * 9) as f64).sqrt();
    let w = ArrayD::from_shape_fn(ndarray::IxDyn(&[cout, cin, 3, 3]), |_| {
        let x: f64 = rng.sample(StandardNormal);
        T::from_f64(x * std).unwrap()
    });
    store.add(name, w)
}

fn he_linear<T: Real>(store: &mut ParamStore<T>, name: &str, dout: usize, din: usize, seed: u64) -> usize {
    let id = store.len() as u64;
    let mut rng = keyed_rng(seed, STREAM_INIT, id);
    let std = (2.0 / din as f64).sqrt();
    let w = ArrayD::from_shape_fn(ndarray::IxDyn(&[dout, din]), |_| {
        let x: f64 = rng.sample(StandardNormal);
        T::from_f64(x * std).unwrap()
    });
    store.add(name, w)
}

fn zero_bias<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> usize {
    store.add(name, ArrayD::zeros(ndarray::IxDyn(&[d])))
}

/// Register one normalization layer (unit gain, zero shift) when enabled.
fn norm_ids<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    requested: usize,
) -> Option<NormIds> {
    if requested == 0 {
        return None;
    }
    let g = store.add(
        &format!("{prefix}.g"),
        ArrayD::from_elem(ndarray::IxDyn(&[channels]), T::one()),
    );
    let b = zero_bias(store, &format!("{prefix}.b"), channels);
    Some(NormIds {
        g,
        b,
        groups: effective_groups(channels, requested),
    })
}

impl EncoderNet {
    /// Build the network, registering freshly initialized parameters.
    pub fn build<T: Real>(
        cfg: &EncoderConfig,
        in_channels: usize,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<EncoderNet> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(Error::invalid("encoder input needs at least one channel"));
        }
        let ng = cfg.norm_groups;
        let stem_w = he_conv(store, "stem.w", cfg.channels[0], in_channels, seed);
        let stem_b = zero_bias(store, "stem.b", cfg.channels[0]);
        let stem_n = norm_ids(store, "stem.norm", cfg.channels[0], ng);
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut prev = cfg.channels[0];
        for (s, (&ch, &nblocks)) in cfg.channels.iter().zip(cfg.blocks.iter()).enumerate() {
            let down_w = he_conv(store, &format!("stage{s}.down.w"), ch, prev, seed);
            let down_b = zero_bias(store, &format!("stage{s}.down.b"), ch);
            let down_n = norm_ids(store, &format!("stage{s}.down.norm"), ch, ng);
            let mut blocks = Vec::with_capacity(nblocks);
            for bl in 0..nblocks {
                blocks.push(BlockIds {
                    w1: he_conv(store, &format!("stage{s}.block{bl}.conv1.w"), ch, ch, seed),
                    b1: zero_bias(store, &format!("stage{s}.block{bl}.conv1.b"), ch),
                    n1: norm_ids(store, &format!("stage{s}.block{bl}.norm1"), ch, ng),
                    w2: he_conv(store, &format!("stage{s}.block{bl}.conv2.w"), ch, ch, seed),
                    b2: zero_bias(store, &format!("stage{s}.block{bl}.conv2.b"), ch),
                    n2: norm_ids(store, &format!("stage{s}.block{bl}.norm2"), ch, ng),
                });
            }
            stages.push(StageIds { down_w, down_b, down_n, blocks });
            prev = ch;
        }
        let h = cfg.feature_dim;
        let fc1_w = he_linear(store, "proj.fc1.w", h, h, seed);
        let fc1_b = zero_bias(store, "proj.fc1.b", h);
        let fc2_w = he_linear(store, "proj.fc2.w", cfg.projection_dim, h, seed);
        let fc2_b = zero_bias(store, "proj.fc2.b", cfg.projection_dim);
        Ok(EncoderNet {
            cfg: cfg.clone(),
            in_channels,
            stem_w,
            stem_b,
            stem_n,
            stages,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        })
    }

    fn check_input<T: Real>(&self, x: &Array4<T>) -> Result<()> {
        let (_b, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "encoder expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (mut hh, mut ww) = (h, w);
        for _ in 0..self.cfg.stages {
            hh = conv_out(hh, 2);
            ww = conv_out(ww, 2);
        }
        if hh == 0 || ww == 0 || h < 3 || w < 3 {
            return Err(Error::invalid(format!("input {h}x{w} too small for {} stages", self.cfg.stages)));
        }
        Ok(())
    }

    fn act<T: Real>(&self, x: Array4<T>) -> Array4<T> {
        let mut d = x.into_dyn();
        self.cfg.activation.forward(&mut d);
        d.into_dimensionality().expect("rank preserved")
    }

    fn act2<T: Real>(&self, x: Array2<T>) -> Array2<T> {
        let mut d = x.into_dyn();
        self.cfg.activation.forward(&mut d);
        d.into_dimensionality().expect("rank preserved")
    }

    fn act_back4<T: Real>(&self, mut dpost: Array4<T>, post: &Array4<T>) -> Array4<T> {
        let mut d = dpost.view_mut().into_dyn();
        let p = post.view().into_dyn().to_owned();
        self.cfg.activation.backward_view(&mut d, &p);
        dpost
    }

    /// Normalize a convolution output when the layer carries a norm.
    fn norm<T: Real>(
        &self,
        store: &ParamStore<T>,
        ids: Option<NormIds>,
        x: Array4<T>,
    ) -> (Array4<T>, Option<NormTape<T>>) {
        match ids {
            None => (x, None),
            Some(n) => {
                let (y, tape) =
                    group_norm_forward(&x, n.groups, &store.value1(n.g), &store.value1(n.b));
                (y, Some(tape))
            }
        }
    }

    /// Gradient through an optional norm layer; identity when absent.
    fn norm_back<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        ids: Option<NormIds>,
        tape: &Option<NormTape<T>>,
        dy: Array4<T>,
    ) -> Array4<T> {
        match (ids, tape) {
            (Some(n), Some(t)) => {
                let c = dy.dim().1;
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                let dx = group_norm_backward(&dy, t, &store.value1(n.g), &mut dgamma, &mut dbeta);
                store.accumulate1(n.g, &dgamma);
                store.accumulate1(n.b, &dbeta);
                dx
            }
            _ => dy,
        }
    }

    /// Feature-only forward pass: encode to the pooled h-vector.
    pub fn forward_pooled<T: Real>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        let stem_pre = conv_forward(&store.value2(self.stem_w), &store.value1(self.stem_b), x, 1);
        let mut cur = self.act(self.norm(store, self.stem_n, stem_pre).0);
        for stage in &self.stages {
            let down_pre = conv_forward(
                &store.value2(stage.down_w),
                &store.value1(stage.down_b),
                &cur,
                2,
            );
            cur = self.act(self.norm(store, stage.down_n, down_pre).0);
            for block in &stage.blocks {
                let c1_pre = conv_forward(
                    &store.value2(block.w1),
                    &store.value1(block.b1),
                    &cur,
                    1,
                );
                let c1 = self.act(self.norm(store, block.n1, c1_pre).0);
                let pre2 = conv_forward(
                    &store.value2(block.w2),
                    &store.value1(block.b2),
                    &c1,
                    1,
                );
                let mut pre2 = self.norm(store, block.n2, pre2).0;
                pre2 += &cur;
                cur = self.act(pre2);
            }
        }
        Ok(global_avg_pool(&cur))
    }

    /// Projection head applied to pooled features; raw (not normalized).
    pub fn project<T: Real>(&self, store: &ParamStore<T>, h: &ArrayView2<'_, T>) -> Result<Array2<T>> {
        if h.ncols() != self.cfg.feature_dim {
            return Err(Error::invalid(format!(
                "projection expects {} feature dims, got {}",
                self.cfg.feature_dim,
                h.ncols()
            )));
        }
        let a = self.act2(linear_forward(
            &store.value2(self.fc1_w),
            &store.value1(self.fc1_b),
            h,
        ));
        Ok(linear_forward(
            &store.value2(self.fc2_w),
            &store.value1(self.fc2_b),
            &a.view(),
        ))
    }

    /// Full forward pass to L2-normalized projections, recording a tape.
    pub fn forward_full<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Array4<T>,
    ) -> Result<(Array2<T>, Tape<T>)> {
        self.check_input(&x)?;
        let stem_pre = conv_forward(&store.value2(self.stem_w), &store.value1(self.stem_b), &x, 1);
        let (stem_normed, stem_norm) = self.norm(store, self.stem_n, stem_pre);
        let stem_post = self.act(stem_normed);
        let mut stages_tape: Vec<StageTape<T>> = Vec::with_capacity(self.stages.len());
        let mut cur = stem_post.clone();
        for stage in &self.stages {
            let down_pre = conv_forward(
                &store.value2(stage.down_w),
                &store.value1(stage.down_b),
                &cur,
                2,
            );
            let (down_normed, down_norm) = self.norm(store, stage.down_n, down_pre);
            let down_post = self.act(down_normed);
            cur = down_post.clone();
            let mut blocks_tape = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let c1_pre = conv_forward(
                    &store.value2(block.w1),
                    &store.value1(block.b1),
                    &cur,
                    1,
                );
                let (c1_normed, n1) = self.norm(store, block.n1, c1_pre);
                let c1_post = self.act(c1_normed);
                let pre2 = conv_forward(
                    &store.value2(block.w2),
                    &store.value1(block.b2),
                    &c1_post,
                    1,
                );
                let (mut pre2, n2) = self.norm(store, block.n2, pre2);
                pre2 += &cur;
                let out_post = self.act(pre2);
                cur = out_post.clone();
                blocks_tape.push(BlockTape { c1_post, out_post, n1, n2 });
            }
            stages_tape.push(StageTape { down_post, down_norm, blocks: blocks_tape });
        }
        let (_, _, fh, fw) = cur.dim();
        let pooled = global_avg_pool(&cur);
        let fc1_post = self.act2(linear_forward(
            &store.value2(self.fc1_w),
            &store.value1(self.fc1_b),
            &pooled.view(),
        ));
        let z_raw = linear_forward(
            &store.value2(self.fc2_w),
            &store.value1(self.fc2_b),
            &fc1_post.view(),
        );
        let (z, z_norms) = l2_normalize_rows(&z_raw.view());
        let tape = Tape {
            input: x,
            stem_post,
            stem_norm,
            stages: stages_tape,
            final_dims: (fh, fw),
            pooled,
            fc1_post,
            z_raw,
            z: z.clone(),
            z_norms,
        };
        Ok((z, tape))
    }

    /// Backpropagate a gradient on the normalized projections; accumulates
    /// parameter gradients into `store`.
    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, tape: &Tape<T>, dz: &Array2<T>) {
        let dz_raw = l2_normalize_rows_backward(&tape.z.view(), &tape.z_norms, &dz.view());
        self.backward_raw(store, tape, &dz_raw);
    }

    /// Backpropagate a gradient taken on the projections before unit
    /// normalization. Useful for probing the trunk in isolation.
    pub fn backward_raw<T: Real>(&self, store: &mut ParamStore<T>, tape: &Tape<T>, dz_raw: &Array2<T>) {
        let mut dw2 = Array2::<T>::zeros((self.cfg.projection_dim, self.cfg.feature_dim));
        let mut db2 = Array1::<T>::zeros(self.cfg.projection_dim);
        let dfc1_post = linear_backward(
            &store.value2(self.fc2_w),
            &tape.fc1_post.view(),
            &dz_raw.view(),
            &mut dw2,
            &mut db2,
        );
        store.accumulate2(self.fc2_w, &dw2);
        store.accumulate1(self.fc2_b, &db2);

        let dfc1_pre = {
            let mut d = dfc1_post.into_dyn();
            self.cfg
                .activation
                .backward(&mut d, &tape.fc1_post.clone().into_dyn());
            d.into_dimensionality::<Ix2>().expect("rank preserved")
        };
        let mut dw1 = Array2::<T>::zeros((self.cfg.feature_dim, self.cfg.feature_dim));
        let mut db1 = Array1::<T>::zeros(self.cfg.feature_dim);
        let dpooled = linear_backward(
            &store.value2(self.fc1_w),
            &tape.pooled.view(),
            &dfc1_pre.view(),
            &mut dw1,
            &mut db1,
        );
        store.accumulate2(self.fc1_w, &dw1);
        store.accumulate1(self.fc1_b, &db1);

        let (fh, fw) = tape.final_dims;
        let mut dcur = global_avg_pool_backward(&dpooled.view(), fh, fw);

        for (si, stage) in self.stages.iter().enumerate().rev() {
            let stage_tape = &tape.stages[si];
            for (bi, block) in stage.blocks.iter().enumerate().rev() {
                let bt = &stage_tape.blocks[bi];
                let block_input: &Array4<T> = if bi == 0 {
                    &stage_tape.down_post
                } else {
                    &stage_tape.blocks[bi - 1].out_post
                };
                let dpre_sum = self.act_back4(dcur, &bt.out_post);
                let dconv2_out = self.norm_back(store, block.n2, &bt.n2, dpre_sum.clone());
                let cin = bt.c1_post.shape()[1];
                let mut dwc2 = Array2::<T>::zeros((cin, cin * 9));
                let mut dbc2 = Array1::<T>::zeros(cin);
                let dc1_post = conv_backward(
                    &store.value2(block.w2),
                    &bt.c1_post,
                    &dconv2_out,
                    1,
                    &mut dwc2,
                    &mut dbc2,
                );
                store.accumulate2(block.w2, &dwc2);
                store.accumulate1(block.b2, &dbc2);
                let dc1_normed = self.act_back4(dc1_post, &bt.c1_post);
                let dc1_pre = self.norm_back(store, block.n1, &bt.n1, dc1_normed);
                let mut dwc1 = Array2::<T>::zeros((cin, cin * 9));
                let mut dbc1 = Array1::<T>::zeros(cin);
                let mut dinput = conv_backward(
                    &store.value2(block.w1),
                    block_input,
                    &dc1_pre,
                    1,
                    &mut dwc1,
                    &mut dbc1,
                );
                store.accumulate2(block.w1, &dwc1);
                store.accumulate1(block.b1, &dbc1);
                dinput += &dpre_sum;
                dcur = dinput;
            }
            let stage_input: &Array4<T> = if si == 0 {
                &tape.stem_post
            } else {
                let prev = &tape.stages[si - 1];
                if prev.blocks.is_empty() {
                    &prev.down_post
                } else {
                    &prev.blocks.last().unwrap().out_post
                }
            };
            let dnormed = self.act_back4(dcur, &stage_tape.down_post);
            let dpre = self.norm_back(store, stage.down_n, &stage_tape.down_norm, dnormed);
            let cout = stage_tape.down_post.shape()[1];
            let cin = stage_input.shape()[1];
            let mut dwd = Array2::<T>::zeros((cout, cin * 9));
            let mut dbd = Array1::<T>::zeros(cout);
            dcur = conv_backward(
                &store.value2(stage.down_w),
                stage_input,
                &dpre,
                2,
                &mut dwd,
                &mut dbd,
            );
            store.accumulate2(stage.down_w, &dwd);
            store.accumulate1(stage.down_b, &dbd);
        }

        let dstem_normed = self.act_back4(dcur, &tape.stem_post);
        let dstem_pre = self.norm_back(store, self.stem_n, &tape.stem_norm, dstem_normed);
        let cout = tape.stem_post.shape()[1];
        let mut dws = Array2::<T>::zeros((cout, self.in_channels * 9));
        let mut dbs = Array1::<T>::zeros(cout);
        let _ = conv_backward(
            &store.value2(self.stem_w),
            &tape.input,
            &dstem_pre,
            1,
            &mut dws,
            &mut dbs,
        );
        store.accumulate2(self.stem_w, &dws);
        store.accumulate1(self.stem_b, &dbs);
    }
}

impl Activation {
    fn backward_view<T: Real>(
        self,
        dpost: &mut ndarray::ArrayViewMutD<'_, T>,
        post: &ArrayD<T>,
    ) {
        if self == Activation::Relu {
            ndarray::Zip::from(dpost).and(post).for_each(|d, &p| {
                if p <= T::zero() {
                    *d = T::zero();
                }
            });
        }
    }
}

/// Saved activations from one [`EncoderNet::forward_full`] call.
pub struct Tape<T> {
    input: Array4<T>,
    stem_post: Array4<T>,
    stem_norm: Option<NormTape<T>>,
    stages: Vec<StageTape<T>>,
    final_dims: (usize, usize),
    pooled: Array2<T>,
    fc1_post: Array2<T>,
    z_raw: Array2<T>,
    z: Array2<T>,
    z_norms: Array1<T>,
}

impl<T> Tape<T> {
    /// Pooled feature vectors recorded during the forward pass.
    #[must_use]
    pub fn pooled(&self) -> &Array2<T> {
        &self.pooled
    }

    /// Projection vectors before unit normalization.
    #[must_use]
    pub fn raw_projections(&self) -> &Array2<T> {
        &self.z_raw
    }
}

struct StageTape<T> {
    down_post: Array4<T>,
    down_norm: Option<NormTape<T>>,
    blocks: Vec<BlockTape<T>>,
}

struct BlockTape<T> {
    c1_post: Array4<T>,
    out_post: Array4<T>,
    n1: Option<NormTape<T>>,
    n2: Option<NormTape<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct convolution: triple loop over output positions and taps.
    fn conv_reference(
        w: &Array4<f64>,
        b: &Array1<f64>,
        x: &Array4<f64>,
        stride: usize,
    ) -> Array4<f64> {
        let (bs, cin, h, ww) = x.dim();
        let cout = w.shape()[0];
        let ho = conv_out(h, stride);
        let wo = conv_out(ww, stride);
        let mut out = Array4::<f64>::zeros((bs, cout, ho, wo));
        for bi in 0..bs {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < ww {
                                        acc += w[[co, ci, ky, kx]]
                                            * x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        for stride in [1usize, 2] {
            let w = rand4((3, 2, 3, 3), 1);
            let b = Array1::from_vec(vec![0.1, -0.2, 0.3]);
            let x = rand4((2, 2, 5, 6), 2);
            let w2 = w.view().into_shape((3, 18)).unwrap();
            let got = conv_forward(&w2, &b.view(), &x, stride);
            let want = conv_reference(&w, &b, &x, stride);
            assert_eq!(got.dim(), want.dim());
            for (g, r) in got.iter().zip(want.iter()) {
                assert_relative_eq!(g, r, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for stride in [1usize, 2] {
            let w = rand4((2, 2, 3, 3), 3);
            let b = Array1::from_vec(vec![0.05, -0.05]);
            let x = rand4((1, 2, 4, 4), 4);
            let head = rand4((1, 2, conv_out(4, stride), conv_out(4, stride)), 5);
            let loss = |w: &Array4<f64>, b: &Array1<f64>, x: &Array4<f64>| {
                let w2v = w.view().into_shape((2, 18)).unwrap();
                let out = conv_forward(&w2v, &b.view(), x, stride);
                (&out * &head).sum()
            };
            let mut dw = Array2::<f64>::zeros((2, 18));
            let mut db = Array1::<f64>::zeros(2);
            let w2v = w.view().into_shape((2, 18)).unwrap();
            let dx = conv_backward(&w2v, &x, &head, stride, &mut dw, &mut db);
            let h = 1e-6;
            for idx in [[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
                let mut wp = w.clone();
                wp[idx] += h;
                let mut wm = w.clone();
                wm[idx] -= h;
                let num = (loss(&wp, &b, &x) - loss(&wm, &b, &x)) / (2.0 * h);
                let flat = ((idx[1] * 3 + idx[2]) * 3) + idx[3];
                assert_relative_eq!(dw[[idx[0], flat]], num, epsilon = 1e-7);
            }
            for idx in [[0, 0, 0, 0], [0, 1, 3, 3], [0, 0, 2, 1]] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let num = (loss(&w, &b, &xp) - loss(&w, &b, &xm)) / (2.0 * h);
                assert_relative_eq!(dx[idx], num, epsilon = 1e-7);
            }
            for ci in 0..2 {
                let mut bp = b.clone();
                bp[ci] += h;
                let mut bm = b.clone();
                bm[ci] -= h;
                let num = (loss(&w, &bp, &x) - loss(&w, &bm, &x)) / (2.0 * h);
                assert_relative_eq!(db[ci], num, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let head = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let loss = |w: &Array2<f64>, b: &Array1<f64>, x: &Array2<f64>| {
            (&linear_forward(&w.view(), &b.view(), &x.view()) * &head).sum()
        };
        let mut dw = Array2::<f64>::zeros((3, 4));
        let mut db = Array1::<f64>::zeros(3);
        let dx = linear_backward(&w.view(), &x.view(), &head.view(), &mut dw, &mut db);
        let h = 1e-6;
        for i in 0..3 {
            for k in 0..4 {
                let mut wp = w.clone();
                wp[[i, k]] += h;
                let mut wm = w.clone();
                wm[[i, k]] -= h;
                let num = (loss(&wp, &b, &x) - loss(&wm, &b, &x)) / (2.0 * h);
                assert_relative_eq!(dw[[i, k]], num, epsilon = 1e-8);
            }
        }
        for i in 0..2 {
            for k in 0..4 {
                let mut xp = x.clone();
                xp[[i, k]] += h;
                let mut xm = x.clone();
                xm[[i, k]] -= h;
                let num = (loss(&w, &b, &xp) - loss(&w, &b, &xm)) / (2.0 * h);
                assert_relative_eq!(dx[[i, k]], num, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn pooling_averages_and_spreads_back() {
        let x = rand4((2, 3, 4, 5), 8);
        let p = global_avg_pool(&x);
        assert_relative_eq!(p[[1, 2]], x.index_axis(Axis(0), 1).index_axis(Axis(0), 2).mean().unwrap(), epsilon = 1e-12);
        let dp = Array2::<f64>::ones((2, 3));
        let dx = global_avg_pool_backward(&dp.view(), 4, 5);
        assert_relative_eq!(dx[[0, 0, 0, 0]], 1.0 / 20.0, epsilon = 1e-12);
        assert_relative_eq!(dx.sum(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn group_sizes_fall_back_to_divisors() {
        assert_eq!(effective_groups(8, 8), 8);
        assert_eq!(effective_groups(6, 4), 3);
        assert_eq!(effective_groups(7, 8), 7);
        assert_eq!(effective_groups(5, 2), 1);
        assert_eq!(effective_groups(4, 0), 1);
    }

    #[test]
    fn group_norm_matches_two_pass_statistics() {
        let x = rand4((2, 4, 3, 5), 40);
        let gamma = Array1::from_vec(vec![1.5, -0.5, 2.0, 0.25]);
        let beta = Array1::from_vec(vec![0.1, 0.0, -0.3, 1.0]);
        let groups = 2;
        let (y, tape) = group_norm_forward(&x, groups, &gamma.view(), &beta.view());
        let per = 4 / groups;
        for bi in 0..2 {
            for g in 0..groups {
                let slab = x.slice(ndarray::s![bi, g * per..(g + 1) * per, .., ..]);
                let m = slab.len() as f64;
                let mu = slab.sum() / m;
                let var = slab.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                assert_relative_eq!(tape.inv_std[[bi, g]], is, epsilon = 1e-12);
                for ci in g * per..(g + 1) * per {
                    for yy in 0..3 {
                        for xx in 0..5 {
                            let want = gamma[ci] * (x[[bi, ci, yy, xx]] - mu) * is + beta[ci];
                            assert_relative_eq!(y[[bi, ci, yy, xx]], want, epsilon = 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let x = rand4((2, 4, 3, 3), 41);
        let gamma = Array1::from_vec(vec![1.2, 0.8, -0.6, 1.0]);
        let beta = Array1::from_vec(vec![0.2, -0.1, 0.0, 0.5]);
        let head = rand4((2, 4, 3, 3), 42);
        let loss = |x: &Array4<f64>, gamma: &Array1<f64>, beta: &Array1<f64>| {
            let (y, _) = group_norm_forward(x, 2, &gamma.view(), &beta.view());
            (&y * &head).sum()
        };
        let (_, tape) = group_norm_forward(&x, 2, &gamma.view(), &beta.view());
        let mut dgamma = Array1::<f64>::zeros(4);
        let mut dbeta = Array1::<f64>::zeros(4);
        let dx = group_norm_backward(&head, &tape, &gamma.view(), &mut dgamma, &mut dbeta);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 2, 1, 2], [0, 3, 2, 1], [1, 1, 0, 0]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
            assert_relative_eq!(dx[idx], num, epsilon = 1e-7);
        }
        for ci in 0..4 {
            let mut gp = gamma.clone();
            gp[ci] += h;
            let mut gm = gamma.clone();
            gm[ci] -= h;
            let num = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert_relative_eq!(dgamma[ci], num, epsilon = 1e-7);
            let mut bp = beta.clone();
            bp[ci] += h;
            let mut bm = beta.clone();
            bm[ci] -= h;
            let num = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert_relative_eq!(dbeta[ci], num, epsilon = 1e-7);
        }
    }

    #[test]
    fn desk_config_produces_declared_dims() {
        let cfg = EncoderConfig::desk();
        cfg.validate().unwrap();
        let mut store = ParamStore::<f64>::new();
        let net = EncoderNet::build(&cfg, 4, &mut store, 1).unwrap();
        let x = rand4((2, 4, 22, 22), 9);
        let h = net.forward_pooled(&store, &x).unwrap();
        assert_eq!(h.dim(), (2, 64));
        let z = net.project(&store, &h.view()).unwrap();
        assert_eq!(z.dim(), (2, 32));
    }

    #[test]
    fn forward_is_deterministic_and_content_dependent() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let net = EncoderNet::build(&cfg, 2, &mut store, 3).unwrap();
        let x = rand4((3, 2, 8, 8), 10);
        let a = net.forward_pooled(&store, &x).unwrap();
        let b = net.forward_pooled(&store, &x).unwrap();
        assert_eq!(a, b);
        let y = rand4((3, 2, 8, 8), 11);
        let c = net.forward_pooled(&store, &y).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identical_patches_share_features() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let net = EncoderNet::build(&cfg, 1, &mut store, 4).unwrap();
        let one = rand4((1, 1, 8, 8), 12);
        let mut x = Array4::<f64>::zeros((2, 1, 8, 8));
        x.index_axis_mut(Axis(0), 0).assign(&one.index_axis(Axis(0), 0));
        x.index_axis_mut(Axis(0), 1).assign(&one.index_axis(Axis(0), 0));
        let h = net.forward_pooled(&store, &x).unwrap();
        assert_eq!(h.row(0), h.row(1));
    }

    #[test]
    fn zero_parameters_collapse_features_to_the_bias() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let net = EncoderNet::build(&cfg, 2, &mut store, 5).unwrap();
        for id in 0..store.len() {
            store.value_mut(id).fill(0.0);
        }
        let x = rand4((4, 2, 8, 8), 13);
        let h = net.forward_pooled(&store, &x).unwrap();
        for row in h.outer_iter() {
            for &v in row.iter() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn pooled_features_match_between_forward_paths() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let net = EncoderNet::build(&cfg, 2, &mut store, 6).unwrap();
        let x = rand4((4, 2, 8, 8), 14);
        let direct = net.forward_pooled(&store, &x).unwrap();
        let (_, tape) = net.forward_full(&store, x).unwrap();
        assert_eq!(&direct, tape.pooled());
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::<f64>::new();
        let net = EncoderNet::build(&cfg, 2, &mut store, 7).unwrap();
        let x = rand4((1, 3, 8, 8), 15);
        assert!(net.forward_pooled(&store, &x).is_err());
        let small = rand4((1, 2, 1, 1), 16);
        assert!(net.forward_pooled(&store, &small).is_err());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = EncoderConfig {
            feature_dim: 63,
            ..EncoderConfig::desk()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            channels: vec![8, 16],
            ..EncoderConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        store.grads[id].fill(2.0);
        let hp = AdamParams {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamParams::default()
        };
        store.adam_step(&hp);
        // Bias-corrected first step is lr * g / (|g| + eps), i.e. lr * sign(g).
        assert_relative_eq!(store.value(id)[[0]], 1.0 - 0.1, epsilon = 1e-6);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[3]), 0.5));
        store.grads[id].fill(1.0);
        let hp = AdamParams {
            lr: 0.0,
            ..AdamParams::default()
        };
        for _ in 0..5 {
            store.adam_step(&hp);
        }
        for &v in store.value(id).iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn weight_decay_pulls_toward_zero_without_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let hp = AdamParams {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamParams::default()
        };
        for _ in 0..10 {
            store.zero_grads();
            store.adam_step(&hp);
        }
        assert!(store.value(id)[[0]] < 1.0);
    }
}
