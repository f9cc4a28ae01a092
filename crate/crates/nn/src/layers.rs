//! Layer graph with explicit forward and backward passes.
//!
//! A forward pass pushes one [`Cache`] entry per layer onto a [`Tape`];
//! the backward pass pops them in reverse. Layers themselves are immutable
//! descriptors holding indices into a [`ParamStore`].

use crate::ops::{self, ConvGeom};
use crate::params::{BufferId, Grads, ParamId, ParamStore};
use crate::{Error, Tensor};

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with batch statistics and report running-stat updates.
    Train,
    /// Normalise with the stored running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Batch normalisation over the trailing (channel) axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f32,
    pub momentum: f32,
}

/// `post(body(pre(x)) + shortcut(s))`, where `s` is `pre(x)` when
/// `shortcut_from_pre` is set and `x` otherwise. An empty shortcut is the
/// identity.
#[derive(Clone, Debug)]
pub struct Residual {
    pub pre: Vec<Node>,
    pub body: Vec<Node>,
    pub shortcut: Vec<Node>,
    pub shortcut_from_pre: bool,
    pub post: Vec<Node>,
}

#[derive(Clone, Debug)]
pub enum Node {
    Conv(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
    LeakyRelu(f32),
    Tanh,
    MaxPool2,
    GlobalAvgPool,
    Upsample2,
    Flatten,
    /// Reshape each sample to the given (non-batch) shape.
    Reshape(Vec<usize>),
    Residual(Box<Residual>),
}

/// Batch mean and (biased) variance observed at one batch-norm input.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Gradient of some loss with respect to one captured [`BnStats`].
#[derive(Clone, Debug, PartialEq)]
pub struct BnStatGrad {
    pub d_mean: Vec<f32>,
    pub d_var: Vec<f32>,
}

/// Running-statistic update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub momentum: f32,
    pub batch_mean: Vec<f32>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f32>,
}

#[derive(Debug)]
enum Cache {
    Conv { input: Tensor },
    Linear { input: Tensor },
    BatchNorm(BnCache),
    Relu { output: Vec<f32> },
    LeakyRelu { input: Vec<f32> },
    Tanh { output: Vec<f32> },
    MaxPool { argmax: Vec<u32>, in_shape: Vec<usize> },
    GlobalAvgPool { in_shape: Vec<usize> },
    Upsample { in_shape: Vec<usize> },
    Reshape { in_shape: Vec<usize> },
}

#[derive(Debug)]
struct BnCache {
    shape: Vec<usize>,
    train: bool,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    capture: Option<(usize, Vec<f32>)>,
}

/// Saved activations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Cache>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub(crate) struct FwdState<'a> {
    pub mode: Mode,
    pub tape: Option<&'a mut Tape>,
    pub captures: Option<Vec<BnStats>>,
    pub updates: Vec<BnUpdate>,
}

pub(crate) struct BwdState<'a> {
    pub tape: Tape,
    pub grads: Option<&'a mut Grads>,
    pub stat_grads: Option<&'a [BnStatGrad]>,
}

fn expect_rank(t: &Tensor, rank: usize, layer: &'static str) -> Result<(), Error> {
    if t.shape().len() != rank {
        return Err(Error::Shape(format!(
            "{layer} expects rank-{rank} input, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl Conv2d {
    fn geom(&self, x: &Tensor) -> Result<ConvGeom, Error> {
        expect_rank(x, 4, "conv2d")?;
        let s = x.shape();
        if s[3] != self.c_in {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got shape {:?}",
                self.c_in, s
            )));
        }
        if s[1] + 2 * self.pad < self.kernel || s[2] + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!("conv2d input {s:?} smaller than kernel")));
        }
        Ok(ConvGeom {
            h: s[1],
            w: s[2],
            c_in: self.c_in,
            c_out: self.c_out,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        })
    }
}

/// Per-channel values repeated across a span of whole rows, so that
/// row-major NHWC loops become flat, vectorizable zips.
fn tile(v: &[f32]) -> Vec<f32> {
    let reps = TILE_TARGET.div_ceil(v.len()).max(1);
    v.iter().copied().cycle().take(v.len() * reps).collect()
}

const TILE_TARGET: usize = 256;
const FLUSH_CHUNKS: usize = 64;

/// Per-channel sums of `f(x)` over rows of width `c`, in f64.
fn channel_sums(data: &[f32], c: usize, f: impl Fn(f32) -> f32, offsets: &[f32]) -> Vec<f64> {
    let width = c * TILE_TARGET.div_ceil(c).max(1);
    let mut acc = vec![0.0f32; width];
    let mut total = vec![0.0f64; c];
    let flush = |acc: &mut [f32], total: &mut [f64]| {
        for (i, a) in acc.iter_mut().enumerate() {
            total[i % c] += *a as f64;
            *a = 0.0;
        }
    };
    for (n, chunk) in data.chunks(width).enumerate() {
        for ((a, &x), &o) in acc.iter_mut().zip(chunk).zip(offsets) {
            *a += f(x - o);
        }
        if (n + 1) % FLUSH_CHUNKS == 0 {
            flush(&mut acc, &mut total);
        }
    }
    flush(&mut acc, &mut total);
    total
}

/// Per-channel sums of `a * b` over rows of width `c`, in f64.
fn channel_dot(a: &[f32], b: &[f32], c: usize) -> Vec<f64> {
    let width = c * TILE_TARGET.div_ceil(c).max(1);
    let mut acc = vec![0.0f32; width];
    let mut total = vec![0.0f64; c];
    let flush = |acc: &mut [f32], total: &mut [f64]| {
        for (i, v) in acc.iter_mut().enumerate() {
            total[i % c] += *v as f64;
            *v = 0.0;
        }
    };
    for (n, (ca, cb)) in a.chunks(width).zip(b.chunks(width)).enumerate() {
        for ((s, &x), &y) in acc.iter_mut().zip(ca).zip(cb) {
            *s += x * y;
        }
        if (n + 1) % FLUSH_CHUNKS == 0 {
            flush(&mut acc, &mut total);
        }
    }
    flush(&mut acc, &mut total);
    total
}

impl BatchNorm {
    fn forward(&self, store: &ParamStore, x: Tensor, st: &mut FwdState) -> Result<Tensor, Error> {
        let c = self.channels;
        if x.shape().last() != Some(&c) {
            return Err(Error::Shape(format!(
                "batch norm expects {c} channels, got shape {:?}",
                x.shape()
            )));
        }
        let count = x.len() / c;
        let capturing = st.captures.is_some();
        let need_batch_stats = st.mode == Mode::Train || capturing;

        let (mut bmean, mut bvar) = (vec![0.0f32; c], vec![0.0f32; c]);
        if need_batch_stats && count > 0 {
            let zeros = tile(&vec![0.0; c]);
            let sums = channel_sums(x.data(), c, |v| v, &zeros);
            let mean64: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
            // Shift by the f32-rounded mean; the remaining offset is folded back in f64.
            bmean = mean64.iter().map(|&m| m as f32).collect();
            let shifted = tile(&bmean);
            let sq = channel_sums(x.data(), c, |d| d * d, &shifted);
            let lin = channel_sums(x.data(), c, |d| d, &shifted);
            for ch in 0..c {
                let d = lin[ch] / count as f64;
                bvar[ch] = (sq[ch] / count as f64 - d * d).max(0.0) as f32;
            }
        }

        let (mean, var): (&[f32], &[f32]) = match st.mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::Shape(
                        "batch norm in training mode needs more than one value per channel".into(),
                    ));
                }
                let unbiased = count as f32 / (count - 1) as f32;
                st.updates.push(BnUpdate {
                    mean_buffer: self.running_mean,
                    var_buffer: self.running_var,
                    momentum: self.momentum,
                    batch_mean: bmean.clone(),
                    batch_var: bvar.iter().map(|v| v * unbiased).collect(),
                });
                (&bmean, &bvar)
            }
            Mode::Eval => (
                store.buffer(self.running_mean).data(),
                store.buffer(self.running_var).data(),
            ),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let gamma = self.gamma.map(|g| store.param(g).data());
        let beta = self.beta.map(|b| store.param(b).data());
        let scale: Vec<f32> = (0..c).map(|ch| gamma.map_or(1.0, |g| g[ch]) * inv_std[ch]).collect();
        let shift: Vec<f32> = (0..c).map(|ch| beta.map_or(0.0, |b| b[ch]) - mean[ch] * scale[ch]).collect();
        let shape = x.shape().to_vec();
        let recording = st.tape.is_some();

        let xhat = if recording {
            let (tm, ti) = (tile(mean), tile(&inv_std));
            let mut h = x.data().to_vec();
            for chunk in h.chunks_mut(tm.len()) {
                for ((v, m), s) in chunk.iter_mut().zip(&tm).zip(&ti) {
                    *v = (*v - m) * s;
                }
            }
            h
        } else {
            Vec::new()
        };
        let capture_centered = if capturing && recording {
            let tm = tile(&bmean);
            let mut d = x.data().to_vec();
            for chunk in d.chunks_mut(tm.len()) {
                for (v, m) in chunk.iter_mut().zip(&tm) {
                    *v -= m;
                }
            }
            Some(d)
        } else {
            None
        };

        let mut y = x.into_data();
        let (ts, tb) = (tile(&scale), tile(&shift));
        for chunk in y.chunks_mut(ts.len()) {
            for ((v, s), b) in chunk.iter_mut().zip(&ts).zip(&tb) {
                *v = *v * s + b;
            }
        }

        let capture_idx = st.captures.as_mut().map(|caps| {
            caps.push(BnStats { mean: bmean.clone(), var: bvar.clone() });
            caps.len() - 1
        });
        if let Some(tape) = st.tape.as_deref_mut() {
            tape.entries.push(Cache::BatchNorm(BnCache {
                shape: shape.clone(),
                train: st.mode == Mode::Train,
                xhat,
                inv_std,
                capture: capture_idx.zip(capture_centered),
            }));
        }
        Ok(Tensor::new(shape, y))
    }

    fn backward(&self, store: &ParamStore, g: Tensor, cache: BnCache, st: &mut BwdState) -> Tensor {
        let c = self.channels;
        let count = g.len() / c;
        let gamma: Vec<f32> = match self.gamma {
            Some(id) => store.param(id).data().to_vec(),
            None => vec![1.0; c],
        };
        let dy = g.into_data();
        let need_sums = st.grads.is_some() || cache.train;
        let (sum_dy, sum_dyh) = if need_sums {
            let zeros = tile(&vec![0.0; c]);
            (channel_sums(&dy, c, |v| v, &zeros), channel_dot(&dy, &cache.xhat, c))
        } else {
            (Vec::new(), Vec::new())
        };

        if let Some(grads) = st.grads.as_deref_mut() {
            if let Some(gid) = self.gamma {
                for (d, s) in grads.get_mut(gid).data_mut().iter_mut().zip(&sum_dyh) {
                    *d += *s as f32;
                }
            }
            if let Some(bid) = self.beta {
                for (d, s) in grads.get_mut(bid).data_mut().iter_mut().zip(&sum_dy) {
                    *d += *s as f32;
                }
            }
        }

        let mut dx = dy;
        let scale: Vec<f32> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch]).collect();
        let ts = tile(&scale);
        if cache.train {
            // Gradient through the batch statistics.
            let inv_n = 1.0 / count as f64;
            let a: Vec<f32> = (0..c).map(|ch| (sum_dy[ch] * inv_n) as f32).collect();
            let bcoef: Vec<f32> = (0..c).map(|ch| (sum_dyh[ch] * inv_n) as f32).collect();
            let (ta, tb) = (tile(&a), tile(&bcoef));
            for (chunk, hchunk) in dx.chunks_mut(ts.len()).zip(cache.xhat.chunks(ts.len())) {
                for ((((v, h), s), a), b) in chunk.iter_mut().zip(hchunk).zip(&ts).zip(&ta).zip(&tb) {
                    *v = s * (*v - a - h * b);
                }
            }
        } else {
            for chunk in dx.chunks_mut(ts.len()) {
                for (v, s) in chunk.iter_mut().zip(&ts) {
                    *v *= s;
                }
            }
        }

        if let (Some((idx, centered)), Some(stat_grads)) = (&cache.capture, st.stat_grads) {
            let sg = &stat_grads[*idx];
            let inv_n = 1.0 / count as f32;
            let dm: Vec<f32> = sg.d_mean.iter().map(|v| v * inv_n).collect();
            let dv: Vec<f32> = sg.d_var.iter().map(|v| 2.0 * v * inv_n).collect();
            let (tm, tv) = (tile(&dm), tile(&dv));
            for (chunk, cchunk) in dx.chunks_mut(tm.len()).zip(centered.chunks(tm.len())) {
                for (((v, d), m), w) in chunk.iter_mut().zip(cchunk).zip(&tm).zip(&tv) {
                    *v += m + w * d;
                }
            }
        }
        Tensor::new(cache.shape, dx)
    }
}

impl Node {
    pub(crate) fn forward(&self, store: &ParamStore, x: Tensor, st: &mut FwdState) -> Result<Tensor, Error> {
        let record = st.tape.is_some();
        let (out, cache) = match self {
            Node::Conv(conv) => {
                let g = conv.geom(&x)?;
                let n = x.batch();
                let (oh, ow) = g.out_hw();
                let y = ops::conv2d_forward(
                    x.data(),
                    n,
                    &g,
                    store.param(conv.weight).data(),
                    conv.bias.map(|b| store.param(b).data()),
                );
                let y = Tensor::new([n, oh, ow, conv.c_out], y);
                (y, record.then_some(Cache::Conv { input: x }))
            }
            Node::Linear(lin) => {
                expect_rank(&x, 2, "linear")?;
                if x.shape()[1] != lin.in_features {
                    return Err(Error::Shape(format!(
                        "linear expects {} features, got shape {:?}",
                        lin.in_features,
                        x.shape()
                    )));
                }
                let n = x.batch();
                let (i, o) = (lin.in_features, lin.out_features);
                let mut y = vec![0.0; n * o];
                if let Some(b) = lin.bias {
                    for row in y.chunks_exact_mut(o) {
                        row.copy_from_slice(store.param(b).data());
                    }
                }
                let w = store.param(lin.weight).data();
                ops::gemm(n, i, o, x.data(), i, 1, w, 1, i, 1.0, &mut y, o, 1);
                (Tensor::new([n, o], y), record.then_some(Cache::Linear { input: x }))
            }
            Node::BatchNorm(bn) => return bn.forward(store, x, st),
            Node::Relu => {
                let shape = x.shape().to_vec();
                let mut y = x.into_data();
                for v in &mut y {
                    *v = v.max(0.0);
                }
                let cache = record.then(|| Cache::Relu { output: y.clone() });
                (Tensor::new(shape, y), cache)
            }
            Node::LeakyRelu(slope) => {
                let shape = x.shape().to_vec();
                let input = x.into_data();
                let y: Vec<f32> = input.iter().map(|&v| if v > 0.0 { v } else { v * slope }).collect();
                (Tensor::new(shape, y), record.then_some(Cache::LeakyRelu { input }))
            }
            Node::Tanh => {
                let shape = x.shape().to_vec();
                let y: Vec<f32> = x.data().iter().map(|v| v.tanh()).collect();
                let cache = record.then(|| Cache::Tanh { output: y.clone() });
                (Tensor::new(shape, y), cache)
            }
            Node::MaxPool2 => {
                expect_rank(&x, 4, "maxpool")?;
                let s = x.shape().to_vec();
                let (y, argmax) = ops::maxpool2_forward(x.data(), s[0], s[1], s[2], s[3]);
                let y = Tensor::new([s[0], s[1] / 2, s[2] / 2, s[3]], y);
                (y, record.then_some(Cache::MaxPool { argmax, in_shape: s }))
            }
            Node::GlobalAvgPool => {
                expect_rank(&x, 4, "global average pool")?;
                let s = x.shape().to_vec();
                let y = ops::global_avgpool_forward(x.data(), s[0], s[1] * s[2], s[3]);
                (Tensor::new([s[0], s[3]], y), record.then_some(Cache::GlobalAvgPool { in_shape: s }))
            }
            Node::Upsample2 => {
                expect_rank(&x, 4, "upsample")?;
                let s = x.shape().to_vec();
                let y = ops::upsample2_forward(x.data(), s[0], s[1], s[2], s[3]);
                let y = Tensor::new([s[0], 2 * s[1], 2 * s[2], s[3]], y);
                (y, record.then_some(Cache::Upsample { in_shape: s }))
            }
            Node::Flatten => {
                let s = x.shape().to_vec();
                let n = x.batch();
                let y = x.reshape([n, s[1..].iter().product()]);
                (y, record.then_some(Cache::Reshape { in_shape: s }))
            }
            Node::Reshape(to) => {
                let s = x.shape().to_vec();
                if to.iter().product::<usize>() != x.row_len() {
                    return Err(Error::Shape(format!("cannot reshape {s:?} to [_, {to:?}]")));
                }
                let mut shape = vec![x.batch()];
                shape.extend_from_slice(to);
                (x.reshape(shape), record.then_some(Cache::Reshape { in_shape: s }))
            }
            Node::Residual(res) => return res.forward(store, x, st),
        };
        if let (Some(tape), Some(cache)) = (st.tape.as_deref_mut(), cache) {
            tape.entries.push(cache);
        }
        Ok(out)
    }

    pub(crate) fn backward(&self, store: &ParamStore, g: Tensor, st: &mut BwdState, want_dx: bool) -> Tensor {
        if let Node::Residual(res) = self {
            return res.backward(store, g, st);
        }
        let cache = st.tape.entries.pop().expect("tape exhausted during backward");
        match (self, cache) {
            (Node::Conv(conv), Cache::Conv { input }) => {
                let geom = conv.geom(&input).expect("shape validated in forward");
                let n = input.batch();
                let w = store.param(conv.weight).data();
                let dx = match st.grads.as_deref_mut() {
                    Some(grads) => {
                        let (dw, db) = grads.weight_bias_mut(conv.weight, conv.bias);
                        ops::conv2d_backward(
                            input.data(),
                            n,
                            &geom,
                            w,
                            g.data(),
                            Some(dw.data_mut()),
                            db.map(|t| t.data_mut()),
                            want_dx,
                        )
                    }
                    None => ops::conv2d_backward(input.data(), n, &geom, w, g.data(), None, None, want_dx),
                };
                match dx {
                    Some(dx) => Tensor::new(input.shape().to_vec(), dx),
                    None => Tensor::zeros(input.shape().to_vec()),
                }
            }
            (Node::Linear(lin), Cache::Linear { input }) => {
                let n = input.batch();
                let (i, o) = (lin.in_features, lin.out_features);
                if let Some(grads) = st.grads.as_deref_mut() {
                    let dw = grads.get_mut(lin.weight).data_mut();
                    // dW[o, i] += dY^T[o, n] * X[n, i]
                    ops::gemm(o, n, i, g.data(), 1, o, input.data(), i, 1, 1.0, dw, i, 1);
                    if let Some(b) = lin.bias {
                        let db = grads.get_mut(b).data_mut();
                        for row in g.data().chunks_exact(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
                if !want_dx {
                    return Tensor::zeros(input.shape().to_vec());
                }
                let mut dx = vec![0.0; n * i];
                let w = store.param(lin.weight).data();
                ops::gemm(n, o, i, g.data(), o, 1, w, i, 1, 0.0, &mut dx, i, 1);
                Tensor::new([n, i], dx)
            }
            (Node::BatchNorm(bn), Cache::BatchNorm(cache)) => bn.backward(store, g, cache, st),
            (Node::Relu, Cache::Relu { output }) => {
                let shape = g.shape().to_vec();
                let mut d = g.into_data();
                for (v, o) in d.iter_mut().zip(&output) {
                    if *o <= 0.0 {
                        *v = 0.0;
                    }
                }
                Tensor::new(shape, d)
            }
            (Node::LeakyRelu(slope), Cache::LeakyRelu { input }) => {
                let shape = g.shape().to_vec();
                let mut d = g.into_data();
                for (v, x) in d.iter_mut().zip(&input) {
                    if *x <= 0.0 {
                        *v *= slope;
                    }
                }
                Tensor::new(shape, d)
            }
            (Node::Tanh, Cache::Tanh { output }) => {
                let shape = g.shape().to_vec();
                let mut d = g.into_data();
                for (v, y) in d.iter_mut().zip(&output) {
                    *v *= 1.0 - y * y;
                }
                Tensor::new(shape, d)
            }
            (Node::MaxPool2, Cache::MaxPool { argmax, in_shape }) => {
                let len = in_shape.iter().product();
                Tensor::new(in_shape, ops::maxpool2_backward(g.data(), &argmax, len))
            }
            (Node::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
                let dx = ops::global_avgpool_backward(g.data(), in_shape[0], in_shape[1] * in_shape[2], in_shape[3]);
                Tensor::new(in_shape, dx)
            }
            (Node::Upsample2, Cache::Upsample { in_shape }) => {
                let dx = ops::upsample2_backward(g.data(), in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                Tensor::new(in_shape, dx)
            }
            (Node::Flatten | Node::Reshape(_), Cache::Reshape { in_shape }) => g.reshape(in_shape),
            (node, cache) => panic!("tape out of sync: {node:?} popped {cache:?}"),
        }
    }
}

impl Residual {
    fn forward(&self, store: &ParamStore, x: Tensor, st: &mut FwdState) -> Result<Tensor, Error> {
        let pre_out = forward_seq(&self.pre, store, x.clone(), st)?;
        let short_in = if self.shortcut_from_pre { pre_out.clone() } else { x };
        let mut body_out = forward_seq(&self.body, store, pre_out, st)?;
        let short_out = forward_seq(&self.shortcut, store, short_in, st)?;
        if body_out.shape() != short_out.shape() {
            return Err(Error::Shape(format!(
                "residual branches disagree: {:?} vs {:?}",
                body_out.shape(),
                short_out.shape()
            )));
        }
        body_out.add_assign(&short_out);
        forward_seq(&self.post, store, body_out, st)
    }

    fn backward(&self, store: &ParamStore, g: Tensor, st: &mut BwdState) -> Tensor {
        let g = backward_seq(&self.post, store, g, st, true);
        let g_short = backward_seq(&self.shortcut, store, g.clone(), st, true);
        let mut g_pre = backward_seq(&self.body, store, g, st, true);
        if self.shortcut_from_pre {
            g_pre.add_assign(&g_short);
            backward_seq(&self.pre, store, g_pre, st, true)
        } else {
            let mut g_in = backward_seq(&self.pre, store, g_pre, st, true);
            g_in.add_assign(&g_short);
            g_in
        }
    }
}

pub(crate) fn forward_seq(nodes: &[Node], store: &ParamStore, mut x: Tensor, st: &mut FwdState) -> Result<Tensor, Error> {
    for node in nodes {
        x = node.forward(store, x, st)?;
    }
    Ok(x)
}

/// Runs the nodes' backward passes in reverse. The first node skips its
/// input gradient when `want_dx` is false.
pub(crate) fn backward_seq(nodes: &[Node], store: &ParamStore, mut g: Tensor, st: &mut BwdState, want_dx: bool) -> Tensor {
    for (i, node) in nodes.iter().enumerate().rev() {
        g = node.backward(store, g, st, want_dx || i > 0);
    }
    g
}

/// Visits every batch-norm layer in forward order.
pub fn visit_batch_norms<'a>(nodes: &'a [Node], f: &mut dyn FnMut(&'a BatchNorm)) {
    for node in nodes {
        match node {
            Node::BatchNorm(bn) => f(bn),
            Node::Residual(r) => {
                visit_batch_norms(&r.pre, f);
                visit_batch_norms(&r.body, f);
                visit_batch_norms(&r.shortcut, f);
                visit_batch_norms(&r.post, f);
            }
            _ => {}
        }
    }
}
