use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::Tensor;

/// Index of a trainable tensor inside a [`ParamStore`].
pub type ParamId = usize;
/// Index of a non-trainable tensor (batch-norm running statistics).
pub type BufferId = usize;

/// Flat storage for every tensor a network owns.
///
/// Layers only hold indices into this store, so flattening, averaging and
/// checkpointing never need to walk the layer graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Tensor>,
    param_names: Vec<String>,
    buffers: Vec<Tensor>,
    buffer_names: Vec<String>,
}

impl ParamStore {
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id]
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor] {
        &mut self.buffers
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id]
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn num_buffer_values(&self) -> usize {
        self.buffers.iter().map(Tensor::len).sum()
    }

    /// Parameters followed by buffers, in registration order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params() + self.num_buffer_values());
        for t in self.params.iter().chain(&self.buffers) {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, flat: &[f32]) -> Result<(), crate::Error> {
        let expected = self.num_params() + self.num_buffer_values();
        if flat.len() != expected {
            return Err(crate::Error::FlatLength { expected, got: flat.len() });
        }
        let mut off = 0;
        for t in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Same tensor names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.param_names == other.param_names
            && self.buffer_names == other.buffer_names
            && self.params.iter().zip(&other.params).all(|(a, b)| a.shape() == b.shape())
            && self.buffers.iter().zip(&other.buffers).all(|(a, b)| a.shape() == b.shape())
    }
}

/// Per-parameter gradient accumulators, parallel to [`ParamStore::params`].
#[derive(Clone, Debug)]
pub struct Grads(Vec<Tensor>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id]
    }

    /// Simultaneous mutable access to a weight and its optional bias.
    pub fn weight_bias_mut(&mut self, w: ParamId, b: Option<ParamId>) -> (&mut Tensor, Option<&mut Tensor>) {
        match b {
            None => (&mut self.0[w], None),
            Some(b) => {
                assert_ne!(w, b);
                if w < b {
                    let (lo, hi) = self.0.split_at_mut(b);
                    (&mut lo[w], Some(&mut hi[0]))
                } else {
                    let (lo, hi) = self.0.split_at_mut(w);
                    (&mut hi[0], Some(&mut lo[b]))
                }
            }
        }
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.0
    }

    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.data_mut().fill(0.0);
        }
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Tensor::all_finite)
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He/Kaiming normal with the given fan-in.
    HeNormal { fan_in: usize },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense layers.
    FanInUniform { fan_in: usize },
}

/// Registers tensors into a [`ParamStore`] while a network is being built.
pub struct ParamBuilder<'r, R: Rng> {
    store: ParamStore,
    rng: &'r mut R,
    prefix: Vec<String>,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { store: ParamStore::default(), rng, prefix: Vec::new() }
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn qualified(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f32).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
        };
        self.store.params.push(Tensor::new(shape.to_vec(), data));
        self.store.param_names.push(self.qualified(name));
        self.store.params.len() - 1
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> BufferId {
        self.store.buffers.push(Tensor::full(shape.to_vec(), value));
        self.store.buffer_names.push(self.qualified(name));
        self.store.buffers.len() - 1
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}
