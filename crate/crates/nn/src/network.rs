use crate::layers::{self, BatchNorm, BnStatGrad, BnStats, BnUpdate, BwdState, FwdState, Mode, Node, Tape};
use crate::params::{Grads, ParamStore};
use crate::{Error, Tensor};

/// A feed-forward layer graph together with its expected per-sample input shape.
#[derive(Clone, Debug)]
pub struct Network {
    nodes: Vec<Node>,
    input_shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Keep activations for a later [`Network::backward`].
    pub record: bool,
    /// Record batch mean/variance at every batch-norm input.
    pub capture_stats: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, record: false, capture_stats: false }
    }

    pub fn train() -> Self {
        Self { mode: Mode::Train, record: true, capture_stats: false }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub tape: Option<Tape>,
    pub captures: Option<Vec<BnStats>>,
    pub updates: Vec<BnUpdate>,
}

/// What a backward pass should produce besides the input gradient.
#[derive(Default)]
pub struct BackwardOptions<'a> {
    /// Accumulate parameter gradients here; `None` treats the network as frozen.
    pub grads: Option<&'a mut Grads>,
    /// Loss gradients w.r.t. captured batch statistics, one per batch-norm layer.
    pub stat_grads: Option<&'a [BnStatGrad]>,
    pub want_input_grad: bool,
}

impl Network {
    pub fn new(nodes: Vec<Node>, input_shape: Vec<usize>) -> Self {
        Self { nodes, input_shape }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = Vec::new();
        layers::visit_batch_norms(&self.nodes, &mut |bn| out.push(bn));
        out
    }

    pub fn forward(&self, store: &ParamStore, x: Tensor, opts: ForwardOptions) -> Result<ForwardOutput, Error> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects input [_, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let mut tape = opts.record.then(Tape::default);
        let mut st = FwdState {
            mode: opts.mode,
            tape: tape.as_mut(),
            captures: opts.capture_stats.then(Vec::new),
            updates: Vec::new(),
        };
        let output = layers::forward_seq(&self.nodes, store, x, &mut st)?;
        let FwdState { captures, updates, .. } = st;
        Ok(ForwardOutput { output, tape, captures, updates })
    }

    /// Backpropagates `dy` through a recorded pass. Returns the input gradient
    /// (all zeros when `want_input_grad` is false).
    pub fn backward(&self, store: &ParamStore, tape: Tape, dy: Tensor, opts: BackwardOptions) -> Tensor {
        let mut st = BwdState { tape, grads: opts.grads, stat_grads: opts.stat_grads };
        let dx = layers::backward_seq(&self.nodes, store, dy, &mut st, opts.want_input_grad);
        debug_assert!(st.tape.is_empty(), "tape not fully consumed");
        dx
    }
}

/// Folds training-mode batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, b) in store.buffers_mut()[u.mean_buffer].data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.buffers_mut()[u.var_buffer].data_mut().iter_mut().zip(&u.batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}
