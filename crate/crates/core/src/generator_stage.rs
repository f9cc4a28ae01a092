//! Training the generator against the frozen ensemble and student.
//!
//! The generator objective is `l_ce + lambda1 * l_bn + lambda2 * l_div` on
//! `x̂ = G(z)`. Gradients flow from every loss term back through `x̂` into the
//! generator only; client and student parameters are read, never written.

use fedsyn_nn::{
    apply_bn_updates, Adam, BackwardOptions, BnStatGrad, BnUpdate, ForwardOptions, Grads, Mode, Tensor,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{combine_logits, EnsembleBundle, LogitWeighting};
use crate::error::{FedSynError, Result};
use crate::losses;
use crate::models::{BatchStatsCapture, ClientModel, GeneratorModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for GenLossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5 }
    }
}

impl GenLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FedSynError::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Norm applied to each statistic difference in the batch-norm loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnNorm {
    /// Euclidean norm.
    #[default]
    L2,
    /// Squared Euclidean norm.
    Squared,
}

/// Everything besides the models that shapes the generator loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLossOptions {
    pub weights: GenLossWeights,
    pub bn_norm: BnNorm,
    pub kl_temperature: f64,
    pub logit_weighting: LogitWeighting,
}

impl Default for GenLossOptions {
    fn default() -> Self {
        Self {
            weights: GenLossWeights::default(),
            bn_norm: BnNorm::L2,
            kl_temperature: 1.0,
            logit_weighting: LogitWeighting::Uniform,
        }
    }
}

/// Noise, target labels and the images generated from that noise.
#[derive(Clone, Debug)]
pub struct SyntheticBatch {
    pub z: Tensor,
    pub y: Vec<usize>,
    pub x: Tensor,
}

impl SyntheticBatch {
    pub fn one_hot(&self, num_classes: usize) -> Tensor {
        one_hot(&self.y, num_classes)
    }
}

pub fn one_hot(y: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros([y.len(), num_classes]);
    for (i, &c) in y.iter().enumerate() {
        t.row_mut(i)[c] = 1.0;
    }
    t
}

/// `z ~ N(0, I)` of shape `[b, noise_dim]` and labels uniform over classes.
pub fn sample_noise_and_labels(
    b: usize,
    noise_dim: usize,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if b == 0 || noise_dim == 0 || num_classes == 0 {
        return Err(FedSynError::InvalidArgument(format!(
            "need positive batch, noise and class counts, got ({b}, {noise_dim}, {num_classes})"
        )));
    }
    let z: Vec<f32> = (0..b * noise_dim).map(|_| rng.sample(StandardNormal)).collect();
    let y = (0..b).map(|_| rng.random_range(0..num_classes)).collect();
    Ok((Tensor::new([b, noise_dim], z), y))
}

/// Mean cross-entropy of `softmax(avg_logits)` against the sampled labels.
pub fn ce_gen_loss(avg_logits: &Tensor, y: &[usize]) -> Result<f64> {
    Ok(losses::cross_entropy(avg_logits, y)?.0)
}

/// `(1/m) sum_k sum_l ||mu_l - mu_kl|| + ||var_l - var_kl||` between the
/// statistics captured in each client and that client's running statistics.
pub fn bn_loss(captures: &[BatchStatsCapture], bundle: &EnsembleBundle, norm: BnNorm) -> Result<f64> {
    Ok(bn_loss_and_grad(captures, bundle.clients(), norm)?.0)
}

/// The batch-norm loss and its gradient w.r.t. every captured statistic.
pub(crate) fn bn_loss_and_grad(
    captures: &[BatchStatsCapture],
    clients: &[ClientModel],
    norm: BnNorm,
) -> Result<(f64, Vec<Vec<BnStatGrad>>)> {
    if captures.len() != clients.len() {
        return Err(FedSynError::InvalidArgument(format!(
            "{} captures for {} clients",
            captures.len(),
            clients.len()
        )));
    }
    let m = clients.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(clients.len());
    for (k, (cap, client)) in captures.iter().zip(clients).enumerate() {
        let stored = client.bn_layers();
        if cap.len() != stored.len() {
            return Err(FedSynError::InvalidArgument(format!(
                "client {k}: {} captured layers but {} batch norms",
                cap.len(),
                stored.len()
            )));
        }
        let mut g = Vec::with_capacity(cap.len());
        for (l, (s, (mu, var))) in cap.iter().zip(stored).enumerate() {
            if s.mean.len() != mu.len() || s.var.len() != var.len() {
                return Err(FedSynError::InvalidArgument(format!("client {k} layer {l}: statistic length mismatch")));
            }
            let (lm, dm) = diff_norm(&s.mean, mu, norm, m);
            let (lv, dv) = diff_norm(&s.var, var, norm, m);
            total += lm + lv;
            g.push(BnStatGrad { d_mean: dm, d_var: dv });
        }
        grads.push(g);
    }
    Ok((total / m, grads))
}

/// `||a - b||` (or its square) and the gradient w.r.t. `a`, scaled by `1/m`.
fn diff_norm(a: &[f32], b: &[f32], norm: BnNorm, m: f64) -> (f64, Vec<f32>) {
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64).collect();
    let sq: f64 = d.iter().map(|v| v * v).sum();
    match norm {
        BnNorm::Squared => (sq, d.iter().map(|v| (2.0 * v / m) as f32).collect()),
        BnNorm::L2 => {
            let n = sq.sqrt();
            let g = if n > 0.0 { d.iter().map(|v| (v / (n * m)) as f32).collect() } else { vec![0.0; d.len()] };
            (n, g)
        }
    }
}

/// `-(1/b) sum_i w_i KL(softmax(t_i) || softmax(s_i))` where `w_i` is 1 when
/// teacher and student disagree in argmax.
pub fn div_loss(avg_logits: &Tensor, student_logits: &Tensor) -> Result<f64> {
    Ok(losses::masked_neg_kl(avg_logits, student_logits, 1.0)?.0)
}

/// Loss terms of one generator evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenLossTerms {
    pub total: f64,
    pub ce: f64,
    pub bn: f64,
    pub div: f64,
}

/// Result of [`gen_loss`].
#[derive(Debug)]
pub struct GenLossOutput {
    pub terms: GenLossTerms,
    /// Gradient w.r.t. the generator parameters.
    pub grads: Grads,
    /// The generated batch this loss was computed on.
    pub x: Tensor,
    /// Running-statistic updates from the generator's own batch norms.
    pub updates: Vec<BnUpdate>,
}

/// Regenerates `x̂ = G(z)` and evaluates the generator loss with its gradient.
pub fn gen_loss(
    gen: &GeneratorModel,
    z: &Tensor,
    y: &[usize],
    bundle: &EnsembleBundle,
    student: &ClientModel,
    opts: &GenLossOptions,
) -> Result<GenLossOutput> {
    opts.weights.validate()?;
    gen.check_noise(z)?;
    if z.batch() != y.len() || z.batch() == 0 {
        return Err(FedSynError::InvalidArgument(format!("{} noise rows for {} labels", z.batch(), y.len())));
    }
    let GenLossWeights { lambda1, lambda2 } = opts.weights;
    let tau = opts.kl_temperature;
    let gout = gen
        .network()
        .forward(gen.store(), z.clone(), ForwardOptions { mode: Mode::Train, record: true, capture_stats: false })?;
    let x = gout.output;

    let record = ForwardOptions { mode: Mode::Eval, record: true, capture_stats: true };
    let mut logits = Vec::with_capacity(bundle.len());
    let mut tapes = Vec::with_capacity(bundle.len());
    let mut captures = Vec::with_capacity(bundle.len());
    for c in bundle.clients() {
        let out = c.network().forward(c.store(), x.clone(), record)?;
        logits.push(out.output);
        tapes.push(out.tape.expect("recorded"));
        captures.push(out.captures.expect("captured"));
    }
    let weights = bundle.weights(opts.logit_weighting);
    let avg = combine_logits(&logits, &weights);
    losses::check_finite(&avg, "ensemble logits")?;

    let (ce, d_ce) = losses::cross_entropy(&avg, y)?;
    let (bn, stat_grads) = bn_loss_and_grad(&captures, bundle.clients(), opts.bn_norm)?;
    let sout = student.network().forward(
        student.store(),
        x.clone(),
        ForwardOptions { mode: Mode::Eval, record: lambda2 > 0.0, capture_stats: false },
    )?;
    let (div, d_div_t, d_div_s) = losses::masked_neg_kl(&avg, &sout.output, tau)?;
    let total = ce + lambda1 * bn + lambda2 * div;
    if !total.is_finite() {
        return Err(FedSynError::NonFinite(format!("generator loss (ce {ce}, bn {bn}, div {div})")));
    }

    let mut d_avg = d_ce;
    if lambda2 > 0.0 {
        for (a, b) in d_avg.data_mut().iter_mut().zip(d_div_t.data()) {
            *a += (lambda2 * *b as f64) as f32;
        }
    }
    let scaled_stats: Vec<Vec<BnStatGrad>> = stat_grads
        .into_iter()
        .map(|layers| {
            layers
                .into_iter()
                .map(|g| BnStatGrad {
                    d_mean: g.d_mean.iter().map(|v| (lambda1 * *v as f64) as f32).collect(),
                    d_var: g.d_var.iter().map(|v| (lambda1 * *v as f64) as f32).collect(),
                })
                .collect()
        })
        .collect();

    let mut dx = Tensor::zeros(x.shape().to_vec());
    for (k, (c, tape)) in bundle.clients().iter().zip(tapes).enumerate() {
        let mut dy = d_avg.clone();
        dy.scale(weights[k] as f32);
        let g = c.network().backward(
            c.store(),
            tape,
            dy,
            BackwardOptions {
                grads: None,
                stat_grads: (lambda1 > 0.0).then(|| scaled_stats[k].as_slice()),
                want_input_grad: true,
            },
        );
        dx.add_assign(&g);
    }
    if lambda2 > 0.0 {
        let mut dy = d_div_s;
        dy.scale(lambda2 as f32);
        let g = student.network().backward(
            student.store(),
            sout.tape.expect("recorded"),
            dy,
            BackwardOptions { want_input_grad: true, ..Default::default() },
        );
        dx.add_assign(&g);
    }

    let mut grads = Grads::zeros_like(gen.store());
    gen.network().backward(
        gen.store(),
        gout.tape.expect("recorded"),
        dx,
        BackwardOptions { grads: Some(&mut grads), ..Default::default() },
    );
    Ok(GenLossOutput { terms: GenLossTerms { total, ce, bn, div }, grads, x, updates: gout.updates })
}

/// `steps` Adam updates of the generator on a fixed `(z, y)`. Returns the
/// loss terms measured before each update.
#[allow(clippy::too_many_arguments)]
pub fn generator_inner_loop(
    gen: &mut GeneratorModel,
    opt: &mut Adam,
    bundle: &EnsembleBundle,
    student: &ClientModel,
    z: &Tensor,
    y: &[usize],
    steps: usize,
    opts: &GenLossOptions,
) -> Result<Vec<GenLossTerms>> {
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let out = gen_loss(gen, z, y, bundle, student, opts)?;
        opt.step(gen.store_mut(), &out.grads);
        apply_bn_updates(gen.store_mut(), &out.updates);
        if !gen.store().params().iter().all(Tensor::all_finite) {
            return Err(FedSynError::NonFinite(format!("generator parameters after step {step}")));
        }
        trace.push(out.terms);
    }
    Ok(trace)
}
