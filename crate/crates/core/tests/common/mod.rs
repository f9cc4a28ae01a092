//! Toy models, synthetic data and straightforward f64 re-implementations of
//! the losses, shared by the integration tests.
#![allow(dead_code)]

pub mod checks;

use fedsyn::{ClientModel, DatasetHandle, GeneratorModel, Split};
use fedsyn_nn::{BatchNorm, Init, Linear, Network, Node, ParamBuilder, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EPS: f64 = 1e-5;

/// Toy images are 2x2 with one channel.
pub const TOY_SHAPE: [usize; 3] = [2, 2, 1];

fn linear(b: &mut ParamBuilder<ChaCha8Rng>, name: &str, i: usize, o: usize, bias: bool) -> Node {
    b.push_scope(name);
    let weight = b.param("weight", &[o, i], Init::FanInUniform { fan_in: i });
    let bias = bias.then(|| b.param("bias", &[o], Init::FanInUniform { fan_in: i }));
    b.pop_scope();
    Node::Linear(Linear { in_features: i, out_features: o, weight, bias })
}

fn bn(b: &mut ParamBuilder<ChaCha8Rng>, name: &str, c: usize) -> Node {
    b.push_scope(name);
    let gamma = Some(b.param("gamma", &[c], Init::Ones));
    let beta = Some(b.param("beta", &[c], Init::Zeros));
    let running_mean = b.buffer("running_mean", &[c], 0.0);
    let running_var = b.buffer("running_var", &[c], 1.0);
    b.pop_scope();
    Node::BatchNorm(BatchNorm { channels: c, gamma, beta, running_mean, running_var, eps: EPS as f32, momentum: 0.1 })
}

/// Flatten, linear 4->3, batch norm, tanh, linear 3->classes. Batch-norm
/// affine parameters and running statistics are randomised so that none of
/// them sits at its neutral value.
pub fn toy_client(classes: usize, seed: u64) -> ClientModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut rng);
    let nodes = vec![
        Node::Flatten,
        linear(&mut b, "fc1", 4, 3, true),
        bn(&mut b, "bn", 3),
        Node::Tanh,
        linear(&mut b, "fc2", 3, classes, true),
    ];
    let mut store = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    jitter(&mut store, &mut rng);
    ClientModel::custom(Network::new(nodes, TOY_SHAPE.to_vec()), store, classes).unwrap()
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, t) in store.param_names().to_vec().iter().zip(store.params_mut()) {
        if name.starts_with("bn") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3f32..0.3);
            }
        }
    }
    for (name, t) in store.buffer_names().to_vec().iter().zip(store.buffers_mut()) {
        for v in t.data_mut() {
            *v = if name.ends_with("var") { rng.random_range(0.5f32..2.0) } else { rng.random_range(-0.5f32..0.5) };
        }
    }
}

/// Noise of width 2 -> linear to 4 values (no bias) -> 2x2x1 map -> tanh ->
/// affine batch norm. Ten parameters.
pub fn toy_generator(seed: u64) -> GeneratorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut rng);
    let nodes = vec![linear(&mut b, "fc", 2, 4, false), Node::Reshape(TOY_SHAPE.to_vec()), Node::Tanh, bn(&mut b, "bn", 1)];
    let mut store = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    jitter(&mut store, &mut rng);
    for w in store.params_mut()[0].data_mut() {
        *w *= 2.0;
    }
    GeneratorModel::custom(Network::new(nodes, vec![2]), store, TOY_SHAPE).unwrap()
}

/// Named parameter or buffer widened to f64.
pub fn named(store: &ParamStore, name: &str) -> Vec<f64> {
    if let Some(i) = store.param_names().iter().position(|n| n == name) {
        return store.params()[i].data().iter().map(|&v| v as f64).collect();
    }
    let i = store.buffer_names().iter().position(|n| n == name).unwrap_or_else(|| panic!("no tensor {name}"));
    store.buffers()[i].data().iter().map(|&v| v as f64).collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

pub fn to_tensor(rows: &[Vec<f64>], shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rows.iter().flatten().map(|&v| v as f32).collect())
}

fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let i = x.len();
    (0..out).map(|o| (0..i).map(|j| w[o * i + j] * x[j]).sum::<f64>() + b.map_or(0.0, |b| b[o])).collect()
}

/// Forward pass of a [`toy_client`] done by hand. Returns the logits and
/// the mean and biased variance of the batch-norm input over the batch.
pub struct ToyForward {
    pub logits: Vec<Vec<f64>>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
}

pub fn toy_client_forward(model: &ClientModel, x: &[Vec<f64>], train: bool) -> ToyForward {
    let s = model.store();
    let (w1, b1) = (named(s, "fc1.weight"), named(s, "fc1.bias"));
    let (w2, b2) = (named(s, "fc2.weight"), named(s, "fc2.bias"));
    let (g, be) = (named(s, "bn.gamma"), named(s, "bn.beta"));
    let (rm, rv) = (named(s, "bn.running_mean"), named(s, "bn.running_var"));
    let classes = b2.len();
    let a: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &w1, Some(&b1), 3)).collect();
    let n = a.len() as f64;
    let mean: Vec<f64> = (0..3).map(|c| a.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..3).map(|c| a.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n).collect();
    let (mu, v) = if train { (&mean, &var) } else { (&rm, &rv) };
    let logits = a
        .iter()
        .map(|r| {
            let h: Vec<f64> = (0..3).map(|c| ((r[c] - mu[c]) / (v[c] + EPS).sqrt() * g[c] + be[c]).tanh()).collect();
            affine(&h, &w2, Some(&b2), classes)
        })
        .collect();
    ToyForward { logits, bn_mean: mean, bn_var: var }
}

/// Forward pass of a [`toy_generator`] done by hand, one flattened image per row.
pub fn toy_generator_forward(gen: &GeneratorModel, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = gen.store();
    let w = named(s, "fc.weight");
    let (g, b) = (named(s, "bn.gamma")[0], named(s, "bn.beta")[0]);
    let t: Vec<Vec<f64>> = z.iter().map(|r| affine(r, &w, None, 4).into_iter().map(f64::tanh).collect()).collect();
    let all: Vec<f64> = t.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    t.iter().map(|r| r.iter().map(|v| (v - mean) / (var + EPS).sqrt() * g + b).collect()).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `-(1/b) sum_i log softmax(l_i)[y_i]`
pub fn ce_oracle(logits: &[Vec<f64>], y: &[usize]) -> f64 {
    logits.iter().zip(y).map(|(r, &c)| -log_softmax(r)[c]).sum::<f64>() / y.len() as f64
}

pub fn kl_row(t: &[f64], s: &[f64]) -> f64 {
    let (lt, ls) = (log_softmax(t), log_softmax(s));
    lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Mean per-row `KL(softmax(t) || softmax(s))`.
pub fn kl_oracle(t: &[Vec<f64>], s: &[Vec<f64>]) -> f64 {
    t.iter().zip(s).map(|(a, b)| kl_row(a, b)).sum::<f64>() / t.len() as f64
}

/// Negated KL averaged over the whole batch but summed only over rows whose
/// argmax disagrees.
pub fn div_oracle(t: &[Vec<f64>], s: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (a, b) in t.iter().zip(s) {
        if argmax(a) != argmax(b) {
            total += kl_row(a, b);
        }
    }
    -total / t.len() as f64
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `(1/m) sum_k sum_l |mean_kl - stored_mean_kl| + |var_kl - stored_var_kl|`
/// where every entry of `layers` is `(mean, var, stored_mean, stored_var)`.
pub fn bn_oracle(clients: &[Vec<[Vec<f64>; 4]>]) -> f64 {
    let m = clients.len() as f64;
    clients.iter().flatten().map(|[mu, var, rm, rv]| l2(mu, rm) + l2(var, rv)).sum::<f64>() / m
}

/// Element-wise mean of client logits.
pub fn mean_oracle(per_client: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let m = per_client.len() as f64;
    let mut out = per_client[0].clone();
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = per_client.iter().map(|c| c[i][j]).sum::<f64>() / m;
        }
    }
    out
}

pub fn random_rows(rng: &mut impl Rng, n: usize, width: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..width).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let diff = l2(a, b);
    let scale = l2(a, &vec![0.0; a.len()]).max(l2(b, &vec![0.0; b.len()])).max(1e-12);
    diff / scale
}

/// Central differences of `f` w.r.t. every parameter of `store`.
pub fn finite_difference(store: &ParamStore, h: f32, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<f64> {
    let mut probe = store.clone();
    let mut out = Vec::new();
    for p in 0..store.params().len() {
        for i in 0..store.params()[p].len() {
            let orig = store.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.params_mut()[p].data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.params_mut()[p].data_mut()[i] = orig;
            out.push((up - down) / (2.0 * h as f64));
        }
    }
    out
}

/// `n` images of `shape` whose class `c` is a fixed random pattern plus noise.
pub fn blobs(n: usize, classes: usize, shape: [usize; 3], noise: f32, seed: u64) -> DatasetHandle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: usize = shape.iter().product();
    let centres: Vec<Vec<f32>> =
        (0..classes).map(|_| (0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &m in &centres[c] {
            data.push(m + noise * rng.sample::<f32, _>(StandardNormal));
        }
    }
    let [h, w, ch] = shape;
    DatasetHandle::from_parts("blobs", Split::Train, classes, Tensor::new([n, h, w, ch], data), labels).unwrap()
}

/// Same distribution as [`blobs`] with the same `seed`, fresh noise.
pub fn blobs_test(n: usize, classes: usize, shape: [usize; 3], noise: f32, seed: u64) -> DatasetHandle {
    let train = blobs(n, classes, shape, 0.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let mut data = train.features().data().to_vec();
    for v in &mut data {
        *v += noise * rng.sample::<f32, _>(StandardNormal);
    }
    let [h, w, ch] = shape;
    DatasetHandle::from_parts("blobs", Split::Test, classes, Tensor::new([n, h, w, ch], data), train.labels().to_vec())
        .unwrap()
}
