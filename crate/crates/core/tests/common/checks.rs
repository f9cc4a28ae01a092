//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and the first violation otherwise.

use fedsyn::{
    average_logits, bn_loss, ce_gen_loss, dirichlet_partition, distill_loss, distill_loss_and_grad, div_loss,
    fedavg_aggregate, gen_loss, partition_summary, BnNorm, ClientModel, DatasetHandle, EnsembleBundle, FedSynError,
    GenLossOptions, GenLossWeights,
};
use fedsyn_nn::{Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tensor_rows(rows: &[Vec<f64>]) -> (Tensor, Vec<Vec<f64>>) {
    let t = to_tensor(rows, &[rows.len(), rows[0].len()]);
    let back = super::rows(&t);
    (t, back)
}

fn bundle_of(clients: Vec<ClientModel>) -> EnsembleBundle {
    let n = clients.len();
    EnsembleBundle::new(clients, (1..=n).collect(), "toy").unwrap()
}

/// CE, BN, diversity and distillation losses against the f64 oracles on
/// random batches, plus the fixed anchor values.
pub fn loss_oracles() -> Check {
    const TOL: f64 = 1e-6;
    let mut worst: f64 = 0.0;
    let mut track = |what: &str, got: f64, want: f64| -> std::result::Result<(), String> {
        let e = rel(got, want);
        worst = worst.max(e);
        ensure(e < TOL, || format!("{what}: got {got}, oracle {want}, rel err {e:.2e}"))
    };

    let ln10 = ce_gen_loss(&Tensor::zeros([3, 10]), &[0, 4, 9]).map_err(|e| e.to_string())?;
    track("uniform cross-entropy", ln10, 10f64.ln())?;
    let t = Tensor::new([1, 2], vec![3f32.ln(), 0.0]);
    track("distillation anchor", distill_loss(&t, &Tensor::zeros([1, 2])).unwrap(), 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())?;
    let kl = distill_loss(&t, &Tensor::zeros([1, 2])).unwrap();
    ensure((kl - 0.130_812).abs() < 1e-6, || format!("distillation anchor {kl}"))?;
    let div = div_loss(&Tensor::new([1, 2], vec![9f32.ln(), 0.0]), &Tensor::new([1, 2], vec![0.0, 9f32.ln()])).unwrap();
    track("diversity anchor", div, -(0.9 * 9f64.ln() + 0.1 * (1.0f64 / 9.0).ln()))?;

    // One client, one layer: stored mean (0, 0, 0), a batch whose layer input
    // has mean (3, 4, 0) and matches the stored variance.
    let mut client = toy_client(2, 5);
    {
        let s = client.store_mut();
        let w = s.param_names().iter().position(|n| n == "fc1.weight").unwrap();
        let b = s.param_names().iter().position(|n| n == "fc1.bias").unwrap();
        // fc1 = identity on the first three pixels, shifted by (3, 4, 0).
        let mut wv = vec![0.0f32; 12];
        for c in 0..3 {
            wv[c * 4 + c] = 1.0;
        }
        s.params_mut()[w].data_mut().copy_from_slice(&wv);
        s.params_mut()[b].data_mut().copy_from_slice(&[3.0, 4.0, 0.0]);
        let rm = s.buffer_names().iter().position(|n| n == "bn.running_mean").unwrap();
        let rv = s.buffer_names().iter().position(|n| n == "bn.running_var").unwrap();
        s.buffers_mut()[rm].data_mut().fill(0.0);
        s.buffers_mut()[rv].data_mut().fill(1.0);
    }
    // Two samples at -1 and +1 on every pixel: mean 0, biased variance 1.
    let x = Tensor::new([2, 2, 2, 1], vec![-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]);
    let (_, cap) = client.forward_logits(&x, true).unwrap();
    let five = bn_loss(&[cap.unwrap()], &bundle_of(vec![client]), BnNorm::L2).unwrap();
    track("batch-norm anchor", five, 5.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for trial in 0..50 {
        let b = rng.random_range(1..=8);
        let c = rng.random_range(2..=10);
        let m = rng.random_range(1..=3);
        let (lt, l) = tensor_rows(&random_rows(&mut rng, b, c, 2.0));
        let (st, s) = tensor_rows(&random_rows(&mut rng, b, c, 2.0));
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        track(&format!("cross-entropy trial {trial}"), ce_gen_loss(&lt, &y).unwrap(), ce_oracle(&l, &y))?;
        track(&format!("distillation trial {trial}"), distill_loss(&lt, &st).unwrap(), kl_oracle(&l, &s))?;
        // Copy a few teacher rows into the student so that some rows agree.
        let mut s2 = s.clone();
        for i in 0..b {
            if rng.random_bool(0.4) {
                s2[i] = l[i].iter().map(|v| v * 0.5).collect();
            }
        }
        let (st2, s2) = tensor_rows(&s2);
        let got = div_loss(&lt, &st2).unwrap();
        let want = div_oracle(&l, &s2);
        if want == 0.0 {
            ensure(got == 0.0, || format!("diversity trial {trial}: got {got}, oracle 0"))?;
        } else {
            track(&format!("diversity trial {trial}"), got, want)?;
        }

        let clients: Vec<ClientModel> = (0..m).map(|k| toy_client(c, 100 * trial + k as u64)).collect();
        let bsz = b.max(2);
        let xr = random_rows(&mut rng, bsz, 4, 1.0);
        let (x, _) = tensor_rows(&xr);
        let x = x.reshape([bsz, 2, 2, 1]);
        let xr = super::rows(&x.clone().reshape([bsz, 4]));
        let mut caps = Vec::new();
        let mut layers = Vec::new();
        for cl in &clients {
            caps.push(cl.forward_logits(&x, true).unwrap().1.unwrap());
            let f = toy_client_forward(cl, &xr, false);
            let s = cl.store();
            layers.push(vec![[f.bn_mean, f.bn_var, named(s, "bn.running_mean"), named(s, "bn.running_var")]]);
        }
        let bundle = bundle_of(clients);
        track(&format!("batch-norm trial {trial}"), bn_loss(&caps, &bundle, BnNorm::L2).unwrap(), bn_oracle(&layers))?;
    }
    Ok(format!("250 comparisons, worst relative error {worst:.1e}"))
}

/// Full generator objective on toy models against a by-hand forward pass.
pub fn gen_loss_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gen = toy_generator(1);
    let clients: Vec<ClientModel> = (0..3).map(|k| toy_client(4, 10 + k)).collect();
    let student = toy_client(4, 50);
    let bundle = bundle_of(clients);
    let (z, zr) = tensor_rows(&random_rows(&mut rng, 8, 2, 1.0));
    let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let opts = GenLossOptions { weights: GenLossWeights { lambda1: 1.0, lambda2: 0.5 }, ..Default::default() };
    let out = gen_loss(&gen, &z, &y, &bundle, &student, &opts).map_err(|e| e.to_string())?;

    let x = toy_generator_forward(&gen, &zr);
    let fwd: Vec<ToyForward> = bundle.clients().iter().map(|c| toy_client_forward(c, &x, false)).collect();
    let avg = mean_oracle(&fwd.iter().map(|f| f.logits.clone()).collect::<Vec<_>>());
    let layers: Vec<Vec<[Vec<f64>; 4]>> = bundle
        .clients()
        .iter()
        .zip(&fwd)
        .map(|(c, f)| {
            let s = c.store();
            vec![[f.bn_mean.clone(), f.bn_var.clone(), named(s, "bn.running_mean"), named(s, "bn.running_var")]]
        })
        .collect();
    let s = toy_client_forward(&student, &x, false).logits;
    let (ce, bn, div) = (ce_oracle(&avg, &y), bn_oracle(&layers), div_oracle(&avg, &s));
    let total = ce + bn + 0.5 * div;
    for (what, got, want) in
        [("ce", out.terms.ce, ce), ("bn", out.terms.bn, bn), ("div", out.terms.div, div), ("total", out.terms.total, total)]
    {
        // The generated batch goes through f32 arithmetic before the losses.
        ensure(rel(got, want) < 1e-5 || (got - want).abs() < 1e-7, || {
            format!("generator {what}: got {got}, oracle {want}")
        })?;
    }
    ensure(div < 0.0, || "toy setup has no disagreeing rows".into())?;
    Ok(format!("ce {ce:.4} bn {bn:.4} div {div:.4}"))
}

/// Finite-difference checks of the generator and distillation gradients.
pub fn gradient_checks() -> Check {
    const H: f32 = 2e-3;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bundle = bundle_of((0..3).map(|k| toy_client(3, 30 + k)).collect());
    let student = toy_client(3, 77);
    let (z, _) = tensor_rows(&random_rows(&mut rng, 6, 2, 1.0));
    let y = vec![0, 1, 2, 0, 1, 2];
    for norm in [BnNorm::L2, BnNorm::Squared] {
        for (l1, l2) in [(1.0, 0.5), (0.0, 0.0), (0.7, 2.0)] {
            let opts = GenLossOptions { weights: GenLossWeights { lambda1: l1, lambda2: l2 }, bn_norm: norm, ..Default::default() };
            let mut gen = toy_generator(2);
            let n = gen.store().num_params();
            ensure(n == 10, || format!("toy generator has {n} parameters"))?;
            let out = gen_loss(&gen, &z, &y, &bundle, &student, &opts).map_err(|e| e.to_string())?;
            let analytic: Vec<f64> = out.grads.flatten().iter().map(|&v| v as f64).collect();
            let start = gen.store().clone();
            let fd = finite_difference(&start, H, |s| {
                *gen.store_mut() = s.clone();
                gen_loss(&gen, &z, &y, &bundle, &student, &opts).unwrap().terms.total
            });
            let e = rel_vec(&analytic, &fd);
            worst = worst.max(e);
            ensure(e < 1e-3, || format!("generator gradient ({norm:?}, {l1}, {l2}): rel err {e:.2e}"))?;
        }
    }

    let x = to_tensor(&random_rows(&mut rng, 6, 4, 1.0), &[6, 2, 2, 1]);
    let teacher = average_logits(&bundle, &x).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let mut s = toy_client(3, 78);
        let n = s.store().num_params();
        ensure(n <= 50, || format!("toy student has {n} parameters"))?;
        let (_, grads, _) = distill_loss_and_grad(&s, &x, &teacher, 1.0, mode).unwrap();
        let analytic: Vec<f64> = grads.flatten().iter().map(|&v| v as f64).collect();
        let start = s.store().clone();
        let fd = finite_difference(&start, H, |p| {
            *s.store_mut() = p.clone();
            distill_loss_and_grad(&s, &x, &teacher, 1.0, mode).unwrap().0
        });
        let e = rel_vec(&analytic, &fd);
        worst = worst.max(e);
        ensure(e < 1e-3, || format!("distillation gradient ({mode:?}): rel err {e:.2e}"))?;
    }
    Ok(format!("8 gradient checks, worst relative error {worst:.1e}"))
}

fn max_share(rows: &[Vec<usize>]) -> f64 {
    let shares: Vec<f64> = rows
        .iter()
        .filter(|r| r.iter().sum::<usize>() > 0)
        .map(|r| *r.iter().max().unwrap() as f64 / r.iter().sum::<usize>() as f64)
        .collect();
    shares.iter().sum::<f64>() / shares.len() as f64
}

/// Conservation and determinism of Dirichlet plans, and the Monte Carlo
/// mean max-class share decreasing in alpha over 100 seeds.
pub fn partition_properties(data: &DatasetHandle, m: usize) -> Check {
    let n = data.len();
    for seed in 0..5 {
        let p = dirichlet_partition(data, 0.5, m, seed).map_err(|e| e.to_string())?;
        p.validate(n).map_err(|e| e.to_string())?;
        ensure(p.client_sizes().iter().sum::<usize>() == n, || "sizes do not sum to n".into())?;
        let q = dirichlet_partition(data, 0.5, m, seed).unwrap();
        ensure(p == q, || format!("seed {seed} is not deterministic"))?;
        let summary = partition_summary(&p, data).unwrap();
        ensure(summary.iter().flatten().sum::<usize>() == n, || "summary does not sum to n".into())?;
    }
    let mut means = Vec::new();
    for alpha in [0.1, 1.0, 100.0] {
        let mut total = 0.0;
        for seed in 0..100 {
            let p = dirichlet_partition(data, alpha, m, seed).map_err(|e| e.to_string())?;
            total += max_share(&partition_summary(&p, data).unwrap());
        }
        means.push(total / 100.0);
    }
    ensure(means[0] > means[1] && means[1] > means[2], || format!("max-class shares {means:?} not decreasing in alpha"))?;
    Ok(format!("mean max-class share {:.3} / {:.3} / {:.3} at alpha 0.1 / 1 / 100", means[0], means[1], means[2]))
}

/// FedAvg on five toy clients against a flatten-and-average oracle, bit for
/// bit, and the rejection of mixed architectures.
pub fn fedavg_exactness() -> Check {
    let clients: Vec<ClientModel> = (0..5).map(|k| toy_client(3, 200 + k)).collect();
    let sizes = vec![17, 3, 250, 40, 1];
    let n: usize = sizes.iter().sum();
    let flats: Vec<Vec<f32>> = clients.iter().map(|c| c.flatten()).collect();
    let mut want = vec![0.0f64; flats[0].len()];
    for (f, &s) in flats.iter().zip(&sizes) {
        let w = s as f64 / n as f64;
        for (a, &v) in want.iter_mut().zip(f) {
            *a += w * v as f64;
        }
    }
    let want: Vec<f32> = want.into_iter().map(|v| v as f32).collect();
    let bundle = EnsembleBundle::new(clients, sizes, "toy").unwrap();
    let got = fedavg_aggregate(&bundle).map_err(|e| e.to_string())?.flatten();
    let mismatches = got.iter().zip(&want).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    ensure(mismatches == 0, || format!("{mismatches} of {} values differ from the oracle", want.len()))?;

    let spec = fedsyn::ModelSpec::new(fedsyn::ArchId::Cnn1, 10, [28, 28, 1]).with_width_divisor(8);
    let other = fedsyn::ModelSpec::new(fedsyn::ArchId::Cnn2, 10, [28, 28, 1]).with_width_divisor(8);
    let mixed = EnsembleBundle::new(
        vec![fedsyn::build_model(&spec, 0).unwrap(), fedsyn::build_model(&other, 1).unwrap()],
        vec![1, 1],
        "toy",
    )
    .unwrap();
    match fedavg_aggregate(&mixed) {
        Err(FedSynError::Unsupported(_)) => {}
        other => return Err(format!("mixed bundle gave {:?}", other.map(|_| ()))),
    }
    Ok(format!("{} values identical; mixed architectures rejected", want.len()))
}
