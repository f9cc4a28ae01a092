mod common;

use common::{blobs, blobs_test, random_rows, to_tensor, toy_client, toy_generator};
use fedsyn::distillation::trace_jsonl;
use fedsyn::harness::Method;
use fedsyn::{
    dirichlet_partition, distill_loss_and_grad, fedsyn_epoch, gen_loss, generator_inner_loop, run_fedsyn,
    run_multiround, train_all_clients, ArchId, ClientModel, EnsembleBundle, Execution, FedSynConfig, FedSynError,
    FedSynState, GenLossOptions, GenLossWeights, LocalTrainConfig, ModelSpec,
};
use fedsyn_nn::{Adam, Init, Linear, Mode, Network, Node, ParamBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(arch: ArchId) -> ModelSpec {
    ModelSpec::new(arch, 4, [8, 8, 1]).with_width_divisor(8)
}

fn local(seed: u64) -> LocalTrainConfig {
    LocalTrainConfig { epochs: 2, batch_size: 16, learning_rate: 0.05, seed, ..Default::default() }
}

fn small(epochs: usize) -> FedSynConfig {
    FedSynConfig {
        epochs,
        gen_steps: 2,
        distill_steps: 2,
        batch_size: 16,
        noise_dim: 8,
        gen_widths: [8, 4],
        eval_every: 2,
        deterministic_trace: true,
        ..Default::default()
    }
}

fn bundle(archs: &[ModelSpec], seed: u64) -> EnsembleBundle {
    let data = blobs(240, 4, [8, 8, 1], 0.5, 1);
    let plan = dirichlet_partition(&data, 0.5, archs.len(), seed).unwrap();
    train_all_clients(&plan, &data, archs, &local(seed), Execution::Serial).unwrap()
}

/// Flatten -> linear 4->3, no batch norm.
fn linear_client(seed: u64) -> ClientModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut rng);
    let weight = b.param("w", &[3, 4], Init::FanInUniform { fan_in: 4 });
    let bias = Some(b.param("b", &[3], Init::FanInUniform { fan_in: 4 }));
    let nodes = vec![Node::Flatten, Node::Linear(Linear { in_features: 4, out_features: 3, weight, bias })];
    ClientModel::custom(Network::new(nodes, vec![2, 2, 1]), b.finish(), 3).unwrap()
}

#[test]
fn client_models_are_never_modified() {
    let b = bundle(&vec![spec(ArchId::Cnn1); 3], 0);
    let before: Vec<Vec<f32>> = b.clients().iter().map(|c| c.flatten()).collect();
    run_fedsyn(&b, &spec(ArchId::Cnn1), &small(3), None).unwrap();
    let after: Vec<Vec<f32>> = b.clients().iter().map(|c| c.flatten()).collect();
    assert_eq!(before, after);
}

#[test]
fn zero_weights_reduce_the_objective_to_cross_entropy() {
    let b = EnsembleBundle::new(vec![toy_client(3, 1), toy_client(3, 2)], vec![3, 5], "toy").unwrap();
    let student = toy_client(3, 3);
    let gen = toy_generator(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = to_tensor(&random_rows(&mut rng, 6, 2, 1.0), &[6, 2]);
    let y = vec![0, 1, 2, 2, 1, 0];
    let with = |l1, l2| {
        let opts = GenLossOptions { weights: GenLossWeights { lambda1: l1, lambda2: l2 }, ..Default::default() };
        gen_loss(&gen, &z, &y, &b, &student, &opts).unwrap().terms
    };
    let ce_only = Method::FedSynCeOnly.configure(&FedSynConfig::default()).unwrap();
    assert_eq!((ce_only.lambda1, ce_only.lambda2), (0.0, 0.0));
    let t = with(0.0, 0.0);
    assert_eq!(t.total, t.ce);
    let t = with(0.0, 0.5);
    assert_eq!(t.total, t.ce + 0.5 * t.div);
    let t = with(1.0, 0.0);
    assert_eq!(t.total, t.ce + t.bn);
    assert_eq!(Method::FedSynNoBn.configure(&FedSynConfig::default()).unwrap().lambda2, 0.5);
}

#[test]
fn generator_steps_lower_the_objective() {
    let b = EnsembleBundle::new(vec![toy_client(3, 11), toy_client(3, 12)], vec![1, 1], "toy").unwrap();
    let student = toy_client(3, 13);
    let mut gen = toy_generator(14);
    let mut opt = Adam::new(gen.store(), 0.01, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = to_tensor(&random_rows(&mut rng, 12, 2, 1.0), &[12, 2]);
    let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let trace = generator_inner_loop(&mut gen, &mut opt, &b, &student, &z, &y, 30, &GenLossOptions::default()).unwrap();
    assert!(trace[29].total < trace[0].total, "{} -> {}", trace[0].total, trace[29].total);
}

#[test]
fn frozen_epoch_leaves_the_models_alone() {
    let b = bundle(&vec![spec(ArchId::Cnn1); 2], 1);
    let cfg = FedSynConfig { gen_steps: 0, lr_student: 0.0, ..small(1) };
    let mut state = FedSynState::init(&b, &spec(ArchId::Cnn1), &cfg).unwrap();
    let gen = state.generator.store().flatten();
    let student: Vec<_> = state.student.store().params().to_vec();
    let m = fedsyn_epoch(&mut state, &b, &cfg).unwrap();
    assert!(m.gen.is_none());
    assert_eq!(state.generator.store().flatten(), gen);
    // Parameters stay put; running statistics follow the synthetic batches.
    assert_eq!(state.student.store().params(), student.as_slice());
}

#[test]
fn a_student_identical_to_its_only_teacher_stays_put() {
    let teacher = linear_client(5);
    let b = EnsembleBundle::new(vec![teacher.clone()], vec![10], "toy").unwrap();
    let cfg = FedSynConfig { gen_steps: 1, batch_size: 8, noise_dim: 2, ..small(1) };
    let mut state = FedSynState::new(teacher.clone(), toy_generator(6), &cfg);
    let m = fedsyn_epoch(&mut state, &b, &cfg).unwrap();
    assert_eq!(m.dis, 0.0);
    assert_eq!(state.student.flatten(), teacher.flatten());

    // With batch norm the fixed point holds for inference-mode statistics.
    let t = toy_client(3, 7);
    let x = to_tensor(&random_rows(&mut ChaCha8Rng::seed_from_u64(2), 5, 4, 1.0), &[5, 2, 2, 1]);
    let logits = t.forward_logits(&x, false).unwrap().0;
    let (l, g, _) = distill_loss_and_grad(&t, &x, &logits, 1.0, Mode::Eval).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.flatten().iter().all(|v| v.abs() < 1e-7));
}

#[test]
fn zero_epochs_return_the_fresh_student() {
    let b = bundle(&vec![spec(ArchId::Cnn1); 2], 2);
    let r = run_fedsyn(&b, &spec(ArchId::Cnn2), &small(0), None).unwrap();
    assert!(r.trace.is_empty());
    assert_eq!(r.final_accuracy, None);
    let fresh = FedSynState::init(&b, &spec(ArchId::Cnn2), &small(0)).unwrap();
    assert_eq!(r.student.flatten(), fresh.student.flatten());
}

#[test]
fn identical_runs_write_identical_traces() {
    let b = bundle(&vec![spec(ArchId::Cnn1); 3], 3);
    let test = blobs_test(80, 4, [8, 8, 1], 0.5, 1);
    let a = run_fedsyn(&b, &spec(ArchId::Cnn1), &small(4), Some(&test)).unwrap();
    let c = run_fedsyn(&b, &spec(ArchId::Cnn1), &small(4), Some(&test)).unwrap();
    assert_eq!(trace_jsonl(&a.trace), trace_jsonl(&c.trace));
    assert_eq!(a.student.flatten(), c.student.flatten());
    assert!(!trace_jsonl(&a.trace).contains("wall_ms"));
    assert_eq!(a.accuracy_curve().iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 4]);
}

#[test]
fn one_round_equals_train_then_distil() {
    let data = blobs(240, 4, [8, 8, 1], 0.5, 1);
    let test = blobs_test(80, 4, [8, 8, 1], 0.5, 1);
    let plan = dirichlet_partition(&data, 0.5, 3, 4).unwrap();
    let archs = vec![spec(ArchId::Cnn1); 3];
    let cfg = small(3);
    let multi = run_multiround(&data, Some(&test), &plan, &archs, &spec(ArchId::Cnn1), &local(8), &cfg).unwrap();
    let b = train_all_clients(&plan, &data, &archs, &local(8), Execution::Serial).unwrap();
    let once = run_fedsyn(&b, &spec(ArchId::Cnn1), &cfg, Some(&test)).unwrap();
    assert_eq!(trace_jsonl(&multi.trace), trace_jsonl(&once.trace));
    assert_eq!(multi.student.flatten(), once.student.flatten());

    let three = run_multiround(
        &data,
        Some(&test),
        &plan,
        &archs,
        &spec(ArchId::Cnn1),
        &local(8),
        &FedSynConfig { rounds: 3, ..cfg },
    )
    .unwrap();
    assert_eq!(three.trace.len(), 9);
    assert_eq!(three.trace.last().unwrap().epoch, 9);
}

#[test]
fn mixed_architectures_distil_once_but_not_over_rounds() {
    let archs = [spec(ArchId::Cnn1), spec(ArchId::Cnn2), spec(ArchId::Wrn16_1)];
    let b = bundle(&archs, 5);
    let r = run_fedsyn(&b, &spec(ArchId::Resnet18), &small(1), None).unwrap();
    assert_eq!(r.student.arch(), ArchId::Resnet18);

    let data = blobs(240, 4, [8, 8, 1], 0.5, 1);
    let plan = dirichlet_partition(&data, 0.5, 3, 5).unwrap();
    let cfg = FedSynConfig { rounds: 2, ..small(1) };
    let err = run_multiround(&data, None, &plan, &archs, &spec(ArchId::Cnn1), &local(0), &cfg).unwrap_err();
    assert!(matches!(err, FedSynError::Unsupported(_)), "{err}");
}
