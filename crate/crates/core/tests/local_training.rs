mod common;

use common::{blobs, toy_client};
use fedsyn::local::{train_clients, LossRegistry};
use fedsyn::{
    build_model, client_inits, dirichlet_partition, local_update, train_all_clients, ArchId, DatasetView, Execution,
    LocalTrainConfig, ModelSpec,
};

fn spec(arch: ArchId) -> ModelSpec {
    ModelSpec::new(arch, 4, [8, 8, 1]).with_width_divisor(8)
}

fn cfg(epochs: usize, seed: u64) -> LocalTrainConfig {
    LocalTrainConfig { epochs, batch_size: 16, learning_rate: 0.05, seed, ..Default::default() }
}

#[test]
fn serial_and_parallel_bundles_are_bit_identical() {
    let data = blobs(240, 4, [8, 8, 1], 0.5, 1);
    let plan = dirichlet_partition(&data, 0.5, 3, 4).unwrap();
    let archs = vec![spec(ArchId::Cnn1); 3];
    let a = train_all_clients(&plan, &data, &archs, &cfg(2, 9), Execution::Serial).unwrap();
    let b = train_all_clients(&plan, &data, &archs, &cfg(2, 9), Execution::Parallel).unwrap();
    for (x, y) in a.clients().iter().zip(b.clients()) {
        assert_eq!(x.flatten(), y.flatten());
    }
    assert_eq!(a.sizes(), plan.client_sizes().as_slice());
}

#[test]
fn single_client_bundle_is_a_direct_local_update() {
    let data = blobs(120, 4, [8, 8, 1], 0.5, 2);
    let plan = dirichlet_partition(&data, 1.0, 1, 0).unwrap();
    let bundle = train_all_clients(&plan, &data, &[spec(ArchId::Cnn2)], &cfg(3, 5), Execution::Serial).unwrap();
    let mut direct = build_model(&spec(ArchId::Cnn2), 5).unwrap();
    local_update(&mut direct, &DatasetView::full(&data), &cfg(3, 5)).unwrap();
    assert_eq!(bundle.clients()[0].flatten(), direct.flatten());
}

#[test]
fn clients_start_from_distinct_seeds() {
    let inits = client_inits(&vec![spec(ArchId::Cnn1); 3], 10).unwrap();
    assert_eq!(inits[2].flatten(), build_model(&spec(ArchId::Cnn1), 12).unwrap().flatten());
    assert_ne!(inits[0].flatten(), inits[1].flatten());
}

#[test]
fn same_init_and_shard_give_the_same_model() {
    let data = blobs(200, 4, [2, 2, 1], 0.3, 3);
    let plan = dirichlet_partition(&data, 0.5, 2, 1).unwrap();
    let shard = data.view(plan.assignments[0].clone());
    let (mut a, mut b) = (toy_client(4, 0), toy_client(4, 0));
    local_update(&mut a, &shard, &cfg(2, 7)).unwrap();
    local_update(&mut b, &shard, &cfg(2, 7)).unwrap();
    assert_eq!(a.flatten(), b.flatten());
}

#[test]
fn mixed_architectures_train_side_by_side() {
    let data = blobs(240, 4, [8, 8, 1], 0.5, 4);
    let plan = dirichlet_partition(&data, 0.5, 2, 0).unwrap();
    let archs = [spec(ArchId::Cnn1), spec(ArchId::Cnn2)];
    let bundle = train_all_clients(&plan, &data, &archs, &cfg(1, 0), Execution::Serial).unwrap();
    assert!(!bundle.is_homogeneous());
    assert_eq!(bundle.clients()[1].arch(), ArchId::Cnn2);
}

#[test]
fn training_reduces_loss_on_separable_blobs() {
    let data = blobs(200, 4, [2, 2, 1], 0.2, 5);
    let plan = dirichlet_partition(&data, 100.0, 2, 0).unwrap();
    let inits = vec![toy_client(4, 1), toy_client(4, 2)];
    let (_, traces) =
        train_clients(inits, &plan, &data, &cfg(20, 0), Execution::Serial, &LossRegistry::default()).unwrap();
    for t in traces {
        assert!(t.last().unwrap() < &t[0], "{t:?}");
    }
}
