use cgcn::centrality::{centrality_from_lengths, CentralityMode, Stream};
use cgcn::graph::SkeletonTemplate;
use cgcn::linalg::Matrix;
use cgcn::net::{CgcnModel, ChannelPlan, FeatureTensor, ModelConfig, PropagationId};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn model(seed: u64, classes: usize) -> CgcnModel {
    let mut config = ModelConfig::new(ChannelPlan::Desk, 9, classes);
    config.dropout = 0.0;
    let id = PropagationId {
        streams: vec![Stream::J],
        inputs_hash: "test".into(),
    };
    CgcnModel::new(config, id, seed).unwrap()
}

fn propagation(seed: u64) -> Matrix {
    let graph = SkeletonTemplate::builtin("ntu25").unwrap().graph().unwrap();
    let mut rng = cgcn::net::Rng::seed_from_u64(seed);
    let lengths: Vec<f64> = graph.edges().iter().map(|_| rng.gen_range(0.05..0.5)).collect();
    let set = centrality_from_lengths(&graph, &lengths, CentralityMode::SequenceMean, None).unwrap();
    set.stream_propagation(Stream::J).matrix().clone()
}

fn input(shape: [usize; 4], seed: u64) -> FeatureTensor {
    let mut rng = cgcn::net::Rng::seed_from_u64(seed);
    FeatureTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn relabelling_joints_leaves_predictions_unchanged() {
    let mut m = model(1, 4);
    let a = propagation(2);
    let x = input([3, 9, 20, 25], 3);
    let base = m.predict(&x, &[std::slice::from_ref(&a); 3]).unwrap();
    let mut rng = cgcn::net::Rng::seed_from_u64(4);
    let mut perm: Vec<usize> = (0..25).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let pa = a.permuted(&perm);
    let moved = m.predict(&x.permute_joints(&perm), &[std::slice::from_ref(&pa); 3]).unwrap();
    for (p, q) in base.iter().zip(&moved) {
        for (u, v) in p.iter().zip(q) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_per_frame_matrices_match_one_shared_matrix() {
    let mut m = model(5, 3);
    let a = propagation(6);
    let x = input([2, 9, 20, 25], 7);
    let shared = m.predict(&x, &[std::slice::from_ref(&a); 2]).unwrap();
    let frames = vec![a.clone(); 20];
    let per_frame = m.predict(&x, &[frames.as_slice(); 2]).unwrap();
    for (p, q) in shared.iter().zip(&per_frame) {
        for (u, v) in p.iter().zip(q) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stream_J.json");
    let mut m = model(8, 5);
    let echo = serde_json::json!({"epochs": 3});
    m.save(&path, Some(&echo)).unwrap();
    let (mut back, run_config) = CgcnModel::load(&path).unwrap();
    assert_eq!(run_config, Some(echo));
    let a = propagation(9);
    let x = input([2, 9, 20, 25], 10);
    let rows = [std::slice::from_ref(&a); 2];
    assert_eq!(m.predict(&x, &rows).unwrap(), back.predict(&x, &rows).unwrap());
    assert!(matches!(
        CgcnModel::load(&dir.path().join("absent.json")),
        Err(cgcn::Error::MissingCheckpoint(_))
    ));
}

#[test]
fn input_channel_mismatch_is_rejected() {
    let mut m = model(1, 2);
    let a = propagation(1);
    let x = input([1, 6, 12, 25], 1);
    assert!(m.predict(&x, &[std::slice::from_ref(&a)]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn probabilities_form_a_distribution(seed in any::<u64>(), frames in 17usize..40, classes in 2usize..6) {
        let mut m = model(seed, classes);
        let a = propagation(seed);
        let x = input([2, 9, frames, 25], seed);
        for p in m.predict(&x, &[std::slice::from_ref(&a); 2]).unwrap() {
            prop_assert_eq!(p.len(), classes);
            prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
