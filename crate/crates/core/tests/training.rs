use cgcn::centrality::Stream;
use cgcn::config::{RunConfig, StreamMode};
use cgcn::dataio::{synth_generate, Archetype, SynthSpec};
use cgcn::experiment::{build_models, train, Dataset, TrainOptions};
use cgcn::net::{Dropout, FeatureTensor, Mode, Param, Rng};
use cgcn::training::{sgd_nesterov_step, top_k_accuracy, OptimizerState};
use cgcn::Error;
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn param(value: Vec<f64>, grad: Vec<f64>) -> Param {
    let mut p = Param::new("p", vec![value.len()], value);
    p.grad = grad;
    p
}

fn values() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|n| (prop::collection::vec(-2.0f64..2.0, n), prop::collection::vec(-2.0f64..2.0, n)))
}

proptest! {
    #[test]
    fn zero_momentum_is_plain_sgd((w, g) in values(), lr in 0.0f64..1.0, wd in 0.0f64..0.1) {
        let mut p = param(w.clone(), g.clone());
        let mut state = OptimizerState::new(lr, 0.0, wd).unwrap();
        sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        for i in 0..w.len() {
            prop_assert!((p.value[i] - (w[i] - lr * (g[i] + wd * w[i]))).abs() < 1e-14);
        }
    }

    #[test]
    fn two_steps_under_a_constant_gradient((w, g) in values(), lr in 0.0f64..1.0, mu in 0.0f64..0.99) {
        let mut p = param(w.clone(), g.clone());
        let mut state = OptimizerState::new(lr, mu, 0.0).unwrap();
        sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        for i in 0..w.len() {
            let v1 = g[i];
            let w1 = w[i] - lr * (g[i] + mu * v1);
            let v2 = mu * v1 + g[i];
            let w2 = w1 - lr * (g[i] + mu * v2);
            prop_assert!((p.value[i] - w2).abs() < 1e-12);
            prop_assert!((state.velocity[0][i] - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing((w, g) in values(), mu in 0.0f64..0.99, wd in 0.0f64..0.1) {
        let mut p = param(w.clone(), g);
        let mut state = OptimizerState::new(0.0, mu, wd).unwrap();
        for _ in 0..3 {
            sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        }
        prop_assert_eq!(p.value, w);
    }

    #[test]
    fn quadratic_bowl_converges(w0 in -5.0f64..5.0, curvature in 0.1f64..2.0, mu in 0.0f64..0.9) {
        let mut p = param(vec![w0], vec![0.0]);
        let mut state = OptimizerState::new(0.1, mu, 0.0).unwrap();
        for _ in 0..2000 {
            p.grad = vec![curvature * p.value[0]];
            sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        }
        prop_assert!(p.value[0].abs() < 1e-6 * w0.abs().max(1.0));
    }
}

#[test]
fn non_finite_gradient_leaves_every_parameter_alone() {
    let mut a = param(vec![1.0, 2.0], vec![0.5, 0.5]);
    let mut b = param(vec![3.0], vec![f64::NAN]);
    let mut state = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
    let err = sgd_nesterov_step(&mut [&mut a, &mut b], &mut state).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(_)));
    assert_eq!(a.value, vec![1.0, 2.0]);
    assert_eq!(b.value, vec![3.0]);
}

#[test]
fn dropout_keeps_the_mean() {
    let x = FeatureTensor::from_fn([4, 8, 32, 25], |_| 1.0);
    for rate in [0.1, 0.5, 0.8] {
        let mut d = Dropout::new(rate);
        let y = d.forward(&x, Mode::Train, &mut Rng::seed_from_u64(3));
        let mean = y.as_slice().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "rate {rate}: mean {mean}");
        let dropped = y.as_slice().iter().filter(|v| **v == 0.0).count() as f64 / y.len() as f64;
        assert!((dropped - rate).abs() < 0.02);
    }
}

#[test]
fn uniform_scores_give_chance_top1() {
    let mut rng = Rng::seed_from_u64(5);
    let labels: Vec<usize> = (0..20_000).map(|_| rng.gen_range(0..4)).collect();
    let scores = vec![vec![0.25; 4]; labels.len()];
    let acc = top_k_accuracy(&scores, &labels, &[1, 4]);
    assert!((acc[&1] - 0.25).abs() < 0.02, "{}", acc[&1]);
    assert_eq!(acc[&4], 1.0);
}

fn dataset(classes: &[Archetype], per_class: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        classes: classes.to_vec(),
        per_class,
        seed,
        ..SynthSpec::default()
    };
    synth_generate(&spec, dir.path()).unwrap();
    let data = Dataset::load(&dir.path().join("manifest.csv")).unwrap();
    (dir, data)
}

fn small_config() -> RunConfig {
    RunConfig {
        streams: vec![Stream::J, Stream::A],
        epochs: 2,
        batch_size: 4,
        ..RunConfig::default()
    }
}

#[test]
fn same_seed_same_report_and_weights() {
    let (_dir, data) = dataset(&[Archetype::Walk, Archetype::Bow], 3, 1);
    let config = small_config();
    let a = train(&config, &data, &TrainOptions::default()).unwrap();
    let b = train(&config, &data, &TrainOptions::default()).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.to_csv(), b.report.to_csv());
    for (x, y) in a.models.iter().zip(&b.models) {
        assert_eq!(x.to_json().unwrap(), y.to_json().unwrap());
    }
    let other = train(&RunConfig { seed: 1, ..config }, &data, &TrainOptions::default()).unwrap();
    assert_ne!(other.report.epochs, a.report.epochs);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let (_dir, data) = dataset(&[Archetype::Walk, Archetype::Stand], 3, 2);
    let config = RunConfig {
        learning_rate: 0.0,
        ..small_config()
    };
    let trained = train(&config, &data, &TrainOptions::default()).unwrap();
    let fresh = build_models(&config, &data, 2).unwrap();
    for (t, f) in trained.models.iter().zip(&fresh) {
        for (p, q) in t.params().iter().zip(f.params()) {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }
}

#[test]
fn loss_falls_on_two_separable_classes() {
    let (_dir, data) = dataset(&[Archetype::Walk, Archetype::Stand], 8, 3);
    let config = RunConfig {
        streams: vec![Stream::A],
        mode: StreamMode::Single,
        epochs: 5,
        batch_size: 4,
        ..RunConfig::default()
    };
    let report = train(&config, &data, &TrainOptions::default()).unwrap().report;
    let losses: Vec<f64> = report.epochs.iter().map(|r| r.loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn trailing_single_sample_batch_still_trains() {
    let (_dir, data) = dataset(&[Archetype::Walk, Archetype::Wave, Archetype::Bow], 3, 4);
    let config = RunConfig {
        streams: vec![Stream::A],
        epochs: 1,
        batch_size: 4,
        ..RunConfig::default()
    };
    let report = train(&config, &data, &TrainOptions::default()).unwrap().report;
    assert!(report.epochs[0].loss.is_finite());
}

#[test]
fn stop_rule_ends_training_early() {
    let (_dir, data) = dataset(&[Archetype::Walk, Archetype::Stand], 3, 5);
    let config = RunConfig {
        streams: vec![Stream::A],
        epochs: 50,
        batch_size: 3,
        stop_at_train_top1: Some(0.0),
        stop_check_every: 2,
        ..RunConfig::default()
    };
    let report = train(&config, &data, &TrainOptions::default()).unwrap().report;
    assert_eq!(report.epochs.len(), 2);
}
