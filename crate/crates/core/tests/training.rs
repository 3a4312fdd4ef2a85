mod common;

use nalgebra::Rotation3;
use neuralmd::data::{generate_synthetic, ComplexRecord, SyntheticSpec};
use neuralmd::dynamics::GradientMode;
use neuralmd::geometry::Vec3;
use neuralmd::tensor::{Graph, Tensor};
use neuralmd::training::*;
use neuralmd::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(snapshots: usize, seed: u64) -> ComplexRecord {
    generate_synthetic(&SyntheticSpec {
        snapshots,
        seed,
        id: format!("toy{seed}"),
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        lr: 1e-3,
        horizon: 3,
        start_stride: 3,
        ..TrainConfig::default()
    };
    cfg.model.hidden = 8;
    cfg.model.layers = 1;
    cfg.solver.substeps = 2;
    cfg.schedule = neuralmd::baselines::NoiseSchedule::geometric(1.0, 0.1, 3, 2, 2e-3).unwrap();
    cfg
}

fn random_traj(rng: &mut ChaCha8Rng, snaps: usize, atoms: usize) -> Vec<Vec<Vec3>> {
    (0..snaps)
        .map(|_| {
            (0..atoms)
                .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                .collect()
        })
        .collect()
}

// ---- loss and metrics ------------------------------------------------------

fn graph_mae(pred: &[Vec<Vec3>], truth: &[Vec<Vec3>]) -> neuralmd::Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<_> = pred.iter().map(|p| g.leaf(Tensor::from_points(p))).collect();
    let loss = loss_trajectory_mae(&mut g, &vars, truth)?;
    Ok(g.value(loss).item())
}

#[test]
fn trajectory_mae_examples() {
    let a = vec![vec![Vec3::new(1.0, 2.0, 3.0)]];
    assert_eq!(graph_mae(&a, &a).unwrap(), 0.0);
    let b = vec![vec![Vec3::new(1.0, 2.0, 4.0)]];
    assert!((graph_mae(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(graph_mae(&a, &[b[0].clone(), b[0].clone()]), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn trajectory_mae_matches_scripted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pred = random_traj(&mut rng, 6, 4);
    let truth = random_traj(&mut rng, 6, 4);
    let mut oracle = 0.0;
    let mut count = 0.0;
    for (p, t) in pred.iter().zip(&truth) {
        for (a, b) in p.iter().zip(t) {
            for c in 0..3 {
                oracle += (a[c] - b[c]).abs();
                count += 1.0;
            }
        }
    }
    oracle /= count;
    assert!((graph_mae(&pred, &truth).unwrap() - oracle).abs() < 1e-12);
    let (mae, mse) = metric_recovery(&pred, &truth).unwrap();
    assert!((mae - oracle).abs() < 1e-12);
    let sq: f64 = pred
        .iter()
        .zip(&truth)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).norm_squared()))
        .sum();
    assert!((mse - sq / count).abs() < 1e-12);
}

#[test]
fn stability_fixtures() {
    let pair = |d: f64| vec![Vec3::zeros(), Vec3::new(d, 0.0, 0.0)];
    let truth = vec![pair(1.0); 4];
    assert_eq!(metric_stability(&truth, &truth, STABILITY_DELTA).unwrap(), 0.0);
    assert_eq!(metric_stability(&vec![pair(1.6); 4], &truth, STABILITY_DELTA).unwrap(), 100.0);
    // two pairs, one violating in half of the snapshots
    let half = vec![pair(1.6), pair(1.0), pair(1.6), pair(1.0)];
    let report = MetricReport::from_rollouts(
        "oracle",
        "single",
        &[("a".into(), half, truth.clone(), false), ("b".into(), truth.clone(), truth, false)],
        1.0,
    )
    .unwrap();
    assert_eq!(report.stability, 25.0);
}

fn traj_strategy() -> impl Strategy<Value = (Vec<Vec<Vec3>>, Vec<Vec<Vec3>>)> {
    let point = || (-4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z));
    (2usize..5, 1usize..4).prop_flat_map(move |(atoms, snaps)| {
        let t = prop::collection::vec(prop::collection::vec(point(), atoms), snaps);
        (t.clone(), t)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recovery_bounds((pred, truth) in traj_strategy()) {
        let (mae, mse) = metric_recovery(&pred, &truth).unwrap();
        prop_assert!(mse >= 0.0 && mae >= 0.0);
        prop_assert!(mae * mae <= mse * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn stability_is_invariant((pred, truth) in traj_strategy(), angle in 0.0..6.2f64, shift in -3.0..3.0f64) {
        let base = metric_stability(&pred, &truth, STABILITY_DELTA).unwrap();
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vec3::new(0.3, -0.5, 0.8)), angle);
        let mv = |t: &Vec<Vec<Vec3>>| -> Vec<Vec<Vec3>> {
            t.iter().map(|s| s.iter().map(|p| rot * p + Vec3::repeat(shift)).collect()).collect()
        };
        let moved = metric_stability(&mv(&pred), &mv(&truth), STABILITY_DELTA).unwrap();
        prop_assert_eq!(base, moved);
        let rev = |t: &Vec<Vec<Vec3>>| -> Vec<Vec<Vec3>> {
            t.iter().map(|s| s.iter().rev().copied().collect()).collect()
        };
        prop_assert_eq!(base, metric_stability(&rev(&pred), &rev(&truth), STABILITY_DELTA).unwrap());
        let (m1, s1) = metric_recovery(&pred, &truth).unwrap();
        let (m2, s2) = metric_recovery(&rev(&pred), &rev(&truth)).unwrap();
        prop_assert!((m1 - m2).abs() < 1e-12 && (s1 - s2).abs() < 1e-12);
    }
}

#[test]
fn fps_is_positive() {
    assert_eq!(metric_fps(20, 2.0), 10.0);
    let rec = toy(12, 0);
    let split = split_single(12, 0.75).unwrap();
    let model = TrainedModel::init(MethodKind::Ballistic, &tiny_config(0), false).unwrap();
    let report = evaluate(&model, &[rec], &split).unwrap();
    assert!(report.fps.is_finite() && report.fps > 0.0);
}

// ---- evaluation ------------------------------------------------------------

#[test]
fn truth_as_prediction_scores_zero() {
    let rec = toy(10, 0);
    let truth = rec.trajectory.positions.clone();
    let r = MetricReport::from_rollouts("oracle", "single", &[(rec.id.clone(), truth.clone(), truth, false)], 1.0).unwrap();
    assert_eq!((r.mae, r.mse, r.stability), (0.0, 0.0, 0.0));
}

#[test]
fn ballistic_baseline_smoke() {
    let rec = toy(30, 0);
    let split = split_single(30, 0.8).unwrap();
    let model = TrainedModel::init(MethodKind::Ballistic, &tiny_config(0), false).unwrap();
    let report = evaluate(&model, std::slice::from_ref(&rec), &split).unwrap();
    assert!(report.mae > 0.0 && report.mse > 0.0);
    assert_eq!(report.per_trajectory[0].snapshots, 6);
    assert_eq!(MetricReport::from_json(&report.to_json().unwrap()).unwrap(), report);
    // ballistic from snapshot 23 with the recorded velocity
    let (pred, diverged) = predict(&model, &rec, 23, 2, 0).unwrap();
    assert!(!diverged);
    let v = &rec.trajectory.velocities.as_ref().unwrap()[23];
    let x = &rec.trajectory.positions[23];
    for i in 0..x.len() {
        assert!((pred[1][i] - (x[i] + v[i] * 2.0)).norm() < 1e-12);
    }
}

// ---- training --------------------------------------------------------------

#[test]
fn zero_learning_rate_freezes_parameters() {
    let rec = toy(16, 0);
    let split = split_single(16, 0.75).unwrap();
    for method in [MethodKind::NeuralmdOde, MethodKind::Gnnmd, MethodKind::Verletmd] {
        let cfg = TrainConfig { lr: 0.0, ..tiny_config(2) };
        let init = TrainedModel::init(method, &cfg, false).unwrap();
        let out = train(method, std::slice::from_ref(&rec), &split, &cfg).unwrap();
        assert_eq!(out.model.net.params().flatten(), init.net.params().flatten(), "{method}");
        let c = &out.curves.train;
        assert!((c[0] - c[1]).abs() <= 1e-12 * c[0].abs(), "{method}: {c:?}");
    }
}

#[test]
fn zero_epochs_return_initialization() {
    let rec = toy(16, 0);
    let split = split_single(16, 0.75).unwrap();
    let cfg = tiny_config(0);
    let out = train(MethodKind::Verletmd, std::slice::from_ref(&rec), &split, &cfg).unwrap();
    let init = TrainedModel::init(MethodKind::Verletmd, &cfg, false).unwrap();
    assert_eq!(out.model.net.params().flatten(), init.net.params().flatten());
    assert!(out.curves.train.is_empty() && out.best_epoch.is_none());
}

#[test]
fn training_is_deterministic_for_every_method() {
    let rec = toy(14, 0);
    let split = split_single(14, 0.8).unwrap();
    for method in MethodKind::ALL {
        let cfg = tiny_config(2);
        let a = train(method, std::slice::from_ref(&rec), &split, &cfg).unwrap();
        let b = train(method, std::slice::from_ref(&rec), &split, &cfg).unwrap();
        assert_eq!(a.curves, b.curves, "{method}");
        assert_eq!(a.model.net.params().flatten(), b.model.net.params().flatten(), "{method}");
        let ra = evaluate(&a.model, std::slice::from_ref(&rec), &split).unwrap();
        let rb = evaluate(&b.model, std::slice::from_ref(&rec), &split).unwrap();
        assert_eq!(ra.without_timing(), rb.without_timing(), "{method}");
    }
}

#[test]
fn adjoint_training_matches_backprop_training() {
    let rec = toy(12, 0);
    let split = split_single(12, 0.75).unwrap();
    let cfg = TrainConfig { lr: 1e-3, ..tiny_config(2) };
    let mut adj = cfg.clone();
    adj.solver.gradient_mode = GradientMode::Adjoint;
    let a = train(MethodKind::NeuralmdOde, std::slice::from_ref(&rec), &split, &cfg).unwrap();
    let b = train(MethodKind::NeuralmdOde, std::slice::from_ref(&rec), &split, &adj).unwrap();
    for (x, y) in a.curves.train.iter().zip(&b.curves.train) {
        assert!((x - y).abs() < 1e-6 * x.abs(), "{x} vs {y}");
    }
}

#[test]
fn surrogate_velocity_is_trained_without_recorded_velocities() {
    let mut rec = toy(14, 0);
    rec.trajectory.velocities = None;
    let split = split_single(14, 0.8).unwrap();
    let cfg = tiny_config(2);
    for mode in [GradientMode::Backprop, GradientMode::Adjoint] {
        let mut cfg = cfg.clone();
        cfg.solver.gradient_mode = mode;
        let init = TrainedModel::init(MethodKind::NeuralmdOde, &cfg, true).unwrap();
        assert!(init.net.has_surrogate());
        let out = train(MethodKind::NeuralmdOde, std::slice::from_ref(&rec), &split, &cfg).unwrap();
        let moved = init
            .net
            .params()
            .iter()
            .filter(|(name, _)| name.starts_with(neuralmd::bindingnet::SURROGATE_PREFIX))
            .any(|(name, p)| out.model.net.params().get(name).unwrap() != &p.value);
        assert!(moved, "{mode:?}: surrogate tower never updated");
        evaluate(&out.model, std::slice::from_ref(&rec), &split).unwrap();
    }
}

#[test]
fn multi_trajectory_selection_uses_validation_loss() {
    let data: Vec<ComplexRecord> = (0..5).map(|s| toy(8, s)).collect();
    let split = split_multi(5, [0.6, 0.2, 0.2], 3).unwrap();
    let out = train(MethodKind::Gnnmd, &data, &split, &tiny_config(4)).unwrap();
    assert_eq!(out.curves.val.len(), 4);
    assert_eq!(out.best_epoch, select_epoch(SplitKind::MultiTrajectory, &out.curves));
    let report = evaluate(&out.model, &data, &split).unwrap();
    assert_eq!(report.split, "multi");
    assert_eq!(report.per_trajectory.len(), 1);
    assert_eq!(report.per_trajectory[0].snapshots, 7);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let rec = toy(14, 0);
    let split = split_single(14, 0.8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for method in [MethodKind::Gnnmd, MethodKind::Denoisingld, MethodKind::NeuralmdSde] {
        let out = train(method, std::slice::from_ref(&rec), &split, &tiny_config(1)).unwrap();
        let path = dir.path().join(format!("{method}.ckpt"));
        out.model.save(&path, &Default::default()).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back.method, method);
        assert_eq!(back.config, out.model.config);
        let a = predict(&out.model, &rec, 10, 3, 0).unwrap();
        let b = predict(&back, &rec, 10, 3, 0).unwrap();
        assert_eq!(a, b, "{method}");
    }
    assert!(matches!(TrainedModel::load(&dir.path().join("missing.ckpt")), Err(Error::Io { .. })));
}

#[test]
fn invalid_inputs_are_rejected() {
    let split = split_single(10, 0.8).unwrap();
    assert!(matches!(train(MethodKind::Gnnmd, &[], &split, &tiny_config(1)), Err(Error::EmptyInput(_))));
    let rec = toy(12, 0);
    assert!(matches!(
        train(MethodKind::Gnnmd, &[rec], &split, &tiny_config(1)),
        Err(Error::Split(_))
    ));
    let mut sde = tiny_config(1);
    sde.solver.gradient_mode = GradientMode::Adjoint;
    assert!(matches!(
        train(MethodKind::NeuralmdSde, &[toy(10, 0)], &split, &sde),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn single_split_prediction_uses_only_past_snapshots() {
    let rec = toy(20, 0);
    let mut blind = rec.clone();
    for s in blind.trajectory.positions.iter_mut().skip(16) {
        for p in s.iter_mut() {
            *p += Vec3::new(50.0, 0.0, 0.0);
        }
    }
    blind.trajectory.velocities = None;
    let mut clean = rec.clone();
    clean.trajectory.velocities = None;
    let model = TrainedModel::init(MethodKind::Gnnmd, &tiny_config(0), false).unwrap();
    assert_eq!(predict(&model, &clean, 15, 4, 0).unwrap(), predict(&model, &blind, 15, 4, 0).unwrap());
}
