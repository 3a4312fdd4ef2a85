mod common;

use common::*;
use neuralmd::baselines::*;
use neuralmd::bindingnet::{centralize_complex, BindingNet, ModelConfig};
use neuralmd::data::{generate_synthetic, ComplexRecord, SyntheticSpec, SyntheticSystem};
use neuralmd::geometry::{random_rotation, Vec3};
use neuralmd::training::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn harmonic_toy() -> ComplexRecord {
    generate_synthetic(&SyntheticSpec::default()).unwrap()
}

fn small(method: MethodKind, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        cond_dim: cfg.model_for(method).cond_dim,
        ..small_config(16, 2)
    };
    cfg
}

fn loss_drop(curve: &[f64]) -> f64 {
    1.0 - curve[curve.len() - 1] / curve[0]
}

fn cosine(a: &[Vec3], b: &[Vec3]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.dot(y)).sum();
    let na: f64 = a.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    dot / (na * nb)
}

// ---- VerletMD ------------------------------------------------------------

#[test]
fn verletmd_with_zero_energy_head_is_ballistic() {
    let net = BindingNet::new(small_config(16, 2), 0).unwrap();
    let (lig, prot) = probe_complex();
    let v0 = vec![Vec3::new(0.1, -0.05, 0.02); lig.len()];
    let r = verletmd_rollout(&net, &lig, &prot, &lig.positions, &v0, 4, 3).unwrap();
    let b = ballistic_rollout(&lig.positions, &v0, 4);
    for (p, q) in r.positions.iter().zip(&b.positions) {
        assert!(max_diff(p, q) < 1e-12);
    }
    let again = verletmd_rollout(&net, &lig, &prot, &lig.positions, &v0, 4, 3).unwrap();
    assert_eq!(r, again);
}

#[test]
fn verletmd_learns_the_synthetic_force() {
    let rec = harmonic_toy();
    let spec = SyntheticSpec::default();
    let system = SyntheticSystem::from_spec(&spec).unwrap();
    let split = split_single(rec.trajectory.len(), 0.8).unwrap();
    let out = train(MethodKind::Verletmd, std::slice::from_ref(&rec), &split, &small(MethodKind::Verletmd, 200)).unwrap();
    assert!(loss_drop(&out.curves.train) >= 0.5, "{:?}", out.curves.train);
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for t in split.test.iter().copied() {
        let lig = rec.ligand_at(t).unwrap();
        pred.extend(out.model.net.energy_force(&lig, &rec.protein).unwrap());
        truth.extend(system.force(&lig.positions));
    }
    let c = cosine(&pred, &truth);
    assert!(c > 0.9, "cosine similarity {c}");
}

// ---- GNN-MD --------------------------------------------------------------

fn gnn_net(seed: u64) -> BindingNet {
    let mut net = BindingNet::new(small_config(16, 2), seed).unwrap();
    add_gnnmd_head(&mut net, seed).unwrap();
    net
}

#[test]
fn gnnmd_zero_displacement_is_a_fixed_point() {
    let net = gnn_net(1);
    let (lig, prot) = probe_complex();
    let zero = vec![Vec3::zeros(); lig.len()];
    let r = gnnmd_rollout(&net, &lig, &prot, &lig.positions, &zero, 5).unwrap();
    assert!(r.positions.iter().all(|s| s == &lig.positions));
    assert_eq!(r, gnnmd_rollout(&net, &lig, &prot, &lig.positions, &zero, 5).unwrap());
}

#[test]
fn gnnmd_prediction_is_equivariant() {
    let mut net = gnn_net(2);
    randomize_zeros(&mut net, 2);
    for seed in 0..5 {
        let (lig, prot) = random_complex(seed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let d: Vec<Vec3> = (0..lig.len())
            .map(|_| Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
            .collect();
        let base = gnnmd_predict(&net, &lig, &prot, &lig.positions, &d).unwrap();
        let r = random_rotation(&mut rng);
        let t = Vec3::new(4.0, -1.0, 2.5);
        let lig2 = lig.map_points(|p| r * p + t);
        let prot2 = prot.map_points(|p| r * p + t);
        let d2: Vec<Vec3> = d.iter().map(|v| r * v).collect();
        let moved = gnnmd_predict(&net, &lig2, &prot2, &lig2.positions, &d2).unwrap();
        let expect: Vec<Vec3> = base.iter().map(|p| r * p + t).collect();
        assert!(max_diff(&moved, &expect) < 1e-6, "seed {seed}");
    }
}

#[test]
fn gnnmd_learns_zero_displacement_on_a_static_trajectory() {
    let mut rec = generate_synthetic(&SyntheticSpec {
        snapshots: 20,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let frozen = rec.trajectory.positions[0].clone();
    rec.trajectory.positions.iter_mut().for_each(|s| *s = frozen.clone());
    rec.trajectory.velocities = None;
    let split = split_single(20, 0.8).unwrap();
    let cfg = small(MethodKind::Gnnmd, 200);
    let mut model = TrainedModel::init(MethodKind::Gnnmd, &cfg, false).unwrap();
    randomize_zeros(&mut model.net, 9);
    let zero = vec![Vec3::zeros(); frozen.len()];
    let (lig, prot, _) = centralize_complex(&rec.ligand_at(0).unwrap(), &rec.protein);
    let before = gnnmd_predict(&model.net, &lig, &prot, &lig.positions, &zero).unwrap();
    assert!(max_diff(&before, &lig.positions) > 1e-2, "randomized model should move atoms");
    let out = train_model(model, std::slice::from_ref(&rec), &split).unwrap();
    let after = gnnmd_predict(&out.model.net, &lig, &prot, &lig.positions, &zero).unwrap();
    let mean: f64 = after.iter().zip(&lig.positions).map(|(a, b)| (a - b).norm()).sum::<f64>() / frozen.len() as f64;
    assert!(mean < 1e-2, "mean |Δx| = {mean}");
}

#[test]
fn gnnmd_trains_and_drifts_monotonically() {
    let rec = harmonic_toy();
    let split = split_single(rec.trajectory.len(), 0.8).unwrap();
    let out = train(MethodKind::Gnnmd, std::slice::from_ref(&rec), &split, &small(MethodKind::Gnnmd, 200)).unwrap();
    assert!(loss_drop(&out.curves.train) >= 0.5, "{:?}", out.curves.train);
    let start = *split.train.last().unwrap();
    let (pred, _) = predict(&out.model, &rec, start, 20, 0).unwrap();
    let err: Vec<f64> = pred
        .iter()
        .enumerate()
        .map(|(k, p)| metric_recovery(std::slice::from_ref(p), &rec.trajectory.positions[start + 1 + k..start + 2 + k]).unwrap().0)
        .collect();
    let windows: Vec<f64> = err.chunks(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] >= w[0]), "window errors {windows:?}");
}

// ---- DenoisingLD ---------------------------------------------------------

#[test]
fn zero_score_sampler_is_brownian() {
    let sched = NoiseSchedule {
        sigmas: vec![1.0],
        steps_per_level: 1,
        eps_scale: 1e-2,
    };
    let walkers = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut variances = Vec::new();
    for steps in [25usize, 50, 100] {
        let s = NoiseSchedule {
            steps_per_level: steps,
            ..sched.clone()
        };
        let x0 = vec![Vec3::zeros(); walkers];
        let x = annealed_langevin(&x0, &s, &mut rng, |x, _| Ok(vec![Vec3::zeros(); x.len()]))
            .unwrap()
            .unwrap();
        let var = x.iter().map(|p| p.norm_squared()).sum::<f64>() / (3 * walkers) as f64;
        variances.push((steps as f64, var));
    }
    // least-squares slope through the origin
    let slope = variances.iter().map(|(s, v)| s * v).sum::<f64>() / variances.iter().map(|(s, _)| s * s).sum::<f64>();
    let eps = sched.eps_scale;
    assert!((slope / eps - 1.0).abs() < 0.2, "slope {slope} vs ε {eps}");
}

#[test]
fn denoising_score_is_equivariant() {
    let cfg = ModelConfig {
        cond_dim: DENOISING_COND_DIM,
        ..small_config(16, 2)
    };
    let mut net = BindingNet::new(cfg, 4).unwrap();
    randomize_zeros(&mut net, 4);
    let (lig, prot) = random_complex(3, 4);
    let mu: Vec<Vec3> = lig.positions.iter().map(|p| p + Vec3::new(0.1, -0.2, 0.05)).collect();
    let base = denoising_score(&net, &lig, &prot, &lig.positions, &mu, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = random_rotation(&mut rng);
    let t = Vec3::new(-2.0, 1.0, 3.0);
    let lig2 = lig.map_points(|p| r * p + t);
    let prot2 = prot.map_points(|p| r * p + t);
    let mu2: Vec<Vec3> = mu.iter().map(|p| r * p + t).collect();
    let moved = denoising_score(&net, &lig2, &prot2, &lig2.positions, &mu2, 0.3).unwrap();
    let expect: Vec<Vec3> = base.iter().map(|s| r * s).collect();
    assert!(max_diff(&moved, &expect) < 1e-6 * (1.0 + base.iter().map(|s| s.amax()).fold(0.0, f64::max)));
}

#[test]
fn denoising_rollout_is_seed_reproducible() {
    let cfg = ModelConfig {
        cond_dim: DENOISING_COND_DIM,
        ..small_config(8, 1)
    };
    let net = BindingNet::new(cfg, 0).unwrap();
    let (lig, prot) = probe_complex();
    let d0 = vec![Vec3::new(0.01, 0.0, 0.0); lig.len()];
    let sched = NoiseSchedule::geometric(1.0, 0.1, 3, 2, 2e-3).unwrap();
    let a = denoisingld_rollout(&net, &lig, &prot, &lig.positions, &d0, 3, &sched, 7).unwrap();
    let b = denoisingld_rollout(&net, &lig, &prot, &lig.positions, &d0, 3, &sched, 7).unwrap();
    let c = denoisingld_rollout(&net, &lig, &prot, &lig.positions, &d0, 3, &sched, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.positions, c.positions);
}

/// Relative RMS distance between the model score and the Gaussian
/// perturbation score around `μ = x_t + v`.
fn score_error(net: &BindingNet, rec: &ComplexRecord, v: Vec3, sigmas: &[f64]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut num, mut den) = (0.0, 0.0);
    for t in 16..19 {
        let (lig, prot, _) = centralize_complex(&rec.ligand_at(t).unwrap(), &rec.protein);
        let mu: Vec<Vec3> = lig.positions.iter().map(|p| p + v).collect();
        for &sigma in sigmas {
            let x: Vec<Vec3> = mu
                .iter()
                .map(|m| m + Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * sigma)
                .collect();
            let s = denoising_score(net, &lig, &prot, &x, &mu, sigma).unwrap();
            for i in 0..x.len() {
                let analytic = -(x[i] - mu[i]) / (sigma * sigma);
                num += (s[i] - analytic).norm_squared();
                den += analytic.norm_squared();
            }
        }
    }
    (num / den).sqrt()
}

/// On a constant-velocity trajectory the clean next snapshot is exactly
/// `μ = x_t + d_t`, so the perturbed-data score at level σ is `−(x̃ − μ)/σ²`.
#[test]
fn trained_score_matches_gaussian_oracle() {
    let base = harmonic_toy();
    let v = Vec3::new(0.02, -0.01, 0.015);
    let x0 = base.trajectory.positions[0].clone();
    let mut rec = base.clone();
    rec.trajectory.positions = (0..20).map(|k| x0.iter().map(|p| p + v * k as f64).collect()).collect();
    rec.trajectory.velocities = None;
    let split = split_single(20, 0.8).unwrap();
    let mut cfg = small(MethodKind::Denoisingld, 100);
    cfg.lr = 1e-3;
    // the relative error scales as |D|/σ, so keep the smallest level coarse
    cfg.schedule = NoiseSchedule::geometric(1.0, 0.1, 3, 2, 2e-3).unwrap();
    let mut model = TrainedModel::init(MethodKind::Denoisingld, &cfg, false).unwrap();
    randomize_zeros(&mut model.net, 21);
    let before = score_error(&model.net, &rec, v, &cfg.schedule.sigmas);
    let out = train_model(model, std::slice::from_ref(&rec), &split).unwrap();
    let rel = score_error(&out.model.net, &rec, v, &cfg.schedule.sigmas);
    assert!(before > 0.5, "randomized score error {before}");
    assert!(rel < 0.15, "relative RMS {rel}");
}

#[test]
fn denoisingld_training_reduces_loss() {
    let rec = harmonic_toy();
    let split = split_single(rec.trajectory.len(), 0.8).unwrap();
    let out = train(MethodKind::Denoisingld, std::slice::from_ref(&rec), &split, &small(MethodKind::Denoisingld, 200)).unwrap();
    assert!(loss_drop(&out.curves.train) >= 0.5, "{:?}", &out.curves.train);
    let report = evaluate(&out.model, std::slice::from_ref(&rec), &split).unwrap();
    assert!(report.mae.is_finite());
}
