mod common;

use std::collections::BTreeMap;

use common::{max_diff, probe_complex, randomize_zeros, randomized_net, small_config};
use neuralmd::bindingnet::{centralize_complex, BindingNet, ComplexForce};
use neuralmd::dynamics::{
    adjoint_gradients, integrate_ode, integrate_sde, integrate_verlet, rollout_graph, surrogate_velocity,
    FrozenForce, GraphForce, LangevinConfig, PhaseState, SolverConfig, SolverMethod,
};
use neuralmd::geometry::{random_rotation, Vec3};
use neuralmd::tensor::{Bound, Graph, ParamSet, Tensor, Var};
use neuralmd::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn harmonic(k: f64) -> impl Fn(&[Vec3]) -> Result<Vec<Vec3>> {
    move |x: &[Vec3]| Ok(x.iter().map(|p| -p * k).collect())
}

fn oscillator_error(dt_inverse: usize) -> f64 {
    let s = PhaseState::new(vec![Vec3::x()], vec![Vec3::zeros()], 0.0).unwrap();
    let times: Vec<f64> = (1..=5).map(f64::from).collect();
    let cfg = SolverConfig { substeps: dt_inverse, ..SolverConfig::default() };
    let r = integrate_ode(&s, &times, &harmonic(1.0), &[1.0], &cfg).unwrap();
    times
        .iter()
        .zip(&r.positions)
        .map(|(t, x)| (x[0].x - t.cos()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn euler_converges_at_first_order() {
    // dt ∈ {0.1, 0.05, 0.02} and their halves
    for n in [10usize, 20, 50] {
        let ratio = oscillator_error(n) / oscillator_error(2 * n);
        assert!((1.7..=2.3).contains(&ratio), "dt = 1/{n}: ratio {ratio}");
        let inverse = 1.0 / ratio;
        assert!((0.4..=0.6).contains(&inverse));
    }
}

#[test]
fn verlet_energy_drift_is_bounded() {
    let s = PhaseState::new(vec![Vec3::x()], vec![Vec3::zeros()], 0.0).unwrap();
    // 100 outputs × 100 substeps = 10⁴ steps of dt = 0.01
    let times: Vec<f64> = (1..=100).map(f64::from).collect();
    let r = integrate_verlet(&s, &times, &harmonic(1.0), &[1.0], 100).unwrap();
    let e0 = 0.5;
    let worst = r
        .positions
        .iter()
        .zip(&r.velocities)
        .map(|(x, v)| ((0.5 * x[0].norm_squared() + 0.5 * v[0].norm_squared()) - e0).abs() / e0)
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "relative drift {worst}");
}

#[test]
fn noise_free_sde_equals_ode_bitwise() {
    let (lig, prot) = probe_complex();
    let (lig, prot, _) = centralize_complex(&lig, &prot);
    let net = randomized_net(small_config(8, 1), 4);
    let field = ComplexForce::new(&net, &lig, &prot).unwrap();
    let force = FrozenForce { field: &field, params: net.params() };
    let s = PhaseState::new(lig.positions.clone(), vec![Vec3::new(0.01, -0.02, 0.0); 3], 0.0).unwrap();
    let times = [0.5, 1.0, 2.0];
    let ode = integrate_ode(&s, &times, &force, &lig.masses, &SolverConfig::default()).unwrap();
    let cfg = SolverConfig { method: SolverMethod::EulerMaruyama, ..SolverConfig::default() };
    let lang = LangevinConfig { gamma: 0.0, temperature: 0.0, k_b: 1.0, seed: 99 };
    let sde = integrate_sde(&s, &times, &force, &lig.masses, &cfg, &lang).unwrap();
    assert_eq!(ode, sde);
}

fn langevin_velocity_variance(substeps: usize, seed: u64) -> f64 {
    let (k_b, temp, m, gamma) = (1.0, 0.5, 2.0, 1.0);
    let s = PhaseState::new(vec![Vec3::zeros()], vec![Vec3::zeros()], 0.0).unwrap();
    let times: Vec<f64> = (1..=2000).map(f64::from).collect();
    let cfg = SolverConfig { method: SolverMethod::EulerMaruyama, substeps, ..SolverConfig::default() };
    let lang = LangevinConfig { gamma, temperature: temp, k_b, seed };
    let r = integrate_sde(&s, &times, &harmonic(1.0), &[m], &cfg, &lang).unwrap();
    // each axis is an independent 1-D oscillator; pool them after a burn-in
    let samples: Vec<f64> = r.velocities[20..].iter().flat_map(|v| [v[0].x, v[0].y, v[0].z]).collect();
    samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64
}

/// Stationary covariance of the discrete Euler–Maruyama map
/// `z ← A z + noise`, found by iterating `C ← A C Aᵀ + Q` to convergence.
fn euler_maruyama_stationary_variance(dt: f64, omega2: f64, gamma: f64, sigma2: f64) -> f64 {
    let a = [[1.0, dt], [-omega2 * dt, 1.0 - gamma * dt]];
    let mut c = [[0.0f64; 2]; 2];
    for _ in 0..100_000 {
        let mut next = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        next[i][j] += a[i][k] * c[k][l] * a[j][l];
                    }
                }
            }
        }
        next[1][1] += sigma2 * dt;
        c = next;
    }
    c[1][1]
}

#[test]
fn langevin_oscillator_matches_discrete_stationary_variance() {
    // k_B = 1, T = 0.5, m = 2, γ = 1, k = 1, dt = 0.1
    let exact = euler_maruyama_stationary_variance(0.1, 0.5, 1.0, 0.5);
    let var = langevin_velocity_variance(10, 2024);
    assert!((var - exact).abs() / exact < 0.1, "variance {var} vs discrete {exact}");
}

#[test]
fn langevin_oscillator_reaches_equipartition_at_fine_steps() {
    let expected = 0.25;
    let var = langevin_velocity_variance(100, 2024);
    assert!((var - expected).abs() / expected < 0.1, "variance {var} vs {expected}");
    let bias = euler_maruyama_stationary_variance(0.01, 0.5, 1.0, 0.5) / expected - 1.0;
    assert!(bias.abs() < 0.02);
}

/// `F = −k·x` with `k` the only parameter.
struct LinearSpring;

impl GraphForce for LinearSpring {
    type Ctx = Var;

    fn prepare(&self, g: &mut Graph, bound: &Bound) -> Result<Var> {
        let k = bound.get("k")?;
        Ok(g.neg(k))
    }

    fn force(&self, g: &mut Graph, _bound: &Bound, neg_k: &Var, x: Var) -> Result<Var> {
        g.mul(x, *neg_k)
    }
}

fn quadratic_loss(targets: Vec<Vec<Vec3>>) -> impl Fn(&[Vec<Vec3>]) -> Result<(f64, Vec<Vec<Vec3>>)> {
    move |pred: &[Vec<Vec3>]| {
        let mut value = 0.0;
        let mut grads = Vec::new();
        for (p, t) in pred.iter().zip(&targets) {
            let d: Vec<Vec3> = p.iter().zip(t).map(|(a, b)| a - b).collect();
            value += d.iter().map(|v| 0.5 * v.norm_squared()).sum::<f64>();
            grads.push(d);
        }
        Ok((value, grads))
    }
}

struct Backprop {
    loss: f64,
    params: BTreeMap<String, Tensor>,
    x0: Vec<Vec3>,
    v0: Vec<Vec3>,
    scalars: usize,
}

fn backprop<F: GraphForce>(
    params: &ParamSet,
    field: &F,
    s: &PhaseState,
    masses: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
    targets: &[Vec<Vec3>],
) -> Backprop {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let ctx = field.prepare(&mut g, &bound).unwrap();
    let x0 = g.leaf(Tensor::from_points(&s.x));
    let v0 = g.leaf(Tensor::from_points(&s.v));
    let outs = rollout_graph(&mut g, &bound, field, &ctx, x0, v0, masses, s.t, times, cfg, None).unwrap();
    let mut total = g.scalar(0.0);
    for (x, t) in outs.iter().zip(targets) {
        let target = g.constant(Tensor::from_points(t));
        let d = g.sub(*x, target).unwrap();
        let sq = g.mul(d, d).unwrap();
        let s = g.sum(sq);
        let half = g.mul_scalar(s, 0.5);
        total = g.add(total, half).unwrap();
    }
    g.backward(total).unwrap();
    Backprop {
        loss: g.value(total).item(),
        params: bound.grads(&g),
        x0: g.grad(x0).to_points(),
        v0: g.grad(v0).to_points(),
        scalars: g.allocated_scalars(),
    }
}

fn relative_error(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    let scale = b.values().flat_map(|t| t.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .iter()
        .map(|(k, t)| {
            t.data().iter().zip(b[k].data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    diff / scale.max(1e-300)
}

#[test]
fn adjoint_matches_backprop_for_linear_force() {
    let mut params = ParamSet::new(0);
    params.insert("k", Tensor::scalar(1.3)).unwrap();
    let s = PhaseState::new(
        vec![Vec3::new(1.0, 0.5, -0.2), Vec3::new(-0.3, 0.8, 0.1)],
        vec![Vec3::new(0.1, 0.0, 0.3), Vec3::new(0.0, -0.2, 0.05)],
        0.0,
    )
    .unwrap();
    let masses = [1.0, 2.5];
    let times = [0.5, 1.0, 1.5, 2.0];
    let targets: Vec<Vec<Vec3>> = times.iter().map(|t| vec![Vec3::new(0.2 * t, 0.0, 0.1); 2]).collect();
    let cfg = SolverConfig { substeps: 8, ..SolverConfig::default() };
    let bp = backprop(&params, &LinearSpring, &s, &masses, &times, &cfg, &targets);
    let adj = adjoint_gradients(&params, &LinearSpring, &s, &masses, &times, &cfg, &quadratic_loss(targets)).unwrap();
    assert!((adj.loss - bp.loss).abs() < 1e-12);
    let rel = relative_error(&adj.param_grads, &bp.params);
    assert!(rel < 1e-3, "relative error {rel}");
    assert!(max_diff(&adj.grad_x0, &bp.x0) < 1e-6);
    assert!(max_diff(&adj.grad_v0, &bp.v0) < 1e-6);
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let mut params = ParamSet::new(0);
    params.insert("k", Tensor::scalar(0.7)).unwrap();
    let s = PhaseState::new(vec![Vec3::x()], vec![Vec3::y()], 0.0).unwrap();
    let zero = |p: &[Vec<Vec3>]| -> Result<(f64, Vec<Vec<Vec3>>)> {
        Ok((0.0, p.iter().map(|s| vec![Vec3::zeros(); s.len()]).collect()))
    };
    let adj = adjoint_gradients(&params, &LinearSpring, &s, &[1.0], &[1.0, 2.0], &SolverConfig::default(), &zero).unwrap();
    assert_eq!(adj.loss, 0.0);
    assert_eq!(adj.param_grads["k"].item(), 0.0);
    assert!(adj.grad_x0.iter().chain(&adj.grad_v0).all(|v| *v == Vec3::zeros()));
}

#[test]
fn adjoint_rejects_stochastic_solver() {
    let mut params = ParamSet::new(0);
    params.insert("k", Tensor::scalar(0.7)).unwrap();
    let s = PhaseState::new(vec![Vec3::x()], vec![Vec3::y()], 0.0).unwrap();
    let cfg = SolverConfig { method: SolverMethod::EulerMaruyama, ..SolverConfig::default() };
    let loss = quadratic_loss(vec![vec![Vec3::zeros()]]);
    let err = adjoint_gradients(&params, &LinearSpring, &s, &[1.0], &[1.0], &cfg, &loss).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
}

fn small_net_system() -> (BindingNet, neuralmd::bindingnet::LigandState, neuralmd::bindingnet::ProteinStructure) {
    let (lig, prot) = probe_complex();
    let (lig, prot, _) = centralize_complex(&lig, &prot);
    (randomized_net(small_config(8, 1), 11), lig, prot)
}

#[test]
fn adjoint_matches_backprop_for_bindingnet() {
    let (net, lig, prot) = small_net_system();
    let field = ComplexForce::new(&net, &lig, &prot).unwrap();
    let v0 = vec![Vec3::new(0.05, -0.02, 0.01), Vec3::new(-0.03, 0.0, 0.04), Vec3::new(0.0, 0.02, -0.05)];
    let s = PhaseState::new(lig.positions.clone(), v0, 0.0).unwrap();
    // five Euler steps with an output after each
    let times = [0.2, 0.4, 0.6, 0.8, 1.0];
    let cfg = SolverConfig { substeps: 5, ..SolverConfig::default() };
    let targets: Vec<Vec<Vec3>> = times
        .iter()
        .map(|t| lig.positions.iter().map(|p| p + Vec3::new(0.3, -0.2, 0.1) * *t).collect())
        .collect();
    let bp = backprop(net.params(), &field, &s, &lig.masses, &times, &cfg, &targets);
    let adj = adjoint_gradients(net.params(), &field, &s, &lig.masses, &times, &cfg, &quadratic_loss(targets)).unwrap();
    assert!((adj.loss - bp.loss).abs() < 1e-10 * bp.loss.max(1.0));
    let rel = relative_error(&adj.param_grads, &bp.params);
    assert!(rel < 1e-3, "relative error {rel}");
    assert!(max_diff(&adj.grad_x0, &bp.x0) < 1e-6 * bp.x0.iter().map(|v| v.amax()).fold(1.0, f64::max));
}

#[test]
fn adjoint_memory_does_not_grow_with_steps() {
    let (net, lig, prot) = small_net_system();
    let field = ComplexForce::new(&net, &lig, &prot).unwrap();
    let s = PhaseState::new(lig.positions.clone(), vec![Vec3::zeros(); 3], 0.0).unwrap();
    let run = |substeps: usize| {
        let cfg = SolverConfig { substeps, ..SolverConfig::default() };
        let targets = vec![lig.positions.clone()];
        let adj = adjoint_gradients(net.params(), &field, &s, &lig.masses, &[1.0], &cfg, &quadratic_loss(targets.clone())).unwrap();
        let bp = backprop(net.params(), &field, &s, &lig.masses, &[1.0], &cfg, &targets);
        (adj.peak_scalars, bp.scalars)
    };
    let (adj5, bp5) = run(5);
    let (adj20, bp20) = run(20);
    assert_eq!(adj5, adj20);
    assert!(bp20 > 2 * bp5, "backprop graph should grow: {bp5} -> {bp20}");
}

#[test]
fn surrogate_velocity_cases() {
    let (lig, prot) = probe_complex();
    let (lig, prot, _) = centralize_complex(&lig, &prot);
    let mut net = BindingNet::new(small_config(8, 2), 5).unwrap();
    net.add_surrogate(6).unwrap();
    let shift = Vec3::new(0.1, -0.05, 0.2);
    let next: Vec<Vec3> = lig.positions.iter().map(|p| p + shift).collect();
    let snaps = vec![lig.positions.clone(), next.clone()];

    // zero heads: pure coordinate momentum
    let v = surrogate_velocity(&net, &lig, &prot, &snaps, 0).unwrap();
    assert_eq!(v, vec![next[0] - lig.positions[0], next[1] - lig.positions[1], next[2] - lig.positions[2]]);
    // last index falls back to the previous difference
    let v_last = surrogate_velocity(&net, &lig, &prot, &snaps, 1).unwrap();
    assert_eq!(v_last, v);
    // static trajectory
    let still = vec![lig.positions.clone(); 2];
    assert!(surrogate_velocity(&net, &lig, &prot, &still, 0).unwrap().iter().all(|v| *v == Vec3::zeros()));
    assert!(matches!(
        surrogate_velocity(&net, &lig, &prot, &still[..1], 0),
        Err(Error::EmptyInput(_))
    ));

    // trained-looking heads: equivariant under rotation of both snapshots
    randomize_zeros(&mut net, 17);
    let v = surrogate_velocity(&net, &lig, &prot, &snaps, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let r = random_rotation(&mut rng);
        let lig_r = lig.map_points(|p| r * p);
        let prot_r = prot.map_points(|p| r * p);
        let snaps_r: Vec<Vec<Vec3>> = snaps.iter().map(|s| s.iter().map(|p| r * p).collect()).collect();
        let v_r = surrogate_velocity(&net, &lig_r, &prot_r, &snaps_r, 0).unwrap();
        let expected: Vec<Vec3> = v.iter().map(|p| r * p).collect();
        assert!(max_diff(&v_r, &expected) < 1e-6);
    }
    let learned: f64 = v.iter().zip(&snaps[1]).zip(&snaps[0]).map(|((v, b), a)| (v - (b - a)).amax()).fold(0.0, f64::max);
    assert!(learned > 1e-6, "randomized surrogate should contribute");
}

#[test]
fn graph_rollout_matches_numeric_rollout() {
    let (net, lig, prot) = small_net_system();
    let field = ComplexForce::new(&net, &lig, &prot).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v0: Vec<Vec3> = (0..3).map(|_| Vec3::new(rng.random_range(-0.1..0.1), 0.02, -0.01)).collect();
    let s = PhaseState::new(lig.positions.clone(), v0, 0.0).unwrap();
    let times = [1.0, 2.0, 3.0];
    let cfg = SolverConfig::default();
    let numeric = integrate_ode(&s, &times, &FrozenForce { field: &field, params: net.params() }, &lig.masses, &cfg).unwrap();
    let mut g = Graph::new();
    let bound = net.params().bind_frozen(&mut g);
    let ctx = field.prepare(&mut g, &bound).unwrap();
    let x0 = g.constant(Tensor::from_points(&s.x));
    let v0 = g.constant(Tensor::from_points(&s.v));
    let outs = rollout_graph(&mut g, &bound, &field, &ctx, x0, v0, &lig.masses, 0.0, &times, &cfg, None).unwrap();
    for (o, p) in outs.iter().zip(&numeric.positions) {
        assert!(max_diff(&g.value(*o).to_points(), p) < 1e-12);
    }
}
