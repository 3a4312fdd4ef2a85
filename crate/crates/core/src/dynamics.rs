//! Second-order trajectory solvers over the augmented state `[x; v]`.
//!
//! Two families live here. The numeric integrators take a plain force
//! callback and work on `Vec<Vec3>`; they serve evaluation rollouts, the
//! synthetic generators and the analytic oracles. [`rollout_graph`] records
//! the same Euler scheme on a [`Graph`] so losses can be backpropagated
//! through the solver, and [`adjoint_gradients`] computes the same gradients
//! with per-step local graphs whose size does not depend on the step count.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bindingnet::{BindingNet, LigandState, LigandTopology, ProteinStructure};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};

/// Positions and velocities at time `t` (snapshot-interval units).
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub t: f64,
}

impl PhaseState {
    pub fn new(x: Vec<Vec3>, v: Vec<Vec3>, t: f64) -> Result<Self> {
        if x.len() != v.len() {
            return Err(Error::Config(format!(
                "{} positions but {} velocities",
                x.len(),
                v.len()
            )));
        }
        Ok(Self { x, v, t })
    }

    fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|p| p.iter().all(|c| c.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    Euler,
    EulerMaruyama,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Backprop,
    Adjoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Euler steps per unit snapshot interval.
    pub substeps: usize,
    pub gradient_mode: GradientMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Euler,
            substeps: 4,
            gradient_mode: GradientMode::Backprop,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangevinConfig {
    pub gamma: f64,
    pub temperature: f64,
    pub k_b: f64,
    pub seed: u64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            temperature: 0.01,
            k_b: 1.0,
            seed: 0,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.temperature >= 0.0) || !(self.k_b >= 0.0) {
            return Err(Error::Config("gamma, temperature and k_b must be non-negative".into()));
        }
        Ok(())
    }

    fn noise_scale(&self, mass: f64) -> f64 {
        (2.0 * self.gamma * self.k_b * self.temperature / mass).sqrt()
    }

    fn has_noise(&self) -> bool {
        self.gamma > 0.0 && self.temperature > 0.0 && self.k_b > 0.0
    }
}

/// Independent RNG seed for one trajectory of a run.
pub fn stream_seed(seed: u64, trajectory: u64) -> u64 {
    // SplitMix64 finalizer over the pair
    let mut z = seed ^ trajectory.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Numeric force callback.
pub trait ForceField {
    fn force(&self, x: &[Vec3]) -> Result<Vec<Vec3>>;
}

impl<F> ForceField for F
where
    F: Fn(&[Vec3]) -> Result<Vec<Vec3>>,
{
    fn force(&self, x: &[Vec3]) -> Result<Vec<Vec3>> {
        self(x)
    }
}

/// Force expressed on a graph, differentiable in coordinates and parameters.
pub trait GraphForce {
    /// Per-graph data computed once, such as a protein encoding.
    type Ctx;
    fn prepare(&self, g: &mut Graph, bound: &Bound) -> Result<Self::Ctx>;
    /// `x` is `n×3`; the result must be `n×3`.
    fn force(&self, g: &mut Graph, bound: &Bound, ctx: &Self::Ctx, x: Var) -> Result<Var>;
}

/// Numeric view of a [`GraphForce`] with frozen parameters.
pub struct FrozenForce<'a, F> {
    pub field: &'a F,
    pub params: &'a ParamSet,
}

impl<F: GraphForce> ForceField for FrozenForce<'_, F> {
    fn force(&self, x: &[Vec3]) -> Result<Vec<Vec3>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let ctx = self.field.prepare(&mut g, &bound)?;
        let xv = g.constant(Tensor::from_points(x));
        let f = self.field.force(&mut g, &bound, &ctx, xv)?;
        Ok(g.value(f).to_points())
    }
}

fn check_finite(forces: &[Vec3]) -> Result<()> {
    match forces.iter().position(|f| !f.iter().all(|c| c.is_finite())) {
        Some(atom) => Err(Error::NonFiniteForce { atom }),
        None => Ok(()),
    }
}

/// `(dx/dt, dv/dt) = (v, F(x)/m)`.
pub fn derivative(
    state: &PhaseState,
    force: &impl ForceField,
    masses: &[f64],
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let f = force.force(&state.x)?;
    check_finite(&f)?;
    let a = f.iter().zip(masses).map(|(f, m)| f / *m).collect();
    Ok((state.v.clone(), a))
}

/// Number of solver steps and the step size between consecutive output times.
pub fn step_schedule(t0: f64, t_list: &[f64], substeps: usize) -> Result<Vec<(usize, f64)>> {
    let mut prev = t0;
    let mut out = Vec::with_capacity(t_list.len());
    for &t in t_list {
        if !(t > prev) {
            return Err(Error::Config(format!(
                "output times must be strictly increasing and after the start; got {t} after {prev}"
            )));
        }
        let gap = t - prev;
        let n = ((gap * substeps as f64) - 1e-9).ceil().max(1.0) as usize;
        out.push((n, gap / n as f64));
        prev = t;
    }
    Ok(out)
}

/// Positions (and velocities) emitted at the requested times. A rollout that
/// hits a non-finite state stops early and records the last finite time.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<Vec3>>,
    pub velocities: Vec<Vec<Vec3>>,
    pub diverged_after: Option<f64>,
}

impl Rollout {
    pub fn is_complete(&self) -> bool {
        self.diverged_after.is_none()
    }

    /// Converts a truncated rollout into [`Error::Diverged`].
    pub fn complete(self) -> Result<Self> {
        match self.diverged_after {
            Some(t) => Err(Error::Diverged { last_finite_time: t }),
            None => Ok(self),
        }
    }

    /// Pads a truncated rollout with its last finite snapshot (or `fallback`
    /// when nothing was emitted) so it covers `len` outputs.
    pub fn padded_positions(&self, len: usize, fallback: &[Vec3]) -> Vec<Vec<Vec3>> {
        let mut out = self.positions.clone();
        let last = out.last().cloned().unwrap_or_else(|| fallback.to_vec());
        out.resize(len, last);
        out
    }
}

struct Emitter {
    rollout: Rollout,
}

impl Emitter {
    fn new(n: usize) -> Self {
        Self {
            rollout: Rollout {
                times: Vec::with_capacity(n),
                positions: Vec::with_capacity(n),
                velocities: Vec::with_capacity(n),
                diverged_after: None,
            },
        }
    }

    fn emit(&mut self, s: &PhaseState) {
        self.rollout.times.push(s.t);
        self.rollout.positions.push(s.x.clone());
        self.rollout.velocities.push(s.v.clone());
    }
}

fn integrate(
    state0: &PhaseState,
    t_list: &[f64],
    force: &impl ForceField,
    masses: &[f64],
    cfg: &SolverConfig,
    lang: Option<&LangevinConfig>,
) -> Result<Rollout> {
    cfg.validate()?;
    if masses.len() != state0.x.len() {
        return Err(Error::Config("one mass per atom is required".into()));
    }
    let schedule = step_schedule(state0.t, t_list, cfg.substeps)?;
    let mut rng = lang.map(|l| ChaCha8Rng::seed_from_u64(l.seed));
    let mut s = state0.clone();
    let mut out = Emitter::new(t_list.len());
    for (k, &(n, dt)) in schedule.iter().enumerate() {
        for step in 0..n {
            let last_finite = s.t;
            let f = force.force(&s.x)?;
            if let Err(Error::NonFiniteForce { atom }) = check_finite(&f) {
                log::warn!("non-finite force on atom {atom} at t = {}; rollout truncated", s.t);
                out.rollout.diverged_after = Some(last_finite);
                return Ok(out.rollout);
            }
            euler_update(&mut s, &f, masses, dt, lang, rng.as_mut());
            s.t = if step + 1 == n { t_list[k] } else { s.t + dt };
            if !s.is_finite() {
                log::warn!("state became non-finite after t = {last_finite}; rollout truncated");
                out.rollout.diverged_after = Some(last_finite);
                return Ok(out.rollout);
            }
        }
        out.emit(&s);
    }
    Ok(out.rollout)
}

fn euler_update(
    s: &mut PhaseState,
    f: &[Vec3],
    masses: &[f64],
    dt: f64,
    lang: Option<&LangevinConfig>,
    rng: Option<&mut ChaCha8Rng>,
) {
    let v_old = s.v.clone();
    for i in 0..s.x.len() {
        s.x[i] += v_old[i] * dt;
        s.v[i] = v_old[i] + (f[i] / masses[i]) * dt;
    }
    if let Some(l) = lang {
        if l.gamma > 0.0 {
            for i in 0..s.x.len() {
                s.v[i] -= v_old[i] * (l.gamma * dt);
            }
        }
        if l.has_noise() {
            let rng = rng.expect("Langevin integration carries an RNG");
            for i in 0..s.x.len() {
                let scale = l.noise_scale(masses[i]) * dt.sqrt();
                let xi = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                s.v[i] += xi * scale;
            }
        }
    }
}

/// Explicit Euler on `[x; v]`, emitting positions at each time in `t_list`.
pub fn integrate_ode(
    state0: &PhaseState,
    t_list: &[f64],
    force: &impl ForceField,
    masses: &[f64],
    cfg: &SolverConfig,
) -> Result<Rollout> {
    integrate(state0, t_list, force, masses, cfg, None)
}

/// Euler–Maruyama on `dv = (F/m − γv)dt + sqrt(2γk_BT/m) dW`, `dx = v dt`.
/// With γ = 0 and T = 0 this reproduces [`integrate_ode`] bit for bit.
pub fn integrate_sde(
    state0: &PhaseState,
    t_list: &[f64],
    force: &impl ForceField,
    masses: &[f64],
    cfg: &SolverConfig,
    lang: &LangevinConfig,
) -> Result<Rollout> {
    lang.validate()?;
    integrate(state0, t_list, force, masses, cfg, Some(lang))
}

/// One velocity-Verlet step. Returns `(x', v', a')` so the next step can
/// reuse the acceleration.
pub fn velocity_verlet_step(
    x: &[Vec3],
    v: &[Vec3],
    a: &[Vec3],
    force: &impl ForceField,
    masses: &[f64],
    dt: f64,
) -> Result<(Vec<Vec3>, Vec<Vec3>, Vec<Vec3>)> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let x_new: Vec<Vec3> = (0..x.len())
        .map(|i| x[i] + v[i] * dt + a[i] * (0.5 * dt * dt))
        .collect();
    let f = force.force(&x_new)?;
    check_finite(&f)?;
    let a_new: Vec<Vec3> = f.iter().zip(masses).map(|(f, m)| f / *m).collect();
    let v_new = (0..x.len())
        .map(|i| v[i] + (a[i] + a_new[i]) * (0.5 * dt))
        .collect();
    Ok((x_new, v_new, a_new))
}

/// Accelerations `F(x)/m`.
pub fn accelerations(x: &[Vec3], force: &impl ForceField, masses: &[f64]) -> Result<Vec<Vec3>> {
    let f = force.force(x)?;
    check_finite(&f)?;
    Ok(f.iter().zip(masses).map(|(f, m)| f / *m).collect())
}

/// Velocity-Verlet rollout with `substeps` steps per unit interval.
pub fn integrate_verlet(
    state0: &PhaseState,
    t_list: &[f64],
    force: &impl ForceField,
    masses: &[f64],
    substeps: usize,
) -> Result<Rollout> {
    let schedule = step_schedule(state0.t, t_list, substeps.max(1))?;
    let mut out = Emitter::new(t_list.len());
    let mut s = state0.clone();
    let mut a = match accelerations(&s.x, force, masses) {
        Ok(a) => a,
        Err(Error::NonFiniteForce { .. }) => {
            out.rollout.diverged_after = Some(s.t);
            return Ok(out.rollout);
        }
        Err(e) => return Err(e),
    };
    for (k, &(n, dt)) in schedule.iter().enumerate() {
        for step in 0..n {
            let last_finite = s.t;
            match velocity_verlet_step(&s.x, &s.v, &a, force, masses, dt) {
                Ok((x, v, a_new)) => {
                    s.x = x;
                    s.v = v;
                    a = a_new;
                }
                Err(Error::NonFiniteForce { atom }) => {
                    log::warn!("non-finite force on atom {atom} after t = {last_finite}; rollout truncated");
                    out.rollout.diverged_after = Some(last_finite);
                    return Ok(out.rollout);
                }
                Err(e) => return Err(e),
            }
            s.t = if step + 1 == n { t_list[k] } else { s.t + dt };
            if !s.is_finite() {
                out.rollout.diverged_after = Some(last_finite);
                return Ok(out.rollout);
            }
        }
        out.emit(&s);
    }
    Ok(out.rollout)
}

// ---- differentiable rollouts -------------------------------------------------

/// Noise source for a graph rollout.
pub struct GraphNoise<'a> {
    pub config: &'a LangevinConfig,
    pub rng: ChaCha8Rng,
}

fn inv_mass_column(g: &mut Graph, masses: &[f64]) -> Result<Var> {
    let inv: Vec<f64> = masses.iter().map(|m| 1.0 / m).collect();
    Ok(g.constant(Tensor::new(vec![masses.len(), 1], inv)?))
}

/// One Euler (or Euler–Maruyama) step on the graph.
#[allow(clippy::too_many_arguments)]
fn graph_step<F: GraphForce>(
    g: &mut Graph,
    bound: &Bound,
    field: &F,
    ctx: &F::Ctx,
    inv_m: Var,
    x: Var,
    v: Var,
    dt: f64,
    noise: Option<&mut GraphNoise<'_>>,
    masses: &[f64],
) -> Result<(Var, Var)> {
    let f = field.force(g, bound, ctx, x)?;
    if let Err(Error::NonFiniteForce { atom }) = check_finite(&g.value(f).to_points()) {
        return Err(Error::NonFiniteForce { atom });
    }
    let a = g.mul_col(f, inv_m)?;
    let dx = g.mul_scalar(v, dt);
    let x_new = g.add(x, dx)?;
    let dv = g.mul_scalar(a, dt);
    let mut v_new = g.add(v, dv)?;
    if let Some(noise) = noise {
        let l = noise.config;
        if l.gamma > 0.0 {
            let damp = g.mul_scalar(v, l.gamma * dt);
            v_new = g.sub(v_new, damp)?;
        }
        if l.has_noise() {
            let mut data = Vec::with_capacity(masses.len() * 3);
            for &m in masses {
                let scale = l.noise_scale(m) * dt.sqrt();
                for _ in 0..3 {
                    let xi: f64 = noise.rng.sample(StandardNormal);
                    data.push(xi * scale);
                }
            }
            let kick = g.constant(Tensor::new(vec![masses.len(), 3], data)?);
            v_new = g.add(v_new, kick)?;
        }
    }
    Ok((x_new, v_new))
}

/// Records an Euler rollout on `g` and returns the position node at each output time.
#[allow(clippy::too_many_arguments)]
pub fn rollout_graph<F: GraphForce>(
    g: &mut Graph,
    bound: &Bound,
    field: &F,
    ctx: &F::Ctx,
    x0: Var,
    v0: Var,
    masses: &[f64],
    t0: f64,
    t_list: &[f64],
    cfg: &SolverConfig,
    mut noise: Option<GraphNoise<'_>>,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let schedule = step_schedule(t0, t_list, cfg.substeps)?;
    let inv_m = inv_mass_column(g, masses)?;
    let (mut x, mut v) = (x0, v0);
    let mut t = t0;
    let mut out = Vec::with_capacity(t_list.len());
    for (k, &(n, dt)) in schedule.iter().enumerate() {
        for _ in 0..n {
            let (xn, vn) = graph_step(g, bound, field, ctx, inv_m, x, v, dt, noise.as_mut(), masses)
                .map_err(|e| match e {
                    Error::NonFiniteForce { .. } => Error::Diverged { last_finite_time: t },
                    other => other,
                })?;
            if !g.value(xn).is_finite() || !g.value(vn).is_finite() {
                return Err(Error::Diverged { last_finite_time: t });
            }
            x = xn;
            v = vn;
            t += dt;
        }
        t = t_list[k];
        out.push(x);
    }
    Ok(out)
}

/// Gradients from [`adjoint_gradients`].
#[derive(Clone, Debug)]
pub struct AdjointResult {
    pub loss: f64,
    pub param_grads: BTreeMap<String, Tensor>,
    pub grad_x0: Vec<Vec3>,
    pub grad_v0: Vec<Vec3>,
    /// Largest scalar count held by any single graph during the sweep.
    pub peak_scalars: usize,
    pub positions: Vec<Vec<Vec3>>,
}

/// Loss on emitted positions: returns the value and `∂L/∂x` at every output.
pub type TrajectoryLossFn<'a> = dyn Fn(&[Vec<Vec3>]) -> Result<(f64, Vec<Vec<Vec3>>)> + 'a;

fn force_values<F: GraphForce>(
    params: &ParamSet,
    field: &F,
    x: &[Vec3],
    peak: &mut usize,
) -> Result<Vec<Vec3>> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let ctx = field.prepare(&mut g, &bound)?;
    let xv = g.constant(Tensor::from_points(x));
    let f = field.force(&mut g, &bound, &ctx, xv)?;
    *peak = (*peak).max(g.allocated_scalars());
    let out = g.value(f).to_points();
    check_finite(&out)?;
    Ok(out)
}

/// Recovers `x_k` from `(x_{k+1}, v_{k+1})` by solving
/// `x_k = x_{k+1} − dt·v_{k+1} + dt²·F(x_k)/m` with fixed-point iteration.
fn invert_euler_step<F: GraphForce>(
    params: &ParamSet,
    field: &F,
    x_next: &[Vec3],
    v_next: &[Vec3],
    masses: &[f64],
    dt: f64,
    peak: &mut usize,
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let base: Vec<Vec3> = x_next.iter().zip(v_next).map(|(x, v)| x - v * dt).collect();
    let mut x = base.clone();
    for _ in 0..100 {
        let f = force_values(params, field, &x, peak)?;
        let next: Vec<Vec3> = (0..x.len())
            .map(|i| base[i] + f[i] * (dt * dt / masses[i]))
            .collect();
        let change = next.iter().zip(&x).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        x = next;
        if change <= 1e-15 * (1.0 + x.iter().map(|p| p.amax()).fold(0.0, f64::max)) {
            break;
        }
    }
    let f = force_values(params, field, &x, peak)?;
    let v = (0..x.len()).map(|i| v_next[i] - f[i] * (dt / masses[i])).collect();
    Ok((x, v))
}

/// Discrete adjoint of the Euler solver.
///
/// The forward sweep keeps only the final state. The backward sweep
/// reconstructs each earlier state by inverting the Euler step and
/// evaluates one vector-Jacobian product of `F/m` on a fresh local graph, so
/// peak memory is independent of the number of steps. The gradients equal
/// backpropagation through [`rollout_graph`] up to the inversion tolerance.
pub fn adjoint_gradients<F: GraphForce>(
    params: &ParamSet,
    field: &F,
    state0: &PhaseState,
    masses: &[f64],
    t_list: &[f64],
    cfg: &SolverConfig,
    loss: &TrajectoryLossFn<'_>,
) -> Result<AdjointResult> {
    cfg.validate()?;
    if cfg.method != SolverMethod::Euler {
        return Err(Error::Unsupported("adjoint gradients for stochastic rollouts"));
    }
    let schedule = step_schedule(state0.t, t_list, cfg.substeps)?;
    let n_atoms = state0.x.len();
    let mut peak = 0usize;

    // forward sweep, keeping emitted positions only
    let mut x = state0.x.clone();
    let mut v = state0.v.clone();
    let mut emitted = Vec::with_capacity(t_list.len());
    let mut t = state0.t;
    for (k, &(n, dt)) in schedule.iter().enumerate() {
        for _ in 0..n {
            let f = force_values(params, field, &x, &mut peak)
                .map_err(|_| Error::Diverged { last_finite_time: t })?;
            for i in 0..n_atoms {
                let xi = x[i] + v[i] * dt;
                v[i] += (f[i] / masses[i]) * dt;
                x[i] = xi;
            }
            t += dt;
        }
        t = t_list[k];
        emitted.push(x.clone());
    }
    let (loss_value, dl_dx) = loss(&emitted)?;
    if dl_dx.len() != emitted.len() {
        return Err(Error::Config("loss gradient must cover every output".into()));
    }

    let mut lam_x = vec![Vec3::zeros(); n_atoms];
    let mut lam_v = vec![Vec3::zeros(); n_atoms];
    let mut grads: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape())))
        .collect();

    for (k, &(n, dt)) in schedule.iter().enumerate().rev() {
        for (lx, g) in lam_x.iter_mut().zip(&dl_dx[k]) {
            *lx += g;
        }
        for _ in 0..n {
            let (x_prev, v_prev) = invert_euler_step(params, field, &x, &v, masses, dt, &mut peak)?;
            // VJP of dt·F(x_prev)/m with cotangent λ_v
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let ctx = field.prepare(&mut g, &bound)?;
            let xv = g.leaf(Tensor::from_points(&x_prev));
            let f = field.force(&mut g, &bound, &ctx, xv)?;
            let w: Vec<f64> = (0..n_atoms)
                .flat_map(|i| {
                    let s = dt / masses[i];
                    [lam_v[i].x * s, lam_v[i].y * s, lam_v[i].z * s]
                })
                .collect();
            let wv = g.constant(Tensor::new(vec![n_atoms, 3], w)?);
            let prod = g.mul(f, wv)?;
            let scalar = g.sum(prod);
            g.backward(scalar)?;
            peak = peak.max(g.allocated_scalars());
            let jx = g.grad(xv).to_points();
            for (name, var) in bound.iter() {
                let gv = g.grad(*var);
                let acc = grads.get_mut(name).expect("grads cover every parameter");
                for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += b;
                }
            }
            for i in 0..n_atoms {
                let new_lam_v = lam_v[i] + lam_x[i] * dt;
                lam_x[i] += jx[i];
                lam_v[i] = new_lam_v;
            }
            x = x_prev;
            v = v_prev;
        }
    }
    Ok(AdjointResult {
        loss: loss_value,
        param_grads: grads,
        grad_x0: lam_x,
        grad_v0: lam_v,
        peak_scalars: peak,
        positions: emitted,
    })
}

/// Coordinate momentum `x_{t+1} − x_t`, or `x_t − x_{t−1}` at the last snapshot.
pub fn coordinate_momentum(snapshots: &[Vec<Vec3>], t: usize) -> Result<Vec<Vec3>> {
    if snapshots.len() < 2 {
        return Err(Error::EmptyInput("surrogate velocity needs two consecutive snapshots"));
    }
    if t >= snapshots.len() {
        return Err(Error::IndexOutOfRange {
            op: "surrogate velocity",
            index: t,
            len: snapshots.len(),
        });
    }
    let (a, b) = if t + 1 < snapshots.len() { (t, t + 1) } else { (t - 1, t) };
    Ok(snapshots[b].iter().zip(&snapshots[a]).map(|(p, q)| p - q).collect())
}

/// Surrogate velocity at snapshot `t`: the surrogate tower's vector output on
/// `x_t` plus the coordinate momentum. Without a surrogate tower the learned
/// term is zero. `ligand` supplies element types and masses.
pub fn surrogate_velocity(
    net: &BindingNet,
    ligand: &LigandState,
    protein: &ProteinStructure,
    snapshots: &[Vec<Vec3>],
    t: usize,
) -> Result<Vec<Vec3>> {
    let momentum = coordinate_momentum(snapshots, t)?;
    if !net.has_surrogate() {
        return Ok(momentum);
    }
    let topo = LigandTopology::new(ligand)?;
    let mut g = Graph::new();
    let bound = net.params().bind_frozen(&mut g);
    let enc = net.encode_protein(&mut g, &bound, protein)?;
    let x = g.constant(Tensor::from_points(&snapshots[t]));
    let learned = net.surrogate_vec(&mut g, &bound, &topo, &enc, x)?;
    Ok(g.value(learned).to_points().iter().zip(&momentum).map(|(a, b)| a + b).collect())
}

/// Per-coordinate MAE over emitted positions, with its subgradient.
pub fn mae_loss_and_grad(pred: &[Vec<Vec3>], truth: &[Vec<Vec3>]) -> Result<(f64, Vec<Vec<Vec3>>)> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch {
            op: "trajectory MAE",
            left: vec![pred.len(), pred.first().map_or(0, Vec::len)],
            right: vec![truth.len(), truth.first().map_or(0, Vec::len)],
        });
    }
    let count = pred.iter().map(|s| 3 * s.len()).sum::<usize>().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, q) in pred.iter().zip(truth) {
        let mut g = Vec::with_capacity(p.len());
        for (a, b) in p.iter().zip(q) {
            let d = a - b;
            total += d.x.abs() + d.y.abs() + d.z.abs();
            g.push(d.map(|c| if c > 0.0 { 1.0 } else if c < 0.0 { -1.0 } else { 0.0 }) / count);
        }
        grads.push(g);
    }
    Ok((total / count, grads))
}
