//! Comparison methods sharing the BindingNet backbone.
//!
//! * VerletMD learns an energy whose negative gradient matches finite-difference
//!   forces and is rolled out with velocity Verlet.
//! * GNN-MD maps `(x_t, x_t − x_{t−1})` to `x_{t+1}` and runs autoregressively.
//! * DenoisingLD learns a conditional score for `x_{t+1}` and samples each
//!   transition with annealed Langevin dynamics.
//!
//! All of them consume the same snapshot lists as the neural solvers and emit
//! a [`Rollout`], so the evaluation harness treats every method alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bindingnet::{BindingNet, LigandState, LigandTopology, ProteinEncoding, ProteinStructure};
use crate::dynamics::{integrate_verlet, PhaseState, Rollout};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tensor::{init_mlp, mlp, Bound, Graph, Tensor, Var};

/// Parameter prefix of the GNN-MD momentum head.
pub const GNNMD_PREFIX: &str = "gnnmd.mom";

/// Conditioning width used by the DenoisingLD backbone.
pub const DENOISING_COND_DIM: usize = 2;

/// Noise levels for denoising score matching and annealed Langevin sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
    pub steps_per_level: usize,
    /// Step size at level σ is `eps_scale · σ²`.
    pub eps_scale: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::geometric(1.0, 0.01, 10, 5, 2e-3).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// `levels` geometric σ values from `high` down to `low`.
    pub fn geometric(high: f64, low: f64, levels: usize, steps_per_level: usize, eps_scale: f64) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("a noise schedule needs at least one level".into()));
        }
        let sigmas = if levels == 1 {
            vec![high]
        } else {
            let ratio = (low / high).powf(1.0 / (levels - 1) as f64);
            (0..levels).map(|k| high * ratio.powi(k as i32)).collect()
        };
        let s = Self {
            sigmas,
            steps_per_level,
            eps_scale,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("noise levels must be positive and finite".into()));
        }
        if self.sigmas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::Config("noise levels must be strictly descending".into()));
        }
        if self.steps_per_level == 0 || !(self.eps_scale > 0.0) {
            return Err(Error::Config("steps_per_level and eps_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, sigma: f64) -> f64 {
        self.eps_scale * sigma * sigma
    }
}

fn with_positions(ligand: &LigandState, x: &[Vec3]) -> LigandState {
    LigandState {
        positions: x.to_vec(),
        ..ligand.clone()
    }
}

fn all_finite(x: &[Vec3]) -> bool {
    x.iter().all(|p| p.iter().all(|c| c.is_finite()))
}

fn truncated(positions: Vec<Vec<Vec3>>, last_step: usize) -> Rollout {
    Rollout {
        times: (1..=positions.len()).map(|k| k as f64).collect(),
        velocities: Vec::new(),
        positions,
        diverged_after: Some(last_step as f64),
    }
}

fn complete(positions: Vec<Vec<Vec3>>) -> Rollout {
    Rollout {
        times: (1..=positions.len()).map(|k| k as f64).collect(),
        velocities: Vec::new(),
        positions,
        diverged_after: None,
    }
}

/// Constant-velocity extrapolation `x0 + v0·k` for `k = 1..=steps`.
pub fn ballistic_rollout(x0: &[Vec3], v0: &[Vec3], steps: usize) -> Rollout {
    complete(
        (1..=steps)
            .map(|k| x0.iter().zip(v0).map(|(x, v)| x + v * k as f64).collect())
            .collect(),
    )
}

// ---- VerletMD ------------------------------------------------------------

/// Force labels `m·(x_{t+1} − 2x_t + x_{t−1})` in snapshot-interval units.
pub fn finite_difference_forces(prev: &[Vec3], cur: &[Vec3], next: &[Vec3], masses: &[f64]) -> Vec<Vec3> {
    (0..cur.len())
        .map(|i| (next[i] - cur[i] * 2.0 + prev[i]) * masses[i])
        .collect()
}

/// Step used for the directional difference in [`verletmd_accumulate`].
pub const VERLET_FD_STEP: f64 = 1e-4;

/// Force-matching loss `mean((F_θ − y)²)` with `F_θ = −∂E/∂x`, accumulating
/// its parameter gradient into `net`.
///
/// The tape is first order, so `∂F_θ/∂θ` is not available directly. With the
/// residual `r = F_θ − y` held fixed, `∂L/∂θ = (2/N) ∂(r·F_θ)/∂θ` and
/// `r·F_θ = −|r| ∂E/∂r̂`, a directional derivative replaced by a central
/// difference of two energy graphs at `x ± h r̂`.
pub fn verletmd_accumulate(
    net: &mut BindingNet,
    ligand: &LigandState,
    protein: &ProteinStructure,
    labels: &[Vec3],
    accumulate: bool,
) -> Result<f64> {
    let f = net.energy_force(ligand, protein)?;
    let n = 3 * f.len();
    let r: Vec<Vec3> = f.iter().zip(labels).map(|(a, b)| a - b).collect();
    let loss = r.iter().map(|d| d.norm_squared()).sum::<f64>() / n as f64;
    if !accumulate || !loss.is_finite() {
        return Ok(loss);
    }
    let norm = r.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(loss);
    }
    let dir: Vec<Vec3> = r.iter().map(|d| d / norm).collect();
    let topo = LigandTopology::new(ligand)?;
    let mut g = Graph::new();
    let bound = net.params().bind(&mut g);
    let enc = net.encode_protein(&mut g, &bound, protein)?;
    let energy_at = |g: &mut Graph, sign: f64| -> Result<Var> {
        let x: Vec<Vec3> = ligand
            .positions
            .iter()
            .zip(&dir)
            .map(|(p, d)| p + d * (sign * VERLET_FD_STEP))
            .collect();
        let xv = g.constant(Tensor::from_points(&x));
        let out = net.forward(g, &bound, &topo, &enc, xv, None)?;
        net.energy(g, &bound, &out)
    };
    let e_plus = energy_at(&mut g, 1.0)?;
    let e_minus = energy_at(&mut g, -1.0)?;
    let diff = g.sub(e_plus, e_minus)?;
    let surrogate = g.mul_scalar(diff, -norm / (n as f64 * VERLET_FD_STEP));
    g.backward(surrogate)?;
    let grads = bound.grads(&g);
    for (name, grad) in grads {
        net.params_mut().accumulate_grad(&name, &grad);
    }
    Ok(loss)
}

/// Velocity-Verlet rollout with force `−∂E/∂x`. Outputs at `t = 1..=steps`.
pub fn verletmd_rollout(
    net: &BindingNet,
    ligand: &LigandState,
    protein: &ProteinStructure,
    x0: &[Vec3],
    v0: &[Vec3],
    steps: usize,
    substeps: usize,
) -> Result<Rollout> {
    let force = |x: &[Vec3]| net.energy_force(&with_positions(ligand, x), protein);
    let state = PhaseState::new(x0.to_vec(), v0.to_vec(), 0.0)?;
    let t_list: Vec<f64> = (1..=steps).map(|k| k as f64).collect();
    integrate_verlet(&state, &t_list, &force, &ligand.masses, substeps)
}

// ---- GNN-MD --------------------------------------------------------------

/// Adds the momentum head. Its last layer starts at zero, so an untrained
/// model carries the previous displacement forward unchanged.
pub fn add_gnnmd_head(net: &mut BindingNet, seed: u64) -> Result<()> {
    if net.params().contains(&format!("{GNNMD_PREFIX}.w0")) {
        return Ok(());
    }
    let d = net.config().hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_mlp(net.params_mut(), &mut rng, GNNMD_PREFIX, &[d, d, 1], true)
}

/// `x_{t+1} = x_t + F(x_t) + (1 + s_i)·d_t`, with `F` the backbone's vector
/// output read as a displacement and `s_i` an invariant per-atom gate.
pub fn gnnmd_next(
    g: &mut Graph,
    bound: &Bound,
    net: &BindingNet,
    topo: &LigandTopology,
    enc: &ProteinEncoding,
    x: Var,
    d: Var,
) -> Result<Var> {
    let out = net.forward(g, bound, topo, enc, x, None)?;
    let s = mlp(g, bound, GNNMD_PREFIX, out.h)?;
    let gate = g.add_scalar(s, 1.0);
    let carry = g.mul_col(d, gate)?;
    let moved = g.add(x, out.force)?;
    g.add(moved, carry)
}

/// One numeric GNN-MD step.
pub fn gnnmd_predict(
    net: &BindingNet,
    ligand: &LigandState,
    protein: &ProteinStructure,
    x: &[Vec3],
    d: &[Vec3],
) -> Result<Vec<Vec3>> {
    let topo = LigandTopology::new(ligand)?;
    let mut g = Graph::new();
    let bound = net.params().bind_frozen(&mut g);
    let enc = net.encode_protein(&mut g, &bound, protein)?;
    let xv = g.constant(Tensor::from_points(x));
    let dv = g.constant(Tensor::from_points(d));
    let next = gnnmd_next(&mut g, &bound, net, &topo, &enc, xv, dv)?;
    Ok(g.value(next).to_points())
}

/// Autoregressive GNN-MD rollout from `x0` with previous displacement `d0`.
pub fn gnnmd_rollout(
    net: &BindingNet,
    ligand: &LigandState,
    protein: &ProteinStructure,
    x0: &[Vec3],
    d0: &[Vec3],
    steps: usize,
) -> Result<Rollout> {
    let mut out = Vec::with_capacity(steps);
    let (mut x, mut d) = (x0.to_vec(), d0.to_vec());
    for k in 0..steps {
        let next = match gnnmd_predict(net, ligand, protein, &x, &d) {
            Ok(next) if all_finite(&next) => next,
            Ok(_) | Err(Error::NoValidPairs { .. }) => {
                log::warn!("GNN-MD rollout diverged after step {k}; truncated");
                return Ok(truncated(out, k));
            }
            Err(e) => return Err(e),
        };
        d = next.iter().zip(&x).map(|(a, b)| a - b).collect();
        x = next;
        out.push(x.clone());
    }
    Ok(complete(out))
}

// ---- DenoisingLD ---------------------------------------------------------

/// Per-atom conditioning `[ln σ, |x̃_i − μ_i| / σ]`.
pub fn denoising_features(x_tilde: &[Vec3], mu: &[Vec3], sigma: f64) -> Tensor {
    let data = x_tilde
        .iter()
        .zip(mu)
        .flat_map(|(x, m)| [sigma.ln(), (x - m).norm() / sigma])
        .collect();
    Tensor::new(vec![x_tilde.len(), DENOISING_COND_DIM], data).expect("feature shape")
}

/// Denoiser output `D(x̃)` such that `μ + D` estimates the clean next snapshot.
#[allow(clippy::too_many_arguments)]
pub fn denoiser(
    g: &mut Graph,
    bound: &Bound,
    net: &BindingNet,
    topo: &LigandTopology,
    enc: &ProteinEncoding,
    x_tilde: &[Vec3],
    mu: &[Vec3],
    sigma: f64,
) -> Result<Var> {
    if net.config().cond_dim != DENOISING_COND_DIM {
        return Err(Error::Config(format!(
            "the DenoisingLD backbone needs cond_dim = {DENOISING_COND_DIM}, got {}",
            net.config().cond_dim
        )));
    }
    let cond = g.constant(denoising_features(x_tilde, mu, sigma));
    let xv = g.constant(Tensor::from_points(x_tilde));
    Ok(net.forward(g, bound, topo, enc, xv, Some(cond))?.force)
}

/// Score estimate `(μ + D(x̃) − x̃) / σ²`.
pub fn denoising_score(
    net: &BindingNet,
    ligand: &LigandState,
    protein: &ProteinStructure,
    x_tilde: &[Vec3],
    mu: &[Vec3],
    sigma: f64,
) -> Result<Vec<Vec3>> {
    let topo = LigandTopology::new(ligand)?;
    let mut g = Graph::new();
    let bound = net.params().bind_frozen(&mut g);
    let enc = net.encode_protein(&mut g, &bound, protein)?;
    let d = denoiser(&mut g, &bound, net, &topo, &enc, x_tilde, mu, sigma)?;
    let d = g.value(d).to_points();
    Ok((0..mu.len())
        .map(|i| (mu[i] + d[i] - x_tilde[i]) / (sigma * sigma))
        .collect())
}

/// Denoising score-matching loss `mean((σ·score + ε)²)` for one noisy sample
/// `x̃ = x_next + σε`, which reduces to `mean(((μ + D − x_next)/σ)²)`.
#[allow(clippy::too_many_arguments)]
pub fn denoisingld_accumulate(
    net: &mut BindingNet,
    ligand: &LigandState,
    protein: &ProteinStructure,
    mu: &[Vec3],
    x_next: &[Vec3],
    sigma: f64,
    rng: &mut ChaCha8Rng,
    accumulate: bool,
) -> Result<f64> {
    let x_tilde: Vec<Vec3> = x_next
        .iter()
        .map(|x| x + Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sigma)
        .collect();
    let topo = LigandTopology::new(ligand)?;
    let mut g = Graph::new();
    let bound = if accumulate { net.params().bind(&mut g) } else { net.params().bind_frozen(&mut g) };
    let enc = net.encode_protein(&mut g, &bound, protein)?;
    let d = denoiser(&mut g, &bound, net, &topo, &enc, &x_tilde, mu, sigma)?;
    let offset: Vec<Vec3> = mu.iter().zip(x_next).map(|(m, x)| m - x).collect();
    let offset = g.constant(Tensor::from_points(&offset));
    let resid = g.add(d, offset)?;
    let scaled = g.mul_scalar(resid, 1.0 / sigma);
    let sq = g.mul(scaled, scaled)?;
    let loss = g.mean(sq);
    let value = g.value(loss).item();
    if accumulate && value.is_finite() {
        g.backward(loss)?;
        net.params_mut().accumulate_grads(&g, &bound);
    }
    Ok(value)
}

/// Annealed Langevin sampling `x ← x + (ε/2)·score(x, σ) + √ε·z` over the
/// schedule, starting at `x0`. Returns `None` if the state leaves the finite range.
pub fn annealed_langevin(
    x0: &[Vec3],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    mut score: impl FnMut(&[Vec3], f64) -> Result<Vec<Vec3>>,
) -> Result<Option<Vec<Vec3>>> {
    schedule.validate()?;
    let mut x = x0.to_vec();
    for &sigma in &schedule.sigmas {
        let eps = schedule.step_size(sigma);
        for _ in 0..schedule.steps_per_level {
            let s = score(&x, sigma)?;
            for (xi, si) in x.iter_mut().zip(&s) {
                let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                *xi += si * (0.5 * eps) + z * eps.sqrt();
            }
            if !all_finite(&x) {
                return Ok(None);
            }
        }
    }
    Ok(Some(x))
}

/// DenoisingLD rollout. Each transition starts the sampler at the
/// constant-velocity guess `μ = x_t + d_t`.
#[allow(clippy::too_many_arguments)]
pub fn denoisingld_rollout(
    net: &BindingNet,
    ligand: &LigandState,
    protein: &ProteinStructure,
    x0: &[Vec3],
    d0: &[Vec3],
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Rollout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps);
    let (mut x, mut d) = (x0.to_vec(), d0.to_vec());
    for k in 0..steps {
        let mu: Vec<Vec3> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let sampled = annealed_langevin(&mu, schedule, &mut rng, |xt, sigma| {
            denoising_score(net, ligand, protein, xt, &mu, sigma)
        });
        let next = match sampled {
            Ok(Some(next)) => next,
            Ok(None) | Err(Error::NoValidPairs { .. }) => {
                log::warn!("DenoisingLD rollout diverged after step {k}; truncated");
                return Ok(truncated(out, k));
            }
            Err(e) => return Err(e),
        };
        d = next.iter().zip(&x).map(|(a, b)| a - b).collect();
        x = next;
        out.push(x.clone());
    }
    Ok(complete(out))
}
