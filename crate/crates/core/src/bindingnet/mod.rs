//! Multi-grained equivariant force model over a ligand and a rigid protein.
//!
//! The network has three towers. The ligand tower runs message passing on
//! atom-pair frames and yields per-atom invariants `h` and an equivariant
//! vector `vec`. The protein tower embeds N/Cα/C backbone atoms and scalarizes
//! them on backbone frames to give one invariant row per residue. The complex
//! tower couples ligand atoms to pocket residues through residue-pair frames
//! and adds the interaction term to `vec` to produce the force.
//!
//! Everything is expressed as [`Graph`] operations so that forces can be
//! differentiated with respect to parameters and coordinates. The numeric
//! entry points ([`BindingNet::predict_force`] and friends) build a throwaway
//! graph per call.

mod towers;
pub mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::GraphForce;
use crate::error::{Error, Result};
use crate::geometry::{mass_center, Vec3};
use crate::tensor::{init_mlp, Bound, Graph, ParamSet, Tensor, Var};

pub use towers::{ForwardOutput, LigandTopology, ProteinEncoding};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub cutoff: f64,
    pub rbf_count: usize,
    /// Apply Gram–Schmidt to backbone frames, whose first two axes are not orthogonal.
    pub orthogonalize_frames: bool,
    /// Width of an optional per-graph conditioning vector mixed into the ligand embedding.
    pub cond_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 5,
            cutoff: 5.0,
            rbf_count: 16,
            orthogonalize_frames: false,
            cond_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return Err(Error::Config(format!("cutoff must be positive, got {}", self.cutoff)));
        }
        if self.rbf_count == 0 {
            return Err(Error::Config("rbf_count must be positive".into()));
        }
        Ok(())
    }

    /// Gaussian centres spread uniformly on `[0, cutoff]`.
    pub fn rbf_centers(&self) -> Vec<f64> {
        let k = self.rbf_count;
        if k == 1 {
            return vec![0.0];
        }
        (0..k).map(|i| self.cutoff * i as f64 / (k - 1) as f64).collect()
    }

    /// Inverse squared width, `1 / (cutoff / rbf_count)²`.
    pub fn rbf_gamma(&self) -> f64 {
        let w = self.cutoff / self.rbf_count as f64;
        1.0 / (w * w)
    }
}

/// Ligand atoms at one time point.
#[derive(Clone, Debug, PartialEq)]
pub struct LigandState {
    pub atomic_numbers: Vec<u8>,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
}

impl LigandState {
    /// Masses come from the element table; velocities start at zero.
    pub fn new(atomic_numbers: Vec<u8>, positions: Vec<Vec3>) -> Result<Self> {
        let masses = atomic_numbers
            .iter()
            .map(|&z| vocab::atomic_mass(z))
            .collect::<Result<Vec<_>>>()?;
        let velocities = vec![Vec3::zeros(); positions.len()];
        let s = Self {
            atomic_numbers,
            positions,
            velocities,
            masses,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_velocities(mut self, velocities: Vec<Vec3>) -> Result<Self> {
        self.velocities = velocities;
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atomic_numbers.len();
        if self.positions.len() != n || self.velocities.len() != n || self.masses.len() != n {
            return Err(Error::Config(format!(
                "ligand field lengths differ: {} types, {} positions, {} velocities, {} masses",
                n,
                self.positions.len(),
                self.velocities.len(),
                self.masses.len()
            )));
        }
        for &z in &self.atomic_numbers {
            vocab::element_index(z)?;
        }
        if self.masses.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Config("ligand masses must be positive".into()));
        }
        Ok(())
    }

    pub fn map_points(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            positions: self.positions.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }
}

/// Rigid protein described by residue types and backbone coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ProteinStructure {
    pub residue_types: Vec<usize>,
    pub n: Vec<Vec3>,
    pub ca: Vec<Vec3>,
    pub c: Vec<Vec3>,
}

impl ProteinStructure {
    pub fn new(residue_types: Vec<usize>, n: Vec<Vec3>, ca: Vec<Vec3>, c: Vec<Vec3>) -> Result<Self> {
        let p = Self {
            residue_types,
            n,
            ca,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.residue_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residue_types.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.residue_types.len();
        if self.n.len() != r || self.ca.len() != r || self.c.len() != r {
            return Err(Error::Config(format!(
                "protein field lengths differ: {} types, {} N, {} CA, {} C",
                r,
                self.n.len(),
                self.ca.len(),
                self.c.len()
            )));
        }
        if let Some(&t) = self.residue_types.iter().find(|&&t| t >= vocab::NUM_RESIDUE_TYPES) {
            return Err(Error::UnknownResidue(format!("index {t}")));
        }
        Ok(())
    }

    /// Backbone atoms in residue-major order `N₀, Cα₀, C₀, N₁, …`.
    pub fn backbone_atoms(&self) -> Vec<Vec3> {
        (0..self.len())
            .flat_map(|k| [self.n[k], self.ca[k], self.c[k]])
            .collect()
    }

    /// `Σ m·x` and `Σ m` over backbone atoms.
    pub fn mass_moment(&self) -> (Vec3, f64) {
        let mut moment = Vec3::zeros();
        let mut total = 0.0;
        for k in 0..self.len() {
            for (x, m) in [self.n[k], self.ca[k], self.c[k]].iter().zip(vocab::BACKBONE_MASSES) {
                moment += x * m;
                total += m;
            }
        }
        (moment, total)
    }

    pub fn map_points(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            residue_types: self.residue_types.clone(),
            n: self.n.iter().map(|&p| f(p)).collect(),
            ca: self.ca.iter().map(|&p| f(p)).collect(),
            c: self.c.iter().map(|&p| f(p)).collect(),
        }
    }
}

/// Mass-weighted centre of ligand atoms and protein backbone atoms.
pub fn complex_center(ligand: &LigandState, protein: &ProteinStructure) -> Vec3 {
    let (moment, total) = protein.mass_moment();
    let lig_total: f64 = ligand.masses.iter().sum();
    let lig_center = if ligand.is_empty() {
        Vec3::zeros()
    } else {
        mass_center(&ligand.positions, &ligand.masses)
    };
    (lig_center * lig_total + moment) / (lig_total + total)
}

/// Shifts both parts so the complex centre sits at the origin.
pub fn centralize_complex(
    ligand: &LigandState,
    protein: &ProteinStructure,
) -> (LigandState, ProteinStructure, Vec3) {
    let c = complex_center(ligand, protein);
    (ligand.map_points(|p| p - c), protein.map_points(|p| p - c), c)
}

/// Ligand tower result: invariant rows and one equivariant vector per atom.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerOutput {
    pub h: Tensor,
    pub vec: Vec<Vec3>,
}

/// Tolerance on the complex centroid accepted by the numeric entry points.
pub const CENTERING_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BindingNet {
    config: ModelConfig,
    params: ParamSet,
}

impl BindingNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new(seed);
        init_ligand_params(&mut params, &mut rng, &config, "lig")?;
        let d = config.hidden;
        params.insert_uniform("prot.embed", &[3, d], 1, &mut rng)?;
        params.insert_uniform("prot.res", &[vocab::NUM_RESIDUE_TYPES, d], 1, &mut rng)?;
        params.insert_uniform("prot.rbf", &[config.rbf_count, d], config.rbf_count, &mut rng)?;
        init_mlp(&mut params, &mut rng, "prot.pair", &[2 * d, d, d], false)?;
        init_mlp(&mut params, &mut rng, "cplx.pair", &[d, d, d], false)?;
        init_mlp(&mut params, &mut rng, "cplx.a", &[d, d, 1], false)?;
        init_mlp(&mut params, &mut rng, "cplx.b", &[d, d, 1], true)?;
        init_mlp(&mut params, &mut rng, "energy", &[d, d, 1], true)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking that every tower tensor is present.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, p) in reference.params.iter() {
            let have = params.get(name)?;
            if have.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    left: p.value.shape().to_vec(),
                    right: have.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    // ---- graph-level interface -------------------------------------------

    pub fn encode_protein(
        &self,
        g: &mut Graph,
        bound: &Bound,
        protein: &ProteinStructure,
    ) -> Result<ProteinEncoding> {
        towers::protein_tower(g, bound, &self.config, protein)
    }

    /// Full forward pass on raw ligand coordinates `x` (`n×3`). The complex is
    /// centred inside the graph, so the centre is differentiable in `x`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        topo: &LigandTopology,
        protein: &ProteinEncoding,
        x: Var,
        cond: Option<Var>,
    ) -> Result<ForwardOutput> {
        towers::forward(g, bound, &self.config, topo, protein, x, cond)
    }

    /// Invariant energy from pooled ligand and interaction representations.
    pub fn energy(&self, g: &mut Graph, bound: &Bound, out: &ForwardOutput) -> Result<Var> {
        towers::energy_head(g, bound, out)
    }

    /// Adds a ligand tower under [`SURROGATE_PREFIX`] for the learned part of
    /// the surrogate velocity. Its vector heads start at zero.
    pub fn add_surrogate(&mut self, seed: u64) -> Result<()> {
        if self.has_surrogate() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { cond_dim: 0, ..self.config.clone() };
        init_ligand_params(&mut self.params, &mut rng, &cfg, SURROGATE_PREFIX)
    }

    pub fn has_surrogate(&self) -> bool {
        self.params.contains(&format!("{SURROGATE_PREFIX}.embed"))
    }

    /// Learned surrogate-velocity term: the vector output of the surrogate
    /// ligand tower on the complex-centred coordinates `x`.
    pub fn surrogate_vec(
        &self,
        g: &mut Graph,
        bound: &Bound,
        topo: &LigandTopology,
        protein: &ProteinEncoding,
        x: Var,
    ) -> Result<Var> {
        let center = towers::center_of(g, topo, protein, x)?;
        let shift = g.neg(center);
        let xc = g.add_bias(x, shift)?;
        let cfg = ModelConfig { cond_dim: 0, ..self.config.clone() };
        Ok(towers::ligand_tower(g, bound, &cfg, SURROGATE_PREFIX, topo, xc, None)?.vec)
    }

    // ---- numeric interface -----------------------------------------------

    fn check_centered(ligand: &LigandState, protein: &ProteinStructure) -> Result<()> {
        let c = complex_center(ligand, protein);
        if c.norm() >= CENTERING_TOL {
            return Err(Error::Config(format!(
                "inputs must be centralized first; complex centroid has norm {:e}",
                c.norm()
            )));
        }
        Ok(())
    }

    /// Ligand tower on coordinates taken as given.
    pub fn ligand_tower(&self, ligand: &LigandState) -> Result<TowerOutput> {
        ligand.validate()?;
        let topo = LigandTopology::new(ligand)?;
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(Tensor::from_points(&ligand.positions));
        let out = towers::ligand_tower(&mut g, &bound, &self.config, "lig", &topo, x, None)?;
        Ok(TowerOutput {
            h: g.value(out.h).clone(),
            vec: g.value(out.vec).to_points(),
        })
    }

    /// Per-residue invariant rows, `R×d`.
    pub fn protein_tower(&self, protein: &ProteinStructure) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let enc = towers::protein_tower(&mut g, &bound, &self.config, protein)?;
        Ok(g.value(enc.h).clone())
    }

    /// Complex tower from precomputed ligand and protein representations.
    pub fn complex_tower(
        &self,
        ligand_out: &TowerOutput,
        protein_h: &Tensor,
        ligand: &LigandState,
        protein: &ProteinStructure,
    ) -> Result<Vec<Vec3>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let h_l = g.constant(ligand_out.h.clone());
        let vec = g.constant(Tensor::from_points(&ligand_out.vec));
        let h_p = g.constant(protein_h.clone());
        let x = g.constant(Tensor::from_points(&ligand.positions));
        let ca = g.constant(Tensor::from_points(&protein.ca));
        let valid = towers::valid_residues(protein, self.config.orthogonalize_frames);
        let out = towers::complex_tower(&mut g, &bound, &self.config, h_l, vec, h_p, &valid, x, ca)?;
        Ok(g.value(out.force).to_points())
    }

    /// Forces on ligand atoms for a centralized complex.
    pub fn predict_force(&self, ligand: &LigandState, protein: &ProteinStructure) -> Result<Vec<Vec3>> {
        Self::check_centered(ligand, protein)?;
        let (out, g, _) = self.eval(ligand, protein)?;
        Ok(g.value(out.force).to_points())
    }

    pub fn predict_energy(&self, ligand: &LigandState, protein: &ProteinStructure) -> Result<f64> {
        Self::check_centered(ligand, protein)?;
        let (out, mut g, bound) = self.eval(ligand, protein)?;
        let e = towers::energy_head(&mut g, &bound, &out)?;
        Ok(g.value(e).item())
    }

    /// `−∂E/∂x` with respect to ligand coordinates.
    pub fn energy_force(&self, ligand: &LigandState, protein: &ProteinStructure) -> Result<Vec<Vec3>> {
        ligand.validate()?;
        let topo = LigandTopology::new(ligand)?;
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let enc = towers::protein_tower(&mut g, &bound, &self.config, protein)?;
        let x = g.leaf(Tensor::from_points(&ligand.positions));
        let out = towers::forward(&mut g, &bound, &self.config, &topo, &enc, x, None)?;
        let e = towers::energy_head(&mut g, &bound, &out)?;
        g.backward(e)?;
        Ok(g.grad(x).to_points().into_iter().map(|f| -f).collect())
    }

    fn eval(
        &self,
        ligand: &LigandState,
        protein: &ProteinStructure,
    ) -> Result<(ForwardOutput, Graph, Bound)> {
        ligand.validate()?;
        protein.validate()?;
        let topo = LigandTopology::new(ligand)?;
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let enc = towers::protein_tower(&mut g, &bound, &self.config, protein)?;
        let x = g.constant(Tensor::from_points(&ligand.positions));
        let out = towers::forward(&mut g, &bound, &self.config, &topo, &enc, x, None)?;
        Ok((out, g, bound))
    }
}

/// Parameter prefix of the surrogate-velocity tower.
pub const SURROGATE_PREFIX: &str = "surrogate.lig";

/// BindingNet force on one ligand in a fixed protein, for the solvers.
/// Parameters come from the [`Bound`] passed at evaluation time.
pub struct ComplexForce<'a> {
    pub net: &'a BindingNet,
    pub topology: LigandTopology,
    pub protein: &'a ProteinStructure,
}

impl<'a> ComplexForce<'a> {
    pub fn new(net: &'a BindingNet, ligand: &LigandState, protein: &'a ProteinStructure) -> Result<Self> {
        ligand.validate()?;
        protein.validate()?;
        Ok(Self {
            net,
            topology: LigandTopology::new(ligand)?,
            protein,
        })
    }
}

impl GraphForce for ComplexForce<'_> {
    type Ctx = ProteinEncoding;

    fn prepare(&self, g: &mut Graph, bound: &Bound) -> Result<ProteinEncoding> {
        self.net.encode_protein(g, bound, self.protein)
    }

    fn force(&self, g: &mut Graph, bound: &Bound, ctx: &ProteinEncoding, x: Var) -> Result<Var> {
        Ok(self.net.forward(g, bound, &self.topology, ctx, x, None)?.force)
    }
}

/// Adds the ligand-tower tensors under `prefix`. The vector heads start at
/// zero so an untrained tower emits `vec = 0`.
pub fn init_ligand_params(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    config: &ModelConfig,
    prefix: &str,
) -> Result<()> {
    let d = config.hidden;
    params.insert_uniform(format!("{prefix}.embed"), &[vocab::NUM_ELEMENTS, d], 1, rng)?;
    if config.cond_dim > 0 {
        params.insert_uniform(format!("{prefix}.cond"), &[config.cond_dim, d], config.cond_dim, rng)?;
    }
    params.insert_uniform(format!("{prefix}.rbf"), &[config.rbf_count, d], config.rbf_count, rng)?;
    init_mlp(params, rng, &format!("{prefix}.pair"), &[2 * d, d, d], false)?;
    for l in 0..config.layers {
        init_mlp(params, rng, &format!("{prefix}.layer{l}.a"), &[d, d, 1], false)?;
        init_mlp(params, rng, &format!("{prefix}.layer{l}.b"), &[d, d, 1], true)?;
        init_mlp(params, rng, &format!("{prefix}.layer{l}.h"), &[d, d, d], false)?;
    }
    Ok(())
}

