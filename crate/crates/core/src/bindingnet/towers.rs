use crate::error::{Error, Result};
use crate::geometry::{
    atom_frame, backbone_frame, complex_frame, complex_frame_partners, neighbor_pairs, orthogonalize,
    FrameBasis, Vec3,
};
use crate::tensor::{mlp, Bound, Graph, Tensor, Var};

use super::{vocab, LigandState, ModelConfig, ProteinStructure};

/// Per-ligand constants needed inside the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LigandTopology {
    pub element_rows: Vec<usize>,
    pub masses: Vec<f64>,
}

impl LigandTopology {
    pub fn new(ligand: &LigandState) -> Result<Self> {
        Ok(Self {
            element_rows: ligand
                .atomic_numbers
                .iter()
                .map(|&z| vocab::element_index(z))
                .collect::<Result<_>>()?,
            masses: ligand.masses.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
}

/// Protein tower output bound to one graph. Protein coordinates are fixed, so
/// this is computed once and reused by every force call in the graph.
#[derive(Clone, Debug)]
pub struct ProteinEncoding {
    pub h: Var,
    /// Raw Cα coordinates, `R×3`.
    pub ca: Var,
    pub valid: Vec<bool>,
    pub mass_moment: Vec3,
    pub mass_total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub force: Var,
    pub h: Var,
    pub vec: Var,
    /// `1×d` sum of interaction representations, absent without interactions.
    pub interaction_pool: Option<Var>,
    pub x_centered: Var,
    pub center: Var,
}

pub(crate) struct LigandOut {
    pub h: Var,
    pub vec: Var,
}

pub(crate) struct ComplexOut {
    pub force: Var,
    pub interaction_pool: Option<Var>,
}

fn groups_by_source(pairs: &[(usize, usize)], n: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n];
    for (e, &(i, _)) in pairs.iter().enumerate() {
        groups[i].push(e);
    }
    groups
}

fn frame_rows(frames: &[FrameBasis]) -> [Tensor; 3] {
    let pick = |f: fn(&FrameBasis) -> Vec3| {
        Tensor::from_points(&frames.iter().map(f).collect::<Vec<_>>())
    };
    [pick(|f| f.e1), pick(|f| f.e2), pick(|f| f.e3)]
}

/// Pair-frame axes built in the graph from rows `a` and `b` (both `E×3`).
fn pair_frame(g: &mut Graph, a: Var, b: Var) -> Result<[Var; 3]> {
    let diff = g.sub(a, b)?;
    let e1 = g.normalize_rows(diff)?;
    let cr = g.cross(a, b)?;
    let e2 = g.normalize_rows(cr)?;
    let e3 = g.cross(e1, e2)?;
    Ok([e1, e2, e3])
}

/// Embedding refined by radial-filtered neighbour embeddings, followed by the
/// equivariant per-node representation `mean_j (x_i − x_j) ⊗ z_i`.
fn embed_and_lift(
    g: &mut Graph,
    cfg: &ModelConfig,
    z0: Var,
    rbf_w: Var,
    x: Var,
    pairs: &[(usize, usize)],
    n: usize,
) -> Result<(Var, Var)> {
    if pairs.is_empty() {
        let d = g.shape(z0)[1];
        let h = g.constant(Tensor::zeros(&[n, 3 * d]));
        return Ok((z0, h));
    }
    let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tgt: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let groups = groups_by_source(pairs, n);
    let xs = g.gather(x, &src)?;
    let xt = g.gather(x, &tgt)?;
    let r = g.sub(xs, xt)?;
    let dist = g.row_norm(r)?;
    let basis = g.rbf(dist, &cfg.rbf_centers(), cfg.rbf_gamma())?;
    let filter = g.matmul(basis, rbf_w)?;
    let zt = g.gather(z0, &tgt)?;
    let msg = g.mul(zt, filter)?;
    let agg = g.mean_agg(msg, &groups)?;
    let z = g.add(z0, agg)?;
    let zs = g.gather(z, &src)?;
    let lifted = g.outer3(zs, r)?;
    let h = g.mean_agg(lifted, &groups)?;
    Ok((z, h))
}

/// Scalarizes `h_i ⊕ h_j` on the given frames, sum-pools the three axes and
/// applies the `{prefix}` MLP.
fn pair_invariants(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    h_eq: Var,
    left: &[usize],
    right: &[usize],
    frame: [Var; 3],
) -> Result<Var> {
    let hl = g.gather(h_eq, left)?;
    let hr = g.gather(h_eq, right)?;
    let cat = g.concat_cols(hl, hr)?;
    let s = g.scalarize(cat, frame)?;
    let pooled = g.sum_pool3(s)?;
    mlp(g, bound, prefix, pooled)
}

pub(crate) fn ligand_tower(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    topo: &LigandTopology,
    x: Var,
    cond: Option<Var>,
) -> Result<LigandOut> {
    let n = topo.len();
    if g.shape(x) != [n, 3] {
        return Err(Error::ShapeMismatch {
            op: "ligand_tower",
            left: vec![n, 3],
            right: g.shape(x).to_vec(),
        });
    }
    let pos = g.value(x).to_points();
    let pairs = neighbor_pairs(&pos, cfg.cutoff).pairs;
    let valid: Vec<(usize, usize)> = pairs
        .iter()
        .copied()
        .filter(|&(i, j)| match atom_frame(pos[i], pos[j]) {
            Ok(_) => true,
            Err(e) => {
                log::debug!("skipping ligand pair ({i}, {j}): {e}");
                false
            }
        })
        .collect();
    if valid.is_empty() {
        return Err(Error::NoValidPairs { cutoff: cfg.cutoff });
    }

    let table = bound.get(&format!("{prefix}.embed"))?;
    let mut z0 = g.gather(table, &topo.element_rows)?;
    if let Some(c) = cond {
        let w = bound.get(&format!("{prefix}.cond"))?;
        let shift = g.matmul(c, w)?;
        // one row per graph, or one row per atom
        z0 = if g.shape(c)[0] == n && n > 1 { g.add(z0, shift)? } else { g.add_bias(z0, shift)? };
    }
    let rbf_w = bound.get(&format!("{prefix}.rbf"))?;
    let (z, h_eq) = embed_and_lift(g, cfg, z0, rbf_w, x, &pairs, n)?;

    let vs: Vec<usize> = valid.iter().map(|p| p.0).collect();
    let vt: Vec<usize> = valid.iter().map(|p| p.1).collect();
    let groups = groups_by_source(&valid, n);
    let xs = g.gather(x, &vs)?;
    let xt = g.gather(x, &vt)?;
    let r = g.sub(xs, xt)?;
    let frame = pair_frame(g, xs, xt)?;
    let h_pair = pair_invariants(g, bound, &format!("{prefix}.pair"), h_eq, &vs, &vt, frame)?;

    let mut vec = g.constant(Tensor::zeros(&[n, 3]));
    let mut h = z;
    for l in 0..cfg.layers {
        let a = mlp(g, bound, &format!("{prefix}.layer{l}.a"), h_pair)?;
        let b = mlp(g, bound, &format!("{prefix}.layer{l}.b"), h_pair)?;
        let vi = g.gather(vec, &vs)?;
        let t1 = g.mul_col(vi, a)?;
        let t2 = g.mul_col(r, b)?;
        let msg = g.add(t1, t2)?;
        let agg = g.mean_agg(msg, &groups)?;
        vec = g.add(vec, agg)?;
        let hm = mlp(g, bound, &format!("{prefix}.layer{l}.h"), h_pair)?;
        let hagg = g.mean_agg(hm, &groups)?;
        h = g.add(h, hagg)?;
    }
    Ok(LigandOut { h, vec })
}

/// Residue frames that pass the degeneracy check; `None` marks a skipped residue.
fn residue_frames(protein: &ProteinStructure, orthogonal: bool) -> Vec<Option<FrameBasis>> {
    (0..protein.len())
        .map(|k| {
            let f = backbone_frame(protein.n[k], protein.ca[k], protein.c[k])
                .and_then(|f| if orthogonal { orthogonalize(&f) } else { Ok(f) });
            match f {
                Ok(f) => Some(f),
                Err(e) => {
                    log::warn!("residue {k} has a degenerate backbone and is skipped: {e}");
                    None
                }
            }
        })
        .collect()
}

pub(crate) fn valid_residues(protein: &ProteinStructure, orthogonal: bool) -> Vec<bool> {
    residue_frames(protein, orthogonal).iter().map(Option::is_some).collect()
}

pub(crate) fn protein_tower(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    protein: &ProteinStructure,
) -> Result<ProteinEncoding> {
    protein.validate()?;
    if protein.is_empty() {
        return Err(Error::EmptyInput("protein has no residues"));
    }
    let frames = residue_frames(protein, cfg.orthogonalize_frames);
    if frames.iter().all(Option::is_none) {
        return Err(Error::DegenerateFrame("every residue backbone is degenerate".into()));
    }
    let r = protein.len();
    let atoms = protein.backbone_atoms();
    let x = g.constant(Tensor::from_points(&atoms));
    let types: Vec<usize> = (0..3 * r).map(|i| i % 3).collect();
    let table = bound.get("prot.embed")?;
    let z0 = g.gather(table, &types)?;
    let rbf_w = bound.get("prot.rbf")?;
    let pairs = neighbor_pairs(&atoms, cfg.cutoff).pairs;
    let (_, h_eq) = embed_and_lift(g, cfg, z0, rbf_w, x, &pairs, 3 * r)?;

    // Two intra-residue pairs, (N, Cα) and (Cα, C), scalarized on the residue frame.
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut pair_frames = Vec::new();
    let mut groups = vec![Vec::new(); r];
    for (k, f) in frames.iter().enumerate() {
        if let Some(f) = f {
            groups[k] = vec![left.len(), left.len() + 1];
            left.extend([3 * k, 3 * k + 1]);
            right.extend([3 * k + 1, 3 * k + 2]);
            pair_frames.extend([*f, *f]);
        }
    }
    let [e1, e2, e3] = frame_rows(&pair_frames);
    let frame = [g.constant(e1), g.constant(e2), g.constant(e3)];
    let h_pair = pair_invariants(g, bound, "prot.pair", h_eq, &left, &right, frame)?;
    let half_sum = g.mean_agg(h_pair, &groups)?;
    let res_table = bound.get("prot.res")?;
    let z_res = g.gather(res_table, &protein.residue_types)?;
    let h = g.add(z_res, half_sum)?;

    let ca = g.constant(Tensor::from_points(&protein.ca));
    let (mass_moment, mass_total) = protein.mass_moment();
    Ok(ProteinEncoding {
        h,
        ca,
        valid: frames.iter().map(Option::is_some).collect(),
        mass_moment,
        mass_total,
    })
}

/// Interaction of ligand atoms with pocket residues. `x` and `ca` must
/// already be centred.
#[allow(clippy::too_many_arguments)]
pub(crate) fn complex_tower(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    h_l: Var,
    vec: Var,
    h_p: Var,
    valid: &[bool],
    x: Var,
    ca: Var,
) -> Result<ComplexOut> {
    let n = g.shape(x)[0];
    let lig = g.value(x).to_points();
    let ca_pts = g.value(ca).to_points();
    let pocket: Vec<usize> = (0..ca_pts.len())
        .filter(|&j| valid[j] && lig.iter().any(|p| (p - ca_pts[j]).norm() <= cfg.cutoff))
        .collect();
    let partners = complex_frame_partners(&pocket);
    let mut framed = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (&j, &(a, b)) in pocket.iter().zip(&partners) {
        match complex_frame(ca_pts[a], ca_pts[b]) {
            Ok(_) => {
                framed.push(j);
                first.push(a);
                second.push(b);
            }
            Err(e) => log::debug!("pocket residue {j} has no usable complex frame: {e}"),
        }
    }
    if pocket.len() == 1 {
        log::debug!("single-residue pocket has no complex frame; interaction term is empty");
    }

    let mut pairs = Vec::new();
    for (i, p) in lig.iter().enumerate() {
        for (slot, &j) in framed.iter().enumerate() {
            if (p - ca_pts[j]).norm() <= cfg.cutoff {
                pairs.push((i, j, slot));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(ComplexOut {
            force: vec,
            interaction_pool: None,
        });
    }

    let fa = g.gather(ca, &first)?;
    let fb = g.gather(ca, &second)?;
    let [e1, e2, e3] = pair_frame(g, fa, fb)?;
    let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let slots: Vec<usize> = pairs.iter().map(|p| p.2).collect();
    let frame = [g.gather(e1, &slots)?, g.gather(e2, &slots)?, g.gather(e3, &slots)?];

    let hli = g.gather(h_l, &is)?;
    let hpj = g.gather(h_p, &js)?;
    let hsum = g.add(hli, hpj)?;
    let xi = g.gather(x, &is)?;
    let pj = g.gather(ca, &js)?;
    let r = g.sub(xi, pj)?;
    let lifted = g.outer3(hsum, r)?;
    let s = g.scalarize(lifted, frame)?;
    let pooled = g.sum_pool3(s)?;
    let h_ij = mlp(g, bound, "cplx.pair", pooled)?;
    let a = mlp(g, bound, "cplx.a", h_ij)?;
    let b = mlp(g, bound, "cplx.b", h_ij)?;
    let vi = g.gather(vec, &is)?;
    let t1 = g.mul_col(vi, a)?;
    let t2 = g.mul_col(r, b)?;
    let vpl = g.add(t1, t2)?;
    let mut groups = vec![Vec::new(); n];
    for (e, &i) in is.iter().enumerate() {
        groups[i].push(e);
    }
    let agg = g.mean_agg(vpl, &groups)?;
    let force = g.add(vec, agg)?;
    let pool = g.sum_rows(h_ij)?;
    Ok(ComplexOut {
        force,
        interaction_pool: Some(pool),
    })
}

pub(crate) fn center_of(g: &mut Graph, topo: &LigandTopology, enc: &ProteinEncoding, x: Var) -> Result<Var> {
    let n = topo.len();
    let m = g.constant(Tensor::new(vec![n, 1], topo.masses.clone())?);
    let weighted = g.mul_col(x, m)?;
    let lig_moment = g.sum_rows(weighted)?;
    let prot_moment = g.constant(Tensor::new(
        vec![1, 3],
        enc.mass_moment.iter().copied().collect(),
    )?);
    let total = g.add(lig_moment, prot_moment)?;
    let mass: f64 = topo.masses.iter().sum::<f64>() + enc.mass_total;
    Ok(g.mul_scalar(total, 1.0 / mass))
}

pub(crate) fn forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    topo: &LigandTopology,
    enc: &ProteinEncoding,
    x: Var,
    cond: Option<Var>,
) -> Result<ForwardOutput> {
    let center = center_of(g, topo, enc, x)?;
    let shift = g.neg(center);
    let xc = g.add_bias(x, shift)?;
    let cac = g.add_bias(enc.ca, shift)?;
    let lig = ligand_tower(g, bound, cfg, "lig", topo, xc, cond)?;
    let cplx = complex_tower(g, bound, cfg, lig.h, lig.vec, enc.h, &enc.valid, xc, cac)?;
    Ok(ForwardOutput {
        force: cplx.force,
        h: lig.h,
        vec: lig.vec,
        interaction_pool: cplx.interaction_pool,
        x_centered: xc,
        center,
    })
}

pub(crate) fn energy_head(g: &mut Graph, bound: &Bound, out: &ForwardOutput) -> Result<Var> {
    let mut pooled = g.sum_rows(out.h)?;
    if let Some(p) = out.interaction_pool {
        pooled = g.add(pooled, p)?;
    }
    let e = mlp(g, bound, "energy", pooled)?;
    Ok(g.sum(e))
}
