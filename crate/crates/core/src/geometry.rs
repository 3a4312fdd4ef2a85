//! Vector frames, scalarization and neighbor search.
//!
//! Three frame constructions are provided: the atom-pair frame used inside
//! ligands, the N–Cα–C backbone frame used for protein residues, and the
//! residue-pair frame used for ligand–pocket interactions. All of them rotate
//! with the input coordinates; the pair frames contain a cross product of
//! absolute positions, so they are only translation invariant once the system
//! has been centred with [`centralize`].

use nalgebra::{Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Norms below this make a frame degenerate.
pub const DEGENERACY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameBasis {
    pub e1: Vec3,
    pub e2: Vec3,
    pub e3: Vec3,
}

impl FrameBasis {
    pub fn identity() -> Self {
        Self {
            e1: Vec3::x(),
            e2: Vec3::y(),
            e3: Vec3::z(),
        }
    }

    pub fn axes(&self) -> [Vec3; 3] {
        [self.e1, self.e2, self.e3]
    }

    pub fn rotated(&self, r: &Rotation3<f64>) -> Self {
        Self {
            e1: r * self.e1,
            e2: r * self.e2,
            e3: r * self.e3,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.axes()
            .iter()
            .zip(other.axes())
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

/// Pairs `(i, j)` within a cutoff, both directions, no self pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairList {
    pub pairs: Vec<(usize, usize)>,
    pub cutoff: f64,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

fn normalized(v: Vec3, what: &str) -> Result<Vec3> {
    let n = v.norm();
    if !(n >= DEGENERACY_TOL) {
        return Err(Error::DegenerateFrame(format!("{what} has norm {n:e}")));
    }
    Ok(v / n)
}

/// Subtracts the mass-weighted centroid. Returns the shifted points and the centre.
pub fn centralize(positions: &[Vec3], masses: &[f64]) -> Result<(Vec<Vec3>, Vec3)> {
    if positions.is_empty() {
        return Err(Error::EmptyInput("centralize needs at least one point"));
    }
    if positions.len() != masses.len() {
        return Err(Error::Config(format!(
            "{} positions but {} masses",
            positions.len(),
            masses.len()
        )));
    }
    if masses.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Config("masses must be positive".into()));
    }
    let center = mass_center(positions, masses);
    Ok((positions.iter().map(|p| p - center).collect(), center))
}

pub fn mass_center(positions: &[Vec3], masses: &[f64]) -> Vec3 {
    let total: f64 = masses.iter().sum();
    let mut c = Vec3::zeros();
    for (p, m) in positions.iter().zip(masses) {
        c += p * *m;
    }
    c / total
}

/// All pairs with `‖xᵢ − xⱼ‖ ≤ cutoff`, emitted in both directions, sorted.
///
/// Larger inputs go through a uniform grid with cell size `cutoff`; the result
/// is identical to the brute-force scan.
pub fn neighbor_pairs(positions: &[Vec3], cutoff: f64) -> PairList {
    const GRID_THRESHOLD: usize = 64;
    let pairs = if positions.len() > GRID_THRESHOLD && cutoff > 0.0 {
        grid_pairs(positions, cutoff)
    } else {
        brute_force_pairs(positions, cutoff)
    };
    PairList { pairs, cutoff }
}

pub fn brute_force_pairs(positions: &[Vec3], cutoff: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..positions.len() {
        for j in 0..positions.len() {
            if i != j && (positions[i] - positions[j]).norm() <= cutoff {
                out.push((i, j));
            }
        }
    }
    out
}

fn grid_pairs(positions: &[Vec3], cutoff: f64) -> Vec<(usize, usize)> {
    use std::collections::HashMap;
    let cell = |p: &Vec3| {
        (
            (p.x / cutoff).floor() as i64,
            (p.y / cutoff).floor() as i64,
            (p.z / cutoff).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let mut out = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let (cx, cy, cz) = cell(p);
        let mut found = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(members) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in members {
                            if j != i && (p - positions[j]).norm() <= cutoff {
                                found.push(j);
                            }
                        }
                    }
                }
            }
        }
        found.sort_unstable();
        out.extend(found.into_iter().map(|j| (i, j)));
    }
    out
}

/// Classical Gram–Schmidt on `(v1, v2, v3)`, normalizing every output vector.
pub fn gram_schmidt(v1: Vec3, v2: Vec3, v3: Vec3) -> Result<FrameBasis> {
    let e1 = normalized(v1, "first Gram-Schmidt vector")?;
    let u2 = v2 - e1 * e1.dot(&v2);
    let e2 = normalized(u2, "second Gram-Schmidt residual")?;
    let u3 = v3 - e1 * e1.dot(&v3) - e2 * e2.dot(&v3);
    let e3 = normalized(u3, "third Gram-Schmidt residual")?;
    Ok(FrameBasis { e1, e2, e3 })
}

/// Atom-pair frame: `(x̂ᵢ−x̂ⱼ, x̂ᵢ×x̂ⱼ, e1×e2)` on centred coordinates.
pub fn atom_frame(xi: Vec3, xj: Vec3) -> Result<FrameBasis> {
    let e1 = normalized(xi - xj, "pair difference")?;
    let e2 = normalized(xi.cross(&xj), "pair cross product")?;
    Ok(FrameBasis {
        e1,
        e2,
        e3: e1.cross(&e2),
    })
}

/// Backbone frame from N, Cα, C. The first two axes are not orthogonalized.
pub fn backbone_frame(x_n: Vec3, x_ca: Vec3, x_c: Vec3) -> Result<FrameBasis> {
    let e1 = normalized(x_n - x_ca, "N-CA bond")?;
    let e2 = normalized(x_ca - x_c, "CA-C bond")?;
    let e3 = normalized(e1.cross(&e2), "backbone normal (collinear N, CA, C)")?;
    Ok(FrameBasis { e1, e2, e3 })
}

/// Residue-pair frame on consecutive pocket residues' Cα coordinates.
pub fn complex_frame(xp_i: Vec3, xp_next: Vec3) -> Result<FrameBasis> {
    atom_frame(xp_i, xp_next)
}

/// Applies Gram–Schmidt to an existing frame.
pub fn orthogonalize(frame: &FrameBasis) -> Result<FrameBasis> {
    gram_schmidt(frame.e1, frame.e2, frame.e3)
}

pub fn scalarize(v: &Vec3, frame: &FrameBasis) -> Vec3 {
    Vec3::new(v.dot(&frame.e1), v.dot(&frame.e2), v.dot(&frame.e3))
}

/// Row-wise scalarization of a `d×3` block.
pub fn scalarize_rows(rows: &[Vec3], frame: &FrameBasis) -> Vec<Vec3> {
    rows.iter().map(|r| scalarize(r, frame)).collect()
}

pub fn vectorize(s: &Vec3, frame: &FrameBasis) -> Vec3 {
    frame.e1 * s.x + frame.e2 * s.y + frame.e3 * s.z
}

/// Residues whose Cα lies within `cutoff` of any ligand atom, in sequence order.
pub fn pocket_residues(ligand: &[Vec3], ca: &[Vec3], cutoff: f64) -> Vec<usize> {
    ca.iter()
        .enumerate()
        .filter(|(_, c)| ligand.iter().any(|x| (x - *c).norm() <= cutoff))
        .map(|(i, _)| i)
        .collect()
}

/// Residue pair used to build the complex frame of each pocket member: the
/// next pocket residue in sequence order, or the predecessor for the last one.
/// A pocket of fewer than two residues has no frames.
pub fn complex_frame_partners(pocket: &[usize]) -> Vec<(usize, usize)> {
    if pocket.len() < 2 {
        return Vec::new();
    }
    (0..pocket.len())
        .map(|k| {
            if k + 1 < pocket.len() {
                (pocket[k], pocket[k + 1])
            } else {
                (pocket[k - 1], pocket[k])
            }
        })
        .collect()
}

/// Haar-uniform random rotation.
pub fn random_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    quat.to_rotation_matrix()
}

pub fn rotation_about(axis: Vec3, angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
}
