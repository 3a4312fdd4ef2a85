//! Element and residue vocabularies.

use crate::error::{Error, Result};

/// Element symbols and standard atomic masses (u) for H through Rn, indexed by Z − 1.
const ELEMENTS: [(&str, f64); 86] = [
    ("H", 1.008),
    ("He", 4.0026),
    ("Li", 6.94),
    ("Be", 9.0122),
    ("B", 10.81),
    ("C", 12.011),
    ("N", 14.007),
    ("O", 15.999),
    ("F", 18.998),
    ("Ne", 20.180),
    ("Na", 22.990),
    ("Mg", 24.305),
    ("Al", 26.982),
    ("Si", 28.085),
    ("P", 30.974),
    ("S", 32.06),
    ("Cl", 35.45),
    ("Ar", 39.948),
    ("K", 39.098),
    ("Ca", 40.078),
    ("Sc", 44.956),
    ("Ti", 47.867),
    ("V", 50.942),
    ("Cr", 51.996),
    ("Mn", 54.938),
    ("Fe", 55.845),
    ("Co", 58.933),
    ("Ni", 58.693),
    ("Cu", 63.546),
    ("Zn", 65.38),
    ("Ga", 69.723),
    ("Ge", 72.630),
    ("As", 74.922),
    ("Se", 78.971),
    ("Br", 79.904),
    ("Kr", 83.798),
    ("Rb", 85.468),
    ("Sr", 87.62),
    ("Y", 88.906),
    ("Zr", 91.224),
    ("Nb", 92.906),
    ("Mo", 95.95),
    ("Tc", 98.0),
    ("Ru", 101.07),
    ("Rh", 102.91),
    ("Pd", 106.42),
    ("Ag", 107.87),
    ("Cd", 112.41),
    ("In", 114.82),
    ("Sn", 118.71),
    ("Sb", 121.76),
    ("Te", 127.60),
    ("I", 126.90),
    ("Xe", 131.29),
    ("Cs", 132.91),
    ("Ba", 137.33),
    ("La", 138.91),
    ("Ce", 140.12),
    ("Pr", 140.91),
    ("Nd", 144.24),
    ("Pm", 145.0),
    ("Sm", 150.36),
    ("Eu", 151.96),
    ("Gd", 157.25),
    ("Tb", 158.93),
    ("Dy", 162.50),
    ("Ho", 164.93),
    ("Er", 167.26),
    ("Tm", 168.93),
    ("Yb", 173.05),
    ("Lu", 174.97),
    ("Hf", 178.49),
    ("Ta", 180.95),
    ("W", 183.84),
    ("Re", 186.21),
    ("Os", 190.23),
    ("Ir", 192.22),
    ("Pt", 195.08),
    ("Au", 196.97),
    ("Hg", 200.59),
    ("Tl", 204.38),
    ("Pb", 207.2),
    ("Bi", 208.98),
    ("Po", 209.0),
    ("At", 210.0),
    ("Rn", 222.0),
];

pub const NUM_ELEMENTS: usize = ELEMENTS.len();

/// Three-letter residue codes; the last entry is the unknown type.
pub const RESIDUES: [&str; 21] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET",
    "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL", "UNK",
];

pub const NUM_RESIDUE_TYPES: usize = RESIDUES.len();
pub const UNKNOWN_RESIDUE: usize = NUM_RESIDUE_TYPES - 1;

/// Backbone atom types used by the protein tower.
pub const BACKBONE_ATOMS: [&str; 3] = ["N", "CA", "C"];

/// Masses of N, Cα and C, used when centring a complex.
pub const BACKBONE_MASSES: [f64; 3] = [14.007, 12.011, 12.011];

/// Embedding row for atomic number `z`.
pub fn element_index(z: u8) -> Result<usize> {
    if (1..=NUM_ELEMENTS as u8).contains(&z) {
        Ok(z as usize - 1)
    } else {
        Err(Error::UnknownElement(format!("atomic number {z}")))
    }
}

pub fn element_symbol(z: u8) -> Result<&'static str> {
    element_index(z).map(|i| ELEMENTS[i].0)
}

pub fn atomic_number(symbol: &str) -> Result<u8> {
    ELEMENTS
        .iter()
        .position(|(s, _)| s.eq_ignore_ascii_case(symbol))
        .map(|i| i as u8 + 1)
        .ok_or_else(|| Error::UnknownElement(symbol.to_string()))
}

pub fn atomic_mass(z: u8) -> Result<f64> {
    element_index(z).map(|i| ELEMENTS[i].1)
}

pub fn residue_index(code: &str) -> Result<usize> {
    RESIDUES
        .iter()
        .position(|r| r.eq_ignore_ascii_case(code))
        .ok_or_else(|| Error::UnknownResidue(code.to_string()))
}

pub fn residue_code(index: usize) -> Result<&'static str> {
    RESIDUES
        .get(index)
        .copied()
        .ok_or_else(|| Error::UnknownResidue(format!("index {index}")))
}
