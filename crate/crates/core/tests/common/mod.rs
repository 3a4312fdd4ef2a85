#![allow(dead_code)]

use neuralmd::bindingnet::{BindingNet, LigandState, ModelConfig, ProteinStructure};
use neuralmd::geometry::Vec3;
use neuralmd::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(hidden: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        hidden,
        layers,
        ..ModelConfig::default()
    }
}

/// Network whose zero-initialised tensors are replaced by small random values,
/// so every head contributes to the output.
pub fn randomized_net(config: ModelConfig, seed: u64) -> BindingNet {
    let mut net = BindingNet::new(config, seed).unwrap();
    randomize_zeros(&mut net, seed);
    net
}

/// Fills every all-zero tensor of `net` with U(−0.3, 0.3).
pub fn randomize_zeros(net: &mut BindingNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let names: Vec<String> = net.params().names().map(String::from).collect();
    for name in names {
        let t = net.params_mut().get_mut(&name).unwrap();
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

pub fn residue(site: Vec3, twist: f64) -> (Vec3, Vec3, Vec3) {
    let n = site + Vec3::new(-1.2 * twist.cos(), 0.7, 0.4 * twist.sin());
    let c = site + Vec3::new(1.1, -0.5 * twist.cos(), 0.6);
    (n, site, c)
}

/// Four residues around the origin and a three-atom ligand inside the pocket.
pub fn probe_complex() -> (LigandState, ProteinStructure) {
    let sites = [
        Vec3::new(2.6, 0.3, 0.4),
        Vec3::new(-1.1, 2.4, -0.6),
        Vec3::new(-0.9, -1.8, 2.1),
        Vec3::new(0.2, -0.7, -2.7),
    ];
    let mut n = Vec::new();
    let mut ca = Vec::new();
    let mut c = Vec::new();
    for (k, s) in sites.iter().enumerate() {
        let (a, b, d) = residue(*s, 0.7 * k as f64 + 0.3);
        n.push(a);
        ca.push(b);
        c.push(d);
    }
    let protein = ProteinStructure::new(vec![0, 7, 12, 19], n, ca, c).unwrap();
    let ligand = LigandState::new(
        vec![6, 7, 8],
        vec![
            Vec3::new(0.4, 0.2, -0.1),
            Vec3::new(-0.8, 0.9, 0.5),
            Vec3::new(0.3, -1.1, 0.8),
        ],
    )
    .unwrap();
    (ligand, protein)
}

pub fn random_complex(seed: u64, atoms: usize) -> (LigandState, ProteinStructure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, protein) = probe_complex();
    let elements = [6u8, 7, 8, 16];
    let z = (0..atoms).map(|i| elements[i % elements.len()]).collect();
    let pos = (0..atoms)
        .map(|_| Vec3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)))
        .collect();
    (LigandState::new(z, pos).unwrap(), protein)
}

pub fn max_diff(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

pub fn tensor_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
