mod common;

use common::*;
use neuralmd::bindingnet::{centralize_complex, BindingNet, LigandState, LigandTopology, ModelConfig, ProteinStructure};
use neuralmd::geometry::{random_rotation, Vec3};
use neuralmd::tensor::{grad_check, grad_check_params, Graph, Tensor};
use neuralmd::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rigid(
    ligand: &LigandState,
    protein: &ProteinStructure,
    seed: u64,
) -> (nalgebra::Rotation3<f64>, LigandState, ProteinStructure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_rotation(&mut rng);
    let t = Vec3::new(3.0, -2.0, 7.5) * (seed as f64 % 3.0);
    (r, ligand.map_points(|p| r * p + t), protein.map_points(|p| r * p + t))
}

#[test]
fn untrained_network_has_zero_vectors_and_force() {
    let net = BindingNet::new(small_config(16, 2), 3).unwrap();
    let (lig, prot) = probe_complex();
    let (lig, prot, _) = centralize_complex(&lig, &prot);
    let out = net.ligand_tower(&lig).unwrap();
    assert!(out.vec.iter().all(|v| *v == Vec3::zeros()));
    let f = net.predict_force(&lig, &prot).unwrap();
    assert!(f.iter().all(|v| *v == Vec3::zeros()));
    assert_eq!(net.predict_energy(&lig, &prot).unwrap(), 0.0);
}

#[test]
fn uncentered_input_is_rejected() {
    let net = BindingNet::new(small_config(8, 1), 0).unwrap();
    let (lig, prot) = probe_complex();
    let shifted = lig.map_points(|p| p + Vec3::new(5.0, 0.0, 0.0));
    assert!(matches!(net.predict_force(&shifted, &prot), Err(Error::Config(_))));
}

#[test]
fn identical_elements_share_embedding_rows() {
    let mut net = BindingNet::new(small_config(8, 1), 1).unwrap();
    let lig = LigandState::new(vec![6, 6], vec![Vec3::new(1.0, 0.2, 0.0), Vec3::new(-0.3, 1.0, 0.1)]).unwrap();
    net.params_mut().get_mut("lig.rbf").unwrap().data_mut().fill(0.0);
    let names: Vec<String> = net.params().names().filter(|n| n.starts_with("lig.layer")).map(String::from).collect();
    for n in names {
        net.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let h = net.ligand_tower(&lig).unwrap().h;
    let d = 8;
    assert_eq!(&h.data()[..d], &h.data()[d..]);
    // zero table gives zero embeddings
    net.params_mut().get_mut("lig.embed").unwrap().data_mut().fill(0.0);
    let h = net.ligand_tower(&lig).unwrap().h;
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn rbf_filter_matches_scripted_basis_for_near_coincident_pair() {
    // one layer-free tower: h = z0 + rbf-weighted neighbour embedding
    let cfg = ModelConfig {
        hidden: 4,
        layers: 0,
        ..ModelConfig::default()
    };
    let net = randomized_net(cfg.clone(), 2);
    let eps = 1e-7;
    let a = Vec3::new(1.0, 0.5, 0.2);
    let lig = LigandState::new(vec![6, 8], vec![a, a + Vec3::new(eps, 0.0, 0.0)]).unwrap();
    let h = net.ligand_tower(&lig).unwrap().h;
    let embed = net.params().get("lig.embed").unwrap();
    let w = net.params().get("lig.rbf").unwrap();
    let centers = cfg.rbf_centers();
    let gamma = cfg.rbf_gamma();
    let d = cfg.hidden;
    let row = |z: usize| &embed.data()[(z - 1) * d..z * d];
    for k in 0..d {
        let mut filt = 0.0;
        for (b, mu) in centers.iter().enumerate() {
            filt += (-gamma * mu * mu).exp() * w.data()[b * d + k];
        }
        let expected = row(6)[k] + row(8)[k] * filt;
        assert!((h.data()[k] - expected).abs() < 1e-6, "channel {k}");
    }
}

#[test]
fn isolated_atom_keeps_its_embedding() {
    let cfg = ModelConfig { hidden: 4, layers: 0, cutoff: 2.0, ..ModelConfig::default() };
    let net = randomized_net(cfg, 4);
    let lig = LigandState::new(
        vec![6, 7, 8],
        vec![Vec3::new(1.0, 0.0, 0.1), Vec3::new(0.0, 1.0, 0.2), Vec3::new(10.0, -9.0, 4.0)],
    )
    .unwrap();
    let h = net.ligand_tower(&lig).unwrap().h;
    let embed = net.params().get("lig.embed").unwrap();
    assert_eq!(&h.data()[8..12], &embed.data()[7 * 4..8 * 4]);
}

#[test]
fn ligand_without_pairs_is_an_error() {
    let net = BindingNet::new(small_config(4, 1), 0).unwrap();
    let lig = LigandState::new(vec![6, 6], vec![Vec3::new(10.0, 0.0, 0.0), Vec3::new(-10.0, 1.0, 0.0)]).unwrap();
    assert!(matches!(net.ligand_tower(&lig), Err(Error::NoValidPairs { .. })));
}

#[test]
fn single_residue_with_zeroed_pair_mlp_returns_type_embedding() {
    let mut net = BindingNet::new(small_config(6, 1), 9).unwrap();
    for name in ["prot.pair.w0", "prot.pair.w1"] {
        net.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let (n, ca, c) = residue(Vec3::new(0.5, 0.1, -0.2), 0.4);
    let prot = ProteinStructure::new(vec![4], vec![n], vec![ca], vec![c]).unwrap();
    let h = net.protein_tower(&prot).unwrap();
    assert_eq!(h.data(), &net.params().get("prot.res").unwrap().data()[4 * 6..5 * 6]);
}

#[test]
fn identical_residues_get_identical_rows_and_degenerate_ones_are_skipped() {
    let net = randomized_net(small_config(6, 1), 5);
    let (n0, ca0, c0) = residue(Vec3::zeros(), 0.2);
    let shift = Vec3::new(40.0, 0.0, 0.0);
    let bad = Vec3::new(-40.0, 0.0, 0.0);
    let prot = ProteinStructure::new(
        vec![3, 3, 5],
        vec![n0, n0 + shift, bad],
        vec![ca0, ca0 + shift, bad + Vec3::x()],
        vec![c0, c0 + shift, bad + 2.0 * Vec3::x()],
    )
    .unwrap();
    let h = net.protein_tower(&prot).unwrap();
    // the translated copy differs from the original only by rounding
    for k in 0..6 {
        assert!((h.data()[k] - h.data()[6 + k]).abs() < 1e-12);
    }
    assert_eq!(&h.data()[12..], &net.params().get("prot.res").unwrap().data()[5 * 6..6 * 6]);

    let all_bad = ProteinStructure::new(vec![0], vec![bad], vec![bad + Vec3::x()], vec![bad + 2.0 * Vec3::x()]).unwrap();
    assert!(net.protein_tower(&all_bad).is_err());
}

#[test]
fn far_ligand_force_equals_internal_vector() {
    let net = randomized_net(small_config(8, 2), 6);
    let (lig, prot) = probe_complex();
    let far = lig.map_points(|p| p + Vec3::new(60.0, 0.0, 0.0));
    let (far, prot, _) = centralize_complex(&far, &prot);
    let internal = net.ligand_tower(&far).unwrap();
    let h_p = net.protein_tower(&prot).unwrap();
    let f = net.complex_tower(&internal, &h_p, &far, &prot).unwrap();
    assert_eq!(f, internal.vec);
    // the full path re-centres inside the graph, which may move the last bit
    assert!(max_diff(&net.predict_force(&far, &prot).unwrap(), &internal.vec) < 1e-12);
}

#[test]
fn reflection_is_not_equivariant() {
    let net = randomized_net(small_config(8, 2), 11);
    let (lig, prot) = probe_complex();
    let (lig, prot, _) = centralize_complex(&lig, &prot);
    let mirror = |p: Vec3| Vec3::new(-p.x, p.y, p.z);
    let f = net.predict_force(&lig, &prot).unwrap();
    let fm = net.predict_force(&lig.map_points(mirror), &prot.map_points(mirror)).unwrap();
    let mirrored: Vec<Vec3> = f.iter().map(|&v| mirror(v)).collect();
    assert!(max_diff(&fm, &mirrored) > 1e-3, "{}", max_diff(&fm, &mirrored));
}

#[test]
fn predictions_are_bitwise_deterministic() {
    let net = randomized_net(small_config(8, 2), 12);
    let (lig, prot) = probe_complex();
    let (lig, prot, _) = centralize_complex(&lig, &prot);
    let a = net.predict_force(&lig, &prot).unwrap();
    let b = net.predict_force(&lig, &prot).unwrap();
    assert_eq!(a, b);
}

#[test]
fn energy_force_matches_finite_differences() {
    let net = randomized_net(small_config(8, 1), 13);
    let (lig, prot) = probe_complex();
    let (lig, prot, _) = centralize_complex(&lig, &prot);
    let topo = LigandTopology::new(&lig).unwrap();
    let params = net.params().clone();
    let err = grad_check(
        |g: &mut Graph, x| {
            let b = params.bind_frozen(g);
            let enc = net.encode_protein(g, &b, &prot)?;
            let out = net.forward(g, &b, &topo, &enc, x, None)?;
            net.energy(g, &b, &out)
        },
        &Tensor::from_points(&lig.positions),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let f = net.energy_force(&lig, &prot).unwrap();
    assert!(f.iter().any(|v| v.norm() > 1e-8));
}

#[test]
fn end_to_end_loss_passes_parameter_grad_check() {
    let net = randomized_net(small_config(8, 1), 14);
    let (lig, prot) = probe_complex();
    let (lig, prot, _) = centralize_complex(&lig, &prot);
    let topo = LigandTopology::new(&lig).unwrap();
    let target = Tensor::from_points(&[Vec3::new(0.3, -0.2, 0.1), Vec3::new(-0.5, 0.4, 0.2), Vec3::new(0.1, 0.1, -0.6)]);
    let err = grad_check_params(
        net.params(),
        |g, b| {
            let enc = net.encode_protein(g, b, &prot)?;
            let x = g.constant(Tensor::from_points(&lig.positions));
            let out = net.forward(g, b, &topo, &enc, x, None)?;
            let t = g.constant(target.clone());
            let diff = g.sub(out.force, t)?;
            let abs = g.abs(diff);
            let mae = g.mean(abs);
            let e = net.energy(g, b, &out)?;
            g.add(mae, e)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn force_is_se3_equivariant_and_energy_invariant(seed in 0u64..10_000) {
        let net = randomized_net(small_config(8, 2), 21);
        let (lig, prot) = random_complex(seed, 4);
        let (c_lig, c_prot, _) = centralize_complex(&lig, &prot);
        let (r, m_lig, m_prot) = rigid(&lig, &prot, seed);
        let (m_lig, m_prot, _) = centralize_complex(&m_lig, &m_prot);

        let f = net.predict_force(&c_lig, &c_prot).unwrap();
        let fm = net.predict_force(&m_lig, &m_prot).unwrap();
        let rotated: Vec<Vec3> = f.iter().map(|v| r * v).collect();
        prop_assert!(max_diff(&fm, &rotated) < 1e-6);

        let e = net.predict_energy(&c_lig, &c_prot).unwrap();
        let em = net.predict_energy(&m_lig, &m_prot).unwrap();
        prop_assert!((e - em).abs() < 1e-6);

        let t = net.ligand_tower(&c_lig).unwrap();
        let tm = net.ligand_tower(&m_lig).unwrap();
        prop_assert!(tensor_diff(&t.h, &tm.h) < 1e-6);
        let vr: Vec<Vec3> = t.vec.iter().map(|v| r * v).collect();
        prop_assert!(max_diff(&tm.vec, &vr) < 1e-6);

        let hp = net.protein_tower(&prot).unwrap();
        let hpm = net.protein_tower(&m_prot).unwrap();
        prop_assert!(tensor_diff(&hp, &hpm) < 1e-6);
    }

    #[test]
    fn relabeling_atoms_permutes_forces(seed in 0u64..10_000) {
        let net = randomized_net(small_config(8, 2), 22);
        let (lig, prot) = random_complex(seed, 4);
        let (lig, prot, _) = centralize_complex(&lig, &prot);
        let perm = [2usize, 0, 3, 1];
        let permuted = LigandState {
            atomic_numbers: perm.iter().map(|&i| lig.atomic_numbers[i]).collect(),
            positions: perm.iter().map(|&i| lig.positions[i]).collect(),
            velocities: perm.iter().map(|&i| lig.velocities[i]).collect(),
            masses: perm.iter().map(|&i| lig.masses[i]).collect(),
        };
        let f = net.predict_force(&lig, &prot).unwrap();
        let fp = net.predict_force(&permuted, &prot).unwrap();
        let expected: Vec<Vec3> = perm.iter().map(|&i| f[i]).collect();
        prop_assert!(max_diff(&fp, &expected) < 1e-9);
    }
}
