//! Multi-layer perceptrons over bound parameters.
//!
//! An MLP named `p` stores layer `k` as `p.w{k}` (`in×out`) and `p.b{k}` (`out`).
//! Hidden layers use SiLU; the last layer is affine only.

use rand::Rng;

use crate::error::{Error, Result};

use super::{Bound, Graph, ParamSet, Var};

/// Adds an MLP with layer widths `dims` (input first) to `params`.
///
/// With `zero_last`, the output layer starts at zero so the network outputs
/// exactly zero until trained.
pub fn init_mlp(
    params: &mut ParamSet,
    rng: &mut impl Rng,
    prefix: &str,
    dims: &[usize],
    zero_last: bool,
) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!("MLP `{prefix}` needs at least two widths")));
    }
    let last = dims.len() - 2;
    for (k, w) in dims.windows(2).enumerate() {
        let name = format!("{prefix}.w{k}");
        if zero_last && k == last {
            params.insert_zeros(name, &[w[0], w[1]])?;
        } else {
            params.insert_uniform(name, &[w[0], w[1]], w[0], rng)?;
        }
        params.insert_zeros(format!("{prefix}.b{k}"), &[w[1]])?;
    }
    Ok(())
}

pub fn mlp(g: &mut Graph, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let mut h = x;
    let mut k = 0;
    loop {
        let wname = format!("{prefix}.w{k}");
        if !params.contains(&wname) {
            break;
        }
        if k > 0 {
            h = g.silu(h);
        }
        let w = params.get(&wname)?;
        let b = params.get(&format!("{prefix}.b{k}"))?;
        h = g.matmul(h, w)?;
        h = g.add_bias(h, b)?;
        k += 1;
    }
    if k == 0 {
        return Err(Error::UnknownParameter(format!("{prefix}.w0")));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = ParamSet::new(0);
        p.insert_zeros("m.w0", &[3, 4]).unwrap();
        p.insert_zeros("m.b0", &[4]).unwrap();
        p.insert_zeros("m.w1", &[4, 2]).unwrap();
        p.insert_zeros("m.b1", &[2]).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let y = mlp(&mut g, &b, "m", x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut p = ParamSet::new(0);
        p.insert("m.w0", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        p.insert_zeros("m.b0", &[2]).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::matrix(1, 2, vec![0.25, -4.0]).unwrap());
        let y = mlp(&mut g, &b, "m", x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn two_layer_net_matches_scripted_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new(5);
        init_mlp(&mut p, &mut rng, "m", &[3, 5, 2], false).unwrap();
        // give biases non-zero values so they are exercised
        for name in ["m.b0", "m.b1"] {
            let t = p.get_mut(name).unwrap();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.1 * i as f64 - 0.2;
            }
        }
        let x = [0.3, -1.2, 0.8];
        let w0 = p.get("m.w0").unwrap().data().to_vec();
        let b0 = p.get("m.b0").unwrap().data().to_vec();
        let w1 = p.get("m.w1").unwrap().data().to_vec();
        let b1 = p.get("m.b1").unwrap().data().to_vec();
        let mut hidden = [0.0; 5];
        for j in 0..5 {
            let mut s = b0[j];
            for i in 0..3 {
                s += x[i] * w0[i * 5 + j];
            }
            hidden[j] = s / (1.0 + (-s).exp());
        }
        let mut expected = [0.0; 2];
        for j in 0..2 {
            let mut s = b1[j];
            for i in 0..5 {
                s += hidden[i] * w1[i * 2 + j];
            }
            expected[j] = s;
        }

        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let xv = g.constant(Tensor::matrix(1, 3, x.to_vec()).unwrap());
        let y = mlp(&mut g, &b, "m", xv).unwrap();
        for (e, v) in expected.iter().zip(g.value(y).data()) {
            assert!((e - v).abs() < 1e-12);
        }
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new(1);
        init_mlp(&mut p, &mut rng, "m", &[3, 4, 1], false).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(mlp(&mut g, &b, "m", x), Err(Error::ShapeMismatch { .. })));
    }
}
