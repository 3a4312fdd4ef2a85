//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::{Bound, Graph, ParamSet, Tensor, Var};

/// Denominator floor. Central differences at `h ≈ 1e-5` carry roughly 1e-11
/// of roundoff, so gradients below this are compared absolutely instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Max relative error between `backward()` and `(f(x+h) − f(x−h)) / 2h` over
/// every coordinate of `x`, with denominator `max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic = g.grad(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(t);
        let y = f(&mut g, xv)?;
        scalar_of(&g, y)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check over every scalar of a parameter set.
pub fn grad_check_params<F>(params: &ParamSet, f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let y = f(&mut g, &bound)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let mut analytic = Vec::with_capacity(params.num_scalars());
    for (name, _) in params.iter() {
        analytic.extend_from_slice(g.grad(bound.get(name)?).data());
    }

    let base = params.flatten();
    let mut probe = params.clone();
    let mut eval = |flat: &[f64]| -> Result<f64> {
        probe.unflatten(flat)?;
        let mut g = Graph::new();
        let b = probe.bind_frozen(&mut g);
        let y = f(&mut g, &b)?;
        scalar_of(&g, y)
    };
    let mut worst = 0.0f64;
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        let fp = eval(&flat)?;
        flat[i] = base[i] - h;
        let fm = eval(&flat)?;
        flat[i] = base[i];
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}
