//! Finite-difference verification of analytic gradients.

use super::graph::{Graph, Matrix, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &mut F, x: &Matrix) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences of step `eps`. Returns
/// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
///
/// `f` must be deterministic; wrap stochastic layers in
/// [`ReplayNoise`](super::rng::ReplayNoise) and rewind inside `f`.
pub fn grad_check<F>(mut f: F, x: &Matrix, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.raw_dim()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + eps;
        let up = eval_scalar(&mut f, &probe)?;
        probe[[r, c]] = orig - eps;
        let down = eval_scalar(&mut f, &probe)?;
        probe[[r, c]] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[[r, c]];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Same check against the parameters `ids` of `store`; `f` builds the
/// objective from the store and returns its scalar node.
pub fn grad_check_params<F>(store: &mut ParamStore, ids: &[ParamId], mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    g.accumulate_into(store);

    let mut worst = 0.0f64;
    for &id in ids {
        let analytic = store.get(id).grad.clone();
        let cols = analytic.ncols();
        for idx in 0..analytic.len() {
            let (r, c) = (idx / cols, idx % cols);
            let orig = store.get(id).value[[r, c]];
            store.get_mut(id).value[[r, c]] = orig + eps;
            let mut gu = Graph::new();
            let up = f(&mut gu, store)?;
            let up = gu.scalar(up);
            store.get_mut(id).value[[r, c]] = orig - eps;
            let mut gd = Graph::new();
            let down = f(&mut gd, store)?;
            let down = gd.scalar(down);
            store.get_mut(id).value[[r, c]] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite("grad_check objective".into()));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[[r, c]];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    store.zero_grad();
    Ok(worst)
}
