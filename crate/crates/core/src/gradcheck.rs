//! Central finite-difference checks for tape gradients.
//!
//! The error reported per tensor is
//! `‖g_analytic - g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, FLOOR)`.
//! The floor keeps gradients that are identically zero (for example the
//! attention key bias, which softmax cancels) from dividing rounding noise
//! by rounding noise.

use crate::params::ParamStore;
use crate::tape::{Graph, Mat, Var};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const FLOOR: f64 = 1e-7;

/// Norm-wise relative difference between two gradients of the same shape.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let na = analytic.mapv(|v| v * v).sum().sqrt();
    let nn = numeric.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nn).max(FLOOR)
}

/// Per-parameter relative error of the gradient of the scalar built by
/// `loss`. Frozen parameters are skipped. Returns `(name, error)` pairs.
pub fn check_params(
    store: &ParamStore,
    step: f64,
    loss: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let root = loss(&mut g, store);
    let grads = g.backward(root);
    let eval = |s: &ParamStore| {
        let mut g = Graph::no_grad();
        let r = loss(&mut g, s);
        g.scalar(r)
    };
    let mut probe = store.clone();
    let mut out = Vec::new();
    for (name, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let base = p.value.clone();
        let mut numeric = Mat::zeros(base.dim());
        for idx in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus.as_slice_mut().expect("contiguous")[idx] += step;
            minus.as_slice_mut().expect("contiguous")[idx] -= step;
            probe.set_exact(name, plus);
            let fp = eval(&probe);
            probe.set_exact(name, minus);
            let fm = eval(&probe);
            numeric.as_slice_mut().expect("contiguous")[idx] = (fp - fm) / (2.0 * step);
        }
        probe.set_exact(name, base.clone());
        let analytic = grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(base.dim()));
        out.push((name.clone(), relative_error(&analytic, &numeric)));
    }
    out
}

/// Relative error of the gradient with respect to each of several inputs.
pub fn check_inputs(
    inputs: &[Mat],
    step: f64,
    loss: impl Fn(&mut Graph, &[Var]) -> Var,
) -> Vec<f64> {
    let build = |vals: &[Mat], grad: bool| {
        let mut g = if grad { Graph::new() } else { Graph::no_grad() };
        let vars: Vec<Var> = vals.iter().map(|m| g.input(m.clone())).collect();
        let r = loss(&mut g, &vars);
        (g, vars, r)
    };
    let (g, vars, root) = build(inputs, true);
    let grads = g.backward(root);
    let mut out = Vec::new();
    for (k, base) in inputs.iter().enumerate() {
        let mut numeric = Mat::zeros(base.dim());
        let mut vals = inputs.to_vec();
        for idx in 0..base.len() {
            vals[k] = base.clone();
            vals[k].as_slice_mut().expect("contiguous")[idx] += step;
            let (g, _, r) = build(&vals, false);
            let fp = g.scalar(r);
            vals[k] = base.clone();
            vals[k].as_slice_mut().expect("contiguous")[idx] -= step;
            let (g, _, r) = build(&vals, false);
            let fm = g.scalar(r);
            numeric.as_slice_mut().expect("contiguous")[idx] = (fp - fm) / (2.0 * step);
        }
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Mat::zeros(base.dim()));
        out.push(relative_error(&analytic, &numeric));
    }
    out
}
