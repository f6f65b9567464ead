//! Kolmogorov-Arnold layer: every input→output edge carries a learnable
//! B-spline plus a SiLU base branch,
//!
//! ```text
//! y_j = Σ_i  w_base[i,j]·silu(x_i) + w_spline[i,j]·Σ_m c[i·nb+m, j]·B_m(x_i)
//! ```
//!
//! Inputs are clamped to the grid range before the spline is evaluated.
//! Spline coefficients are stored `(in·nb) × out` so the spline branch is a
//! single matrix product with the expanded basis.

use rand::Rng;

use super::{join, Builder};
use crate::error::{Error, Result};
use crate::params::{uniform, xavier, ParamStore};
use crate::tape::{Graph, Mat, Var};

/// B-spline basis of a given order on a uniform grid, extended by `order`
/// knots on each side. A grid of G points yields G + order - 1 functions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineBasis {
    grid: Vec<f64>,
    order: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn uniform(points: usize, order: usize, lo: f64, hi: f64) -> Self {
        assert!(
            points >= 2 && hi > lo,
            "grid needs at least two increasing points"
        );
        let h = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|i| lo + h * i as f64).collect();
        let knots = (0..points + 2 * order)
            .map(|i| lo + h * (i as f64 - order as f64))
            .collect();
        SplineBasis { grid, order, knots }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_basis(&self) -> usize {
        self.grid.len() + self.order - 1
    }

    pub fn range(&self) -> (f64, f64) {
        (self.grid[0], self.grid[self.grid.len() - 1])
    }

    /// Basis values and their derivatives at `x`. Outside the grid range the
    /// input is clamped and the derivative is zero.
    pub fn eval(&self, x: f64, values: &mut [f64], derivs: &mut [f64]) {
        let (lo, hi) = self.range();
        let clamped = x < lo || x > hi;
        let x = x.clamp(lo, hi);
        let t = &self.knots;
        let k = self.order;
        let n0 = t.len() - 1;
        // Order-0 indicators on half-open knot spans.
        let mut b: Vec<f64> = (0..n0)
            .map(|i| if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 })
            .collect();
        let mut prev = b.clone();
        for p in 1..=k {
            prev.clone_from(&b);
            let n = n0 - p;
            for i in 0..n {
                let left = (x - t[i]) / (t[i + p] - t[i]) * prev[i];
                let right = (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * prev[i + 1];
                b[i] = left + right;
            }
            b.truncate(n);
        }
        let nb = self.num_basis();
        values[..nb].copy_from_slice(&b[..nb]);
        if clamped || k == 0 {
            derivs[..nb].iter_mut().for_each(|d| *d = 0.0);
            return;
        }
        // d/dx B_{i,k} = k·(B_{i,k-1}/(t_{i+k}-t_i) - B_{i+1,k-1}/(t_{i+k+1}-t_{i+1}))
        for i in 0..nb {
            let a = prev[i] / (t[i + k] - t[i]);
            let c = prev[i + 1] / (t[i + k + 1] - t[i + 1]);
            derivs[i] = k as f64 * (a - c);
        }
    }
}

fn kan_apply(
    g: &mut Graph,
    x: Var,
    basis: &SplineBasis,
    base_weight: Var,
    spline_weight: Var,
    coeffs: Var,
) -> Var {
    let nb = basis.num_basis();
    let (t, n) = g.shape(x);
    let mut values = Mat::zeros((t, n * nb));
    let mut derivs = Mat::zeros((t, n * nb));
    {
        let xv = g.value(x);
        let mut vbuf = vec![0.0; nb];
        let mut dbuf = vec![0.0; nb];
        for r in 0..t {
            for i in 0..n {
                basis.eval(xv[[r, i]], &mut vbuf, &mut dbuf);
                for m in 0..nb {
                    values[[r, i * nb + m]] = vbuf[m];
                    derivs[[r, i * nb + m]] = dbuf[m];
                }
            }
        }
    }
    let act = g.silu(x);
    let base = g.matmul(act, base_weight);
    let phi = g.basis_expand(x, values, derivs, nb);
    let scale = g.repeat_rows_each(spline_weight, nb);
    let w_eff = g.mul(coeffs, scale);
    let spline = g.matmul(phi, w_eff);
    g.add(base, spline)
}

/// Standalone KAN layer parameters, for direct evaluation with [`kan_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub basis: SplineBasis,
    /// in × out
    pub base_weight: Mat,
    /// in × out
    pub spline_weight: Mat,
    /// (in·nb) × out
    pub coeffs: Mat,
}

impl KanLayerParams {
    pub fn zeros(in_dim: usize, out_dim: usize, grid_points: usize, order: usize) -> Self {
        let basis = SplineBasis::uniform(grid_points, order, -1.0, 1.0);
        let nb = basis.num_basis();
        KanLayerParams {
            in_dim,
            out_dim,
            basis,
            base_weight: Mat::zeros((in_dim, out_dim)),
            spline_weight: Mat::zeros((in_dim, out_dim)),
            coeffs: Mat::zeros((in_dim * nb, out_dim)),
        }
    }

    pub fn random(
        rng: &mut impl Rng,
        in_dim: usize,
        out_dim: usize,
        grid_points: usize,
        order: usize,
    ) -> Self {
        let mut p = Self::zeros(in_dim, out_dim, grid_points, order);
        p.base_weight = uniform(rng, in_dim, out_dim, 1.0);
        p.spline_weight = uniform(rng, in_dim, out_dim, 1.0);
        p.coeffs = uniform(rng, p.coeffs.nrows(), out_dim, 1.0);
        p
    }
}

/// Evaluate one KAN layer on a single input vector.
pub fn kan_forward(x: &[f64], params: &KanLayerParams) -> Result<Vec<f64>> {
    let nb = params.basis.num_basis();
    if x.len() != params.in_dim
        || params.base_weight.dim() != (params.in_dim, params.out_dim)
        || params.spline_weight.dim() != (params.in_dim, params.out_dim)
        || params.coeffs.dim() != (params.in_dim * nb, params.out_dim)
    {
        return Err(Error::BadDims(format!(
            "KAN layer {}→{} given input of length {}",
            params.in_dim,
            params.out_dim,
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite KAN input".into()));
    }
    let mut g = Graph::no_grad();
    let xv = g.constant(Mat::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let bw = g.constant(params.base_weight.clone());
    let sw = g.constant(params.spline_weight.clone());
    let c = g.constant(params.coeffs.clone());
    let y = kan_apply(&mut g, xv, &params.basis, bw, sw, c);
    Ok(g.value(y).iter().copied().collect())
}

#[derive(Clone, Debug)]
pub struct KanLayer {
    pub base_weight: String,
    pub spline_weight: String,
    pub coeffs: String,
    pub basis: SplineBasis,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl KanLayer {
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        grid_points: usize,
        order: usize,
    ) -> Self {
        let basis = SplineBasis::uniform(grid_points, order, -1.0, 1.0);
        let nb = basis.num_basis();
        let base = xavier(b.rng(), in_dim, out_dim);
        let coeff_bound = 1.0 / (in_dim as f64).sqrt();
        let coeffs = uniform(b.rng(), in_dim * nb, out_dim, coeff_bound);
        KanLayer {
            base_weight: b.add(&join(prefix, "base_weight"), base),
            spline_weight: b.add(&join(prefix, "spline_weight"), Mat::ones((in_dim, out_dim))),
            coeffs: b.add(&join(prefix, "coeffs"), coeffs),
            basis,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let bw = g.param(p, &self.base_weight);
        let sw = g.param(p, &self.spline_weight);
        let c = g.param(p, &self.coeffs);
        kan_apply(g, x, &self.basis, bw, sw, c)
    }

    /// Copy the current values out as standalone parameters.
    pub fn params(&self, p: &ParamStore) -> KanLayerParams {
        KanLayerParams {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            basis: self.basis.clone(),
            base_weight: p.value(&self.base_weight).clone(),
            spline_weight: p.value(&self.spline_weight).clone(),
            coeffs: p.value(&self.coeffs).clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// de Boor evaluation of Σ_m c_m B_m(x), independent of the basis recursion.
    fn de_boor(knots: &[f64], coeffs: &[f64], order: usize, x: f64) -> f64 {
        let l = (0..knots.len() - 1)
            .find(|&i| knots[i] <= x && x < knots[i + 1])
            .unwrap();
        let mut d: Vec<f64> = (0..=order).map(|j| coeffs[j + l - order]).collect();
        for r in 1..=order {
            for j in (r..=order).rev() {
                let i = j + l - order;
                let alpha = (x - knots[i]) / (knots[i + 1 + order - r] - knots[i]);
                d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j];
            }
        }
        d[order]
    }

    #[test]
    fn defaults_give_seven_cubic_functions() {
        let b = SplineBasis::uniform(5, 3, -1.0, 1.0);
        assert_eq!(b.num_basis(), 7);
        assert!(b.grid().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn partition_of_unity_inside_grid() {
        let b = SplineBasis::uniform(5, 3, -1.0, 1.0);
        let mut v = vec![0.0; 7];
        let mut d = vec![0.0; 7];
        for i in 0..=40 {
            let x = -1.0 + i as f64 * 0.05;
            b.eval(x, &mut v, &mut d);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12, "x={x}");
            assert!(d.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = KanLayerParams::zeros(3, 2, 5, 3);
        assert_eq!(kan_forward(&[0.3, -0.7, 2.0], &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn base_branch_only_is_silu() {
        let mut p = KanLayerParams::zeros(1, 1, 5, 3);
        p.base_weight[[0, 0]] = 1.0;
        assert_eq!(kan_forward(&[0.0], &p).unwrap(), vec![0.0]);
        let y = kan_forward(&[0.8], &p).unwrap()[0];
        assert!((y - 0.8 / (1.0 + (-0.8f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn matches_de_boor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = KanLayerParams::random(&mut rng, 3, 4, 5, 3);
        let x = [0.3, 0.3, 0.3];
        let y = kan_forward(&x, &p).unwrap();
        let nb = p.basis.num_basis();
        for j in 0..4 {
            let mut expect = 0.0;
            for i in 0..3 {
                let silu = x[i] / (1.0 + (-x[i]).exp());
                let c: Vec<f64> = (0..nb).map(|m| p.coeffs[[i * nb + m, j]]).collect();
                let s = de_boor(p.basis.knots(), &c, 3, x[i]);
                expect += p.base_weight[[i, j]] * silu + p.spline_weight[[i, j]] * s;
            }
            assert!(
                (y[j] - expect).abs() < 1e-12,
                "out {j}: {} vs {expect}",
                y[j]
            );
        }
    }

    #[test]
    fn out_of_range_inputs_are_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = KanLayerParams::random(&mut rng, 1, 1, 5, 3);
        p.base_weight.fill(0.0);
        let at_edge = kan_forward(&[1.0], &p).unwrap()[0];
        let beyond = kan_forward(&[3.7], &p).unwrap()[0];
        assert_eq!(at_edge, beyond);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = KanLayerParams::zeros(3, 2, 5, 3);
        assert!(matches!(kan_forward(&[0.1], &p), Err(Error::BadDims(_))));
    }
}
