//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::backward`] walks the record in reverse and
//! returns the gradient of a scalar root with respect to every parameter and
//! every differentiable input leaf. Vectors are `1×n` matrices and scalars
//! are `1×1`.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Sigmoid,
    Gelu,
    Relu,
    Tanh,
    Sqrt,
    Square,
    Exp,
    Ln,
    Recip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    RepeatRows(Var),
    RepeatRowsEach(Var, usize),
    LayerNorm(Var, Mat),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    BasisExpand(Var, usize, Mat),
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    DepthwiseConv(Var, Var),
    InterpRows(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    pub params: BTreeMap<String, Mat>,
    inputs: HashMap<Var, Mat>,
}

impl Grads {
    /// Gradient with respect to an input leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.inputs.get(&v)
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    names: HashMap<Var, String>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            names: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients (evaluation mode).
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf; its gradient is available through [`Grads::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated lookups return the same node.
    ///
    /// Panics if the parameter does not exist; parameter names are fixed by
    /// the module that registered them.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.param_vars.insert(name.to_owned(), v);
        self.names.insert(v, name.to_owned());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + row` with `row` (1×n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(
            self.shape(a).1,
            self.shape(row).1,
            "add_row: width mismatch"
        );
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a * row` with `row` (1×n) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(
            self.shape(a).1,
            self.shape(row).1,
            "mul_row: width mismatch"
        );
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let x = self.value(a);
        let value = match u {
            Unary::Silu => x.mapv(|v| v * sigmoid(v)),
            Unary::Sigmoid => x.mapv(sigmoid),
            Unary::Gelu => x.mapv(gelu),
            Unary::Relu => x.mapv(|v| v.max(0.0)),
            Unary::Tanh => x.mapv(f64::tanh),
            Unary::Sqrt => x.mapv(f64::sqrt),
            Unary::Square => x.mapv(|v| v * v),
            Unary::Exp => x.mapv(f64::exp),
            Unary::Ln => x.mapv(f64::ln),
            Unary::Recip => x.mapv(f64::recip),
        };
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, u), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat_cols: row mismatch");
            value.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Column means, as a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Repeat a 1×n row `times` times.
    pub fn repeat_rows(&mut self, row: Var, times: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let value = r
            .broadcast((times, r.ncols()))
            .expect("broadcast row")
            .to_owned();
        let rg = self.rg(row);
        self.push(value, Op::RepeatRows(row), rg)
    }

    /// Repeat every row of `a` `times` times consecutively.
    pub fn repeat_rows_each(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let mut value = Mat::zeros((x.nrows() * times, x.ncols()));
        for (i, row) in x.rows().into_iter().enumerate() {
            for k in 0..times {
                value.row_mut(i * times + k).assign(&row);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::RepeatRowsEach(a, times), rg)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut value = Mat::zeros((rows, cols));
        let mut inv_std = Mat::zeros((rows, 1));
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[[r, 0]] = is;
            Zip::from(value.row_mut(r))
                .and(row)
                .for_each(|o, &v| *o = (v - mean) * is);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a, inv_std), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-element basis expansion: input `x` (T×n) maps to `value`
    /// (T×n·k) where columns `i*k..(i+1)*k` depend on `x[:, i]` only and
    /// `deriv` holds their derivatives with respect to it.
    pub fn basis_expand(&mut self, x: Var, value: Mat, deriv: Mat, k: usize) -> Var {
        let (t, n) = self.shape(x);
        assert_eq!(value.dim(), (t, n * k));
        assert_eq!(deriv.dim(), (t, n * k));
        let rg = self.rg(x);
        self.push(value, Op::BasisExpand(x, k, deriv), rg)
    }

    /// Unfold a (L×C) sequence into (F×kernel·C) windows taken every
    /// `stride` rows; F = (L - kernel) / stride + 1.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let v = self.value(x);
        let (len, ch) = v.dim();
        assert!(len >= kernel && stride > 0);
        let frames = (len - kernel) / stride + 1;
        let mut value = Mat::zeros((frames, kernel * ch));
        for f in 0..frames {
            let window = v.slice(s![f * stride..f * stride + kernel, ..]);
            let mut out = value.row_mut(f);
            for j in 0..kernel {
                out.slice_mut(s![j * ch..(j + 1) * ch])
                    .assign(&window.row(j));
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::Im2Col { x, kernel, stride }, rg)
    }

    /// Per-channel temporal convolution with zero "same" padding.
    /// `w` is (k×C) with odd k; `y[t,c] = Σ_j w[j,c]·x[t+j-k/2, c]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (t, c) = xv.dim();
        let k = wv.nrows();
        assert_eq!(wv.ncols(), c, "depthwise_conv: channel mismatch");
        assert!(k % 2 == 1, "depthwise_conv: kernel must be odd");
        let half = k / 2;
        let mut value = Mat::zeros((t, c));
        for i in 0..t {
            for j in 0..k {
                let src = i as isize + j as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xr = xv.row(src as usize);
                let wr = wv.row(j);
                Zip::from(value.row_mut(i))
                    .and(xr)
                    .and(wr)
                    .for_each(|o, &a, &b| *o += a * b);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::DepthwiseConv(x, w), rg)
    }

    /// Left-multiply by a constant matrix (used for temporal resampling).
    pub fn interp_rows(&mut self, x: Var, weights: Mat) -> Var {
        let value = weights.dot(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::InterpRows(x, weights), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        let mut out = Grads::default();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    let v = Var(i);
                    if let Some(name) = self.names.get(&v) {
                        out.params.insert(name.clone(), g);
                    } else {
                        out.inputs.insert(v, g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *row, gr);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, -&g);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = &g * self.value(*b);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = &g * self.value(*a);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.rg(*a) {
                        let ga = &g * self.value(*row);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.rg(*row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *row, gr);
                    }
                }
                Op::Scale(a, k) => self.acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => self.acc(&mut grads, *a, g),
                Op::Unary(a, u) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = g;
                    match u {
                        Unary::Silu => Zip::from(&mut ga).and(x).for_each(|g, &x| {
                            let s = sigmoid(x);
                            *g *= s * (1.0 + x * (1.0 - s));
                        }),
                        Unary::Sigmoid => Zip::from(&mut ga)
                            .and(y)
                            .for_each(|g, &y| *g *= y * (1.0 - y)),
                        Unary::Gelu => Zip::from(&mut ga)
                            .and(x)
                            .for_each(|g, &x| *g *= gelu_grad(x)),
                        Unary::Relu => Zip::from(&mut ga).and(x).for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        }),
                        Unary::Tanh => Zip::from(&mut ga)
                            .and(y)
                            .for_each(|g, &y| *g *= 1.0 - y * y),
                        Unary::Sqrt => Zip::from(&mut ga)
                            .and(y)
                            .for_each(|g, &y| *g = if y > 0.0 { *g * 0.5 / y } else { 0.0 }),
                        Unary::Square => Zip::from(&mut ga).and(x).for_each(|g, &x| *g *= 2.0 * x),
                        Unary::Exp => Zip::from(&mut ga).and(y).for_each(|g, &y| *g *= y),
                        Unary::Ln => Zip::from(&mut ga).and(x).for_each(|g, &x| *g /= x),
                        Unary::Recip => Zip::from(&mut ga).and(y).for_each(|g, &y| *g *= -y * y),
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => self.acc(&mut grads, *a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.rg(p) {
                            let gp = g.slice(s![.., at..at + w]).to_owned();
                            self.acc(&mut grads, p, gp);
                        }
                        at += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    self.acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = g
                        .broadcast((r, c))
                        .expect("broadcast mean grad")
                        .mapv(|v| v / r as f64);
                    self.acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    self.acc(&mut grads, *a, ga);
                }
                Op::RepeatRows(row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(&mut grads, *row, gr);
                }
                Op::RepeatRowsEach(a, times) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Mat::zeros((r, c));
                    for i in 0..r {
                        for k in 0..*times {
                            let src = g.row(i * times + k);
                            Zip::from(ga.row_mut(i)).and(src).for_each(|o, &v| *o += v);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
                    let xhat = &node.value;
                    let (rows, cols) = xhat.dim();
                    let mut ga = Mat::zeros((rows, cols));
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mg = gr.sum() / cols as f64;
                        let mgx = gr.dot(&xr) / cols as f64;
                        let is = inv_std[[r, 0]];
                        Zip::from(ga.row_mut(r))
                            .and(gr)
                            .and(xr)
                            .for_each(|o, &g, &x| *o = is * (g - mg - x * mgx));
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = g.row(r).dot(&y.row(r));
                        Zip::from(ga.row_mut(r))
                            .and(g.row(r))
                            .and(y.row(r))
                            .for_each(|o, &g, &y| *o = y * (g - dot));
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gs = g.row(r).sum();
                        Zip::from(ga.row_mut(r))
                            .and(g.row(r))
                            .and(y.row(r))
                            .for_each(|o, &g, &y| *o = g - y.exp() * gs);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::BasisExpand(x, k, deriv) => {
                    let (t, n) = self.shape(*x);
                    let mut gx = Mat::zeros((t, n));
                    for r in 0..t {
                        for i in 0..n {
                            let mut acc = 0.0;
                            for m in 0..*k {
                                acc += g[[r, i * k + m]] * deriv[[r, i * k + m]];
                            }
                            gx[[r, i]] = acc;
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Im2Col { x, kernel, stride } => {
                    let (len, ch) = self.shape(*x);
                    let mut gx = Mat::zeros((len, ch));
                    for f in 0..g.nrows() {
                        let row = g.row(f);
                        for j in 0..*kernel {
                            let src = row.slice(s![j * ch..(j + 1) * ch]);
                            Zip::from(gx.row_mut(f * stride + j))
                                .and(src)
                                .for_each(|o, &v| *o += v);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::DepthwiseConv(x, w) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (t, c) = xv.dim();
                    let k = wv.nrows();
                    let half = k / 2;
                    let mut gx = Mat::zeros((t, c));
                    let mut gw = Mat::zeros((k, c));
                    for i in 0..t {
                        for j in 0..k {
                            let src = i as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ch in 0..c {
                                let go = g[[i, ch]];
                                gx[[src, ch]] += go * wv[[j, ch]];
                                gw[[j, ch]] += go * xv[[src, ch]];
                            }
                        }
                    }
                    if self.rg(*w) {
                        self.acc(&mut grads, *w, gw);
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::InterpRows(x, weights) => {
                    let gx = weights.t().dot(&g);
                    self.acc(&mut grads, *x, gx);
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-5;
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x0: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.wrt(x).unwrap().clone();
        let numeric = numeric_grad(&x0, |xv| {
            let mut g = Graph::new();
            let x = g.input(xv.clone());
            let y = build(&mut g, x);
            g.scalar(y)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - n).abs() < 1e-6 * (1.0 + n.abs()),
                "analytic {a} numeric {n}"
            );
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]]
    }

    #[test]
    fn unary_ops() {
        check(sample(), |g, x| {
            let a = g.silu(x);
            let b = g.gelu(a);
            let c = g.tanh(b);
            let d = g.sigmoid(c);
            let e = g.exp(d);
            let f = g.ln(e);
            let r = g.recip(e);
            let f = g.add(f, r);
            let sq = g.square(f);
            g.sum(sq)
        });
    }

    #[test]
    fn layer_norm_and_softmax() {
        check(sample(), |g, x| {
            let n = g.layer_norm(x, 1e-5);
            let s = g.softmax_rows(n);
            let w = g.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
            let p = g.mul(s, w);
            let l = g.log_softmax_rows(x);
            let q = g.mul(l, w);
            let a = g.sum(p);
            let b = g.sum(q);
            g.add(a, b)
        });
    }

    #[test]
    fn structural_ops() {
        check(sample(), |g, x| {
            let t = g.transpose(x);
            let m = g.matmul(x, t);
            let a = g.slice_cols(x, 1, 2);
            let c = g.concat_cols(&[a, m]);
            let r = g.mean_rows(c);
            let rep = g.repeat_rows(r, 3);
            let each = g.repeat_rows_each(x, 2);
            let conv = g.im2col(each, 2, 1);
            let s1 = g.square(rep);
            let s2 = g.square(conv);
            let a = g.sum(s1);
            let b = g.sum(s2);
            g.add(a, b)
        });
    }

    #[test]
    fn depthwise_conv_grads() {
        let x0 = Mat::from_shape_fn((5, 2), |(i, j)| (i as f64 * 0.3 - j as f64).sin());
        check(x0.clone(), |g, x| {
            let w = g.constant(array![[0.2, -0.1], [0.5, 0.4], [-0.3, 0.9]]);
            let y = g.depthwise_conv(x, w);
            let s = g.square(y);
            g.sum(s)
        });
        check(array![[0.2, -0.1], [0.5, 0.4], [-0.3, 0.9]], |g, w| {
            let x = g.constant(x0.clone());
            let y = g.depthwise_conv(x, w);
            let s = g.square(y);
            g.sum(s)
        });
    }

    #[test]
    fn frozen_and_constant_leaves_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", array![[1.0, 2.0]], false);
        store.insert("b", array![[3.0, 4.0]], true);
        let mut g = Graph::new();
        let a = g.param(&store, "a");
        let b = g.param(&store, "b");
        let c = g.constant(array![[1.0, 1.0]]);
        let ab = g.mul(a, b);
        let abc = g.mul(ab, c);
        let y = g.sum(abc);
        let grads = g.backward(y);
        assert_eq!(grads.param("a").unwrap(), &array![[3.0, 4.0]]);
        assert!(grads.param("b").is_none());
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Mat::zeros((1, 1)));
        let y = g.sqrt(x);
        let grads = g.backward(y);
        assert_eq!(grads.wrt(x).unwrap()[[0, 0]], 0.0);
    }
}
