//! Recorded computation graph with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly, stores its value, and remembers its inputs; [`Graph::backward`]
//! then walks the tape in reverse. Parameters and data are borrowed, so
//! building a graph over a large parameter store costs no copies.
//!
//! Shape errors inside the graph are programming errors and panic with the
//! op name; public model APIs validate user-facing shapes before they get
//! here.

use std::borrow::Cow;

use crate::eigen::sym_eigen;
use crate::error::{NetError, Result};
use crate::Mat;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    CausalSoftmax(Var),
    SymEigTop {
        a: Var,
        full: Mat,
        values: Vec<f64>,
        gap: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ColMean(..) => "col_mean",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::SymEigTop { .. } => "sym_eig_top",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    requires_grad: bool,
}

/// Tape of eagerly evaluated ops.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    nonfinite: Option<(usize, &'static str)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.nonfinite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn op(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Borrowed, non-differentiable input.
    pub fn input(&mut self, m: &'a Mat) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, false)
    }

    /// Owned, non-differentiable input.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// Owned differentiable leaf.
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true)
    }

    /// Borrowed differentiable leaf (used for parameters).
    pub fn param(&mut self, m: &'a Mat) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, true)
    }

    /// Borrowed parameter that should not receive gradients.
    pub fn frozen(&mut self, m: &'a Mat) -> Var {
        self.input(m)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert!(m.nrows() == 1 && m.ncols() == 1, "scalar() on a {}x{} node", m.nrows(), m.ncols());
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = self.value(v);
        (m.nrows(), m.ncols())
    }

    /// First op that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            None => Ok(()),
            Some((node, op)) => Err(NetError::NonFinite { op, node }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: {}x{} * {}x{}", va.nrows(), va.ncols(), vb.nrows(), vb.ncols());
        let out = va * vb;
        self.op(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.op(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        self.op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = self.value(a) - self.value(b);
        self.op(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.value(a).component_mul(self.value(b));
        self.op(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the 1 x m row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "add_row: {}x{} + {}x{}", va.nrows(), va.ncols(), vr.nrows(), vr.ncols());
        let mut out = va.clone();
        for mut row in out.row_iter_mut() {
            row += vr;
        }
        self.op(out, Op::AddRow(a, r), &[a, r])
    }

    /// Multiplies every row of `a` elementwise by the 1 x m row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "mul_row: shape mismatch");
        let mut out = va.clone();
        for mut row in out.row_iter_mut() {
            row.component_mul_assign(vr);
        }
        self.op(out, Op::MulRow(a, r), &[a, r])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.op(out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).add_scalar(c);
        self.op(out, Op::Offset(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.op(out, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.op(out, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.op(out, Op::Square(a), &[a])
    }

    /// Clamps entries to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.op(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_element(1, 1, self.value(a).sum());
        self.op(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Mat::from_element(1, 1, v.sum() / v.len() as f64);
        self.op(out, Op::Mean(a), &[a])
    }

    /// Column means of an n x m matrix as a 1 x m row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.nrows() as f64;
        let out = Mat::from_fn(1, v.ncols(), |_, j| v.column(j).sum() / n);
        self.op(out, Op::ColMean(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).columns(start, len).into_owned();
        self.op(out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).rows(start, len).into_owned();
        self.op(out, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.nrows(), rows, "concat_cols: row mismatch");
            out.columns_mut(at, v.ncols()).copy_from(v);
            at += v.ncols();
        }
        self.op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let d = v.ncols() as f64;
        let mut out = v.clone();
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in out.row_iter_mut() {
            let mean = row.sum() / d;
            row.add_scalar_mut(-mean);
            let var = row.iter().map(|x| x * x).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row *= is;
            inv_std.push(is);
        }
        self.op(out, Op::LayerNormRows { x: a, inv_std }, &[a])
    }

    /// Row-wise softmax where entry (i, j) is masked out for j > i.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, m) = (v.nrows(), v.ncols());
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let upto = (i + 1).min(m);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..upto {
                mx = mx.max(v[(i, j)]);
            }
            let mut z = 0.0;
            for j in 0..upto {
                let e = (v[(i, j)] - mx).exp();
                out[(i, j)] = e;
                z += e;
            }
            for j in 0..upto {
                out[(i, j)] /= z;
            }
        }
        self.op(out, Op::CausalSoftmax(a), &[a])
    }

    /// Top `top` eigenvectors (descending eigenvalue, sign-normalized) of a
    /// symmetric matrix. In the adjoint, eigenpairs closer than `gap` do not
    /// exchange gradient.
    pub fn sym_eig_top(&mut self, a: Var, top: usize, gap: f64) -> Var {
        let v = self.value(a);
        assert!(v.is_square() && top <= v.nrows(), "sym_eig_top: bad shape or top");
        let eig = sym_eigen(v);
        let out = eig.vectors.columns(0, top).into_owned();
        self.op(
            out,
            Op::SymEigTop {
                a,
                full: eig.vectors,
                values: eig.values,
                gap,
            },
            &[a],
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let (r, c) = self.shape(loss);
        if r != 1 || c != 1 {
            return Err(NetError::NotScalar(r, c));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::from_element(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = &g * self.value(*b).transpose();
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).tr_mul(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, -&g);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.component_mul(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.component_mul(self.value(*a)));
                    }
                }
                Op::AddRow(a, r) => {
                    if self.rg(*r) {
                        acc(&mut grads, *r, col_sums(&g));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let vr = self.value(*r);
                    if self.rg(*r) {
                        let prod = g.component_mul(self.value(*a));
                        acc(&mut grads, *r, col_sums(&prod));
                    }
                    if self.rg(*a) {
                        let mut ga = g;
                        for mut row in ga.row_iter_mut() {
                            row.component_mul_assign(vr);
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = g.zip_map(out, |gi, y| gi * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g.component_mul(out)),
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let k = g[(0, 0)] / (r * c) as f64;
                    acc(&mut grads, *a, Mat::from_element(r, c, k));
                }
                Op::ColMean(a) => {
                    let (r, c) = self.shape(*a);
                    let n = r as f64;
                    acc(&mut grads, *a, Mat::from_fn(r, c, |_, j| g[(0, j)] / n));
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    ga.columns_mut(*start, g.ncols()).copy_from(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    ga.rows_mut(*start, g.nrows()).copy_from(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            acc(&mut grads, *p, g.columns(at, w).into_owned());
                        }
                        at += w;
                    }
                }
                Op::LayerNormRows { x, inv_std } => {
                    let d = out.ncols() as f64;
                    let mut ga = Mat::zeros(out.nrows(), out.ncols());
                    for i in 0..out.nrows() {
                        let gy = g.row(i);
                        let y = out.row(i);
                        let mg = gy.sum() / d;
                        let mgy = gy.dot(&y) / d;
                        for j in 0..out.ncols() {
                            ga[(i, j)] = inv_std[i] * (gy[j] - mg - y[j] * mgy);
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::CausalSoftmax(a) => {
                    let mut ga = Mat::zeros(out.nrows(), out.ncols());
                    for i in 0..out.nrows() {
                        let upto = (i + 1).min(out.ncols());
                        let mut s = 0.0;
                        for j in 0..upto {
                            s += out[(i, j)] * g[(i, j)];
                        }
                        for j in 0..upto {
                            ga[(i, j)] = out[(i, j)] * (g[(i, j)] - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SymEigTop {
                    a,
                    full,
                    values,
                    gap,
                } => {
                    let k = full.nrows();
                    let mut qbar = Mat::zeros(k, k);
                    qbar.columns_mut(0, g.ncols()).copy_from(&g);
                    let mut m = full.tr_mul(&qbar);
                    for r in 0..k {
                        for c in 0..k {
                            let diff = values[c] - values[r];
                            m[(r, c)] = if r != c && diff.abs() > *gap {
                                m[(r, c)] / diff
                            } else {
                                0.0
                            };
                        }
                    }
                    let abar = full * m * full.transpose();
                    let sym = (&abar + abar.transpose()) * 0.5;
                    acc(&mut grads, *a, sym);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn col_sums(m: &Mat) -> Mat {
    Mat::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar with respect to every differentiable leaf it reaches.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> Mat {
        Mat::from_row_slice(r, c, v)
    }

    #[test]
    fn quadratic_matmul_gradient() {
        // loss = 1/2 |W x|^2 at W = I gives dW = x x^T
        let x = m(3, 1, &[1.0, -2.0, 0.5]);
        let mut g = Graph::new();
        let w = g.leaf(Mat::identity(3, 3));
        let xv = g.input(&x);
        let y = g.matmul(w, xv);
        let sq = g.square(y);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        let expect = &x * x.transpose();
        assert!((grads.get(w).unwrap() - expect).abs().max() < 1e-15);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(m(1, 1, &[2.0]));
        let b = g.leaf(m(1, 1, &[3.0]));
        let sq = g.square(a);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap()[(0, 0)], 4.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn nonfinite_names_op() {
        let mut g = Graph::new();
        let a = g.leaf(m(1, 1, &[1000.0]));
        let e = g.exp(a);
        let loss = g.sum(e);
        match g.backward(loss) {
            Err(NetError::NonFinite { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected non-finite error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn causal_softmax_rows_are_distributions() {
        let mut g = Graph::new();
        let a = g.constant(m(3, 3, &[1.0, 5.0, 9.0, 0.2, -0.3, 7.0, 3.0, 2.0, 1.0]));
        let p = g.causal_softmax(a);
        let v = g.value(p);
        assert_eq!(v[(0, 0)], 1.0);
        assert_eq!(v[(0, 1)], 0.0);
        assert_eq!(v[(1, 2)], 0.0);
        for i in 0..3 {
            assert!((v.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_variance_row_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(m(1, 4, &[5.0; 4]));
        let y = g.layer_norm_rows(a, 1e-5);
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }
}
