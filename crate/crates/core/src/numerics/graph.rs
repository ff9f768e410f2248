//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and enough cached state to run its backward rule.
//! [`Graph::backward`] walks the tape in reverse, and
//! [`Graph::accumulate_into`] adds the gradients of parameter leaves into a
//! [`ParamStore`].
//!
//! Everything is two-dimensional: vectors are `1×d` rows and scalars `1×1`.

use ndarray::{Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Selu(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    SiMse {
        pred: Var,
        // d/dŷ of the loss, computed in the forward pass
        dpred: Matrix,
    },
    Contrastive {
        zh: Var,
        zl: Var,
        dzh: Matrix,
        dzl: Matrix,
    },
    Mmd {
        a: Var,
        b: Var,
        da: Matrix,
        db: Matrix,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::MulRow(..) => "mul_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Selu(_) => "selu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SelectRows(..) => "select_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SumCols(_) => "sum_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SiMse { .. } => "si_mse",
            Op::Contrastive { .. } => "contrastive",
            Op::Mmd { .. } => "mmd",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    non_finite: Option<&'static str>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient can be read after `backward`.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Parameter leaf that is never differentiated, regardless of its flag.
    pub fn param_const(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// `x + b` with `b` a `1×d` row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sb[0] != 1 || sb[1] != sx[1] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let v = self.value(x) + self.value(b);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddBias(x, b), rg))
    }

    /// `x ⊙ r` with `r` a `1×d` row broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (sx, sr) = (self.value(x).shape(), self.value(r).shape());
        if sr[0] != 1 || sr[1] != sx[1] {
            return Err(shape_err("mul_row", sx, sr));
        }
        let v = self.value(x) * self.value(r);
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(v, Op::MulRow(x, r), rg))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(selu);
        let rg = self.rg(a);
        self.push(v, Op::Selu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise layer normalization with population variance, followed by
    /// the affine `γ ⊙ x̂ + β` (both `1×d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            return Err(shape_err(
                "layer_norm",
                self.value(x).shape(),
                self.value(gamma).shape(),
            ));
        }
        let xv = self.value(x);
        let mut xhat = Matrix::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (row, mut out) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(a).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Dimension(format!(
                "select_rows: row {bad} out of range for {n} rows"
            )));
        }
        let v = self.value(a).select(Axis(0), rows);
        let rg = self.rg(a);
        Ok(self.push(v, Op::SelectRows(a, rows.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Dimension(format!("concat_cols: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sum across columns: `n×d → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_elem((1, 1), m.sum() / m.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Fused masked scale-invariant MSE; see [`crate::losses::si_mse`].
    pub(crate) fn push_si_mse(&mut self, pred: Var, value: f64, dpred: Matrix) -> Var {
        let rg = self.rg(pred);
        self.push(
            Matrix::from_elem((1, 1), value),
            Op::SiMse { pred, dpred },
            rg,
        )
    }

    pub(crate) fn push_contrastive(
        &mut self,
        zh: Var,
        zl: Var,
        value: f64,
        dzh: Matrix,
        dzl: Matrix,
    ) -> Var {
        let rg = self.rg(zh) || self.rg(zl);
        self.push(
            Matrix::from_elem((1, 1), value),
            Op::Contrastive { zh, zl, dzh, dzl },
            rg,
        )
    }

    pub(crate) fn push_mmd(&mut self, a: Var, b: Var, value: f64, da: Matrix, db: Matrix) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(Matrix::from_elem((1, 1), value), Op::Mmd { a, b, da, db }, rg)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Runs reverse accumulation from the scalar node `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if let Some(op) = self.non_finite {
            return Err(Error::NonFinite(op.to_string()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward target must be 1×1, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().any(|g| !g.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("backward".into()));
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Matrix| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[idx].value;

        match &nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if nodes[a.0].requires_grad {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if nodes[b.0].requires_grad {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(x, r) => {
                if nodes[x.0].requires_grad {
                    acc(*x, g * val(*r));
                }
                if nodes[r.0].requires_grad {
                    acc(*r, (g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if nodes[a.0].requires_grad {
                    acc(*a, g * val(*b));
                }
                if nodes[b.0].requires_grad {
                    acc(*b, g * val(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Selu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= selu_grad(x));
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| *d *= if x > 0.0 { 1.0 } else { *slope });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * out),
            Op::Square(a) => acc(*a, g * val(*a) * 2.0),
            Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 0.5 / y);
                acc(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if nodes[gamma.0].requires_grad {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if nodes[beta.0].requires_grad {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if nodes[x.0].requires_grad {
                    let dxhat = g * val(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut dx = Matrix::zeros(xhat.raw_dim());
                    for (i, mut row) in dx.outer_iter_mut().enumerate() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[i];
                        Zip::from(&mut row).and(&dh).and(&xh).for_each(|o, &a, &b| {
                            *o = is / d * (d * a - sum_dh - b * sum_dh_xh);
                        });
                    }
                    acc(*x, dx);
                }
            }
            Op::SelectRows(a, rows) => {
                let mut d = Matrix::zeros(val(*a).raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    acc(
                        *p,
                        g.slice(ndarray::s![.., offset..offset + w]).to_owned(),
                    );
                    offset += w;
                }
            }
            Op::SumCols(a) => {
                let mut d = Matrix::zeros(val(*a).raw_dim());
                for (mut row, gi) in d.outer_iter_mut().zip(g.column(0)) {
                    row.fill(*gi);
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Matrix::from_elem(val(*a).raw_dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Matrix::from_elem(val(*a).raw_dim(), g[[0, 0]] / n));
            }
            Op::SiMse { pred, dpred } => acc(*pred, dpred * g[[0, 0]]),
            Op::Contrastive { zh, zl, dzh, dzl } => {
                acc(*zh, dzh * g[[0, 0]]);
                acc(*zl, dzl * g[[0, 0]]);
            }
            Op::Mmd { a, b, da, db } => {
                acc(*a, da * g[[0, 0]]);
                acc(*b, db * g[[0, 0]]);
            }
        }
    }

    /// Adds the gradients of all trainable parameter leaves into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad += g;
                }
            }
        }
    }
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
