//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in exact reverse order and accumulates gradients additively, so a
//! variable used twice receives the sum of both contributions.

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    Sin,
    Cos,
    Softplus,
    Clamp(f64, f64),
    WrapAngle,
}

impl UnOp {
    fn name(self) -> &'static str {
        match self {
            UnOp::Neg => "neg",
            UnOp::Scale(_) => "scale",
            UnOp::AddScalar(_) => "add_scalar",
            UnOp::Tanh => "tanh",
            UnOp::Sigmoid => "sigmoid",
            UnOp::Exp => "exp",
            UnOp::Log => "log",
            UnOp::Sqrt => "sqrt",
            UnOp::Square => "square",
            UnOp::Sin => "sin",
            UnOp::Cos => "cos",
            UnOp::Softplus => "softplus",
            UnOp::Clamp(..) => "clamp",
            UnOp::WrapAngle => "wrap_angle",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var),
    Unary(UnOp, Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    SumGroups(Var, usize),
    MeanRowGroups(Var, usize),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectGroups(Var, usize, Vec<usize>),
    RowNormalize(Var),
    RowJacobian(Vec<Var>, Vec<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

/// Parameters of a [`ParamSet`] bound to leaf nodes of a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn wrap_angle(a: f64) -> f64 {
    crate::wrap_angle(a)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn bcast_index(i: usize, j: usize, rows: usize, cols: usize) -> usize {
    let ii = if rows == 1 { 0 } else { i };
    let jj = if cols == 1 { 0 } else { j };
    ii * cols + jj
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Errors if any op so far produced NaN or infinity.
    pub fn check(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(NnError::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, "constant")
    }

    /// Leaf that is differentiated against (an input rather than a parameter).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.constant(t)
    }

    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .tensors()
            .iter()
            .map(|t| self.push(t.clone(), Op::Leaf, "param"))
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let t = Tensor::from_vec(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), "matmul"))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca, rb, cb) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        let compat = |x: usize, y: usize| x == y || x == 1 || y == 1;
        if !compat(ra, rb) || !compat(ca, cb) {
            return Err(NnError::ShapeMismatch {
                op: name,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (r, c) = (ra.max(rb), ca.max(cb));
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data = if ra == rb && ca == cb {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    let x = av.data()[bcast_index(i, j, ra, ca)];
                    let y = bv.data()[bcast_index(i, j, rb, cb)];
                    d.push(f(x, y));
                }
            }
            d
        };
        let t = Tensor::from_vec(r, c, data)?;
        Ok(self.push(t, Op::Binary(op, a, b), name))
    }

    /// Elementwise ops broadcast `1 x m`, `n x 1` and `1 x 1` operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b, "div")
    }

    /// `x * w + b` with `b` a `1 x m` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Var {
        let x = self.value(a);
        let t = match op {
            UnOp::Neg => x.map(|v| -v),
            UnOp::Scale(c) => x.map(|v| v * c),
            UnOp::AddScalar(c) => x.map(|v| v + c),
            UnOp::Tanh => x.map(f64::tanh),
            UnOp::Sigmoid => x.map(sigmoid),
            UnOp::Exp => x.map(f64::exp),
            UnOp::Log => x.map(f64::ln),
            UnOp::Sqrt => x.map(f64::sqrt),
            UnOp::Square => x.map(|v| v * v),
            UnOp::Sin => x.map(f64::sin),
            UnOp::Cos => x.map(f64::cos),
            UnOp::Softplus => x.map(softplus),
            UnOp::Clamp(lo, hi) => x.map(|v| v.clamp(lo, hi)),
            UnOp::WrapAngle => x.map(wrap_angle),
        };
        self.push(t, Op::Unary(op, a), op.name())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnOp::Neg, a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnOp::Scale(c), a)
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnOp::AddScalar(c), a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnOp::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sigmoid, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnOp::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnOp::Log, a)
    }
    /// Gradient is taken as zero where the output is exactly zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnOp::Square, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnOp::Cos, a)
    }
    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnOp::Softplus, a)
    }
    /// Hard clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnOp::Clamp(lo, hi), a)
    }
    /// Wraps to `(-pi, pi]`; the gradient is the identity.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        self.unary(UnOp::WrapAngle, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: f64 = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), "mean")
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
        self.push(Tensor::column(data), Op::SumCols(a), "sum_cols")
    }

    /// Sums consecutive groups of `group` columns: `n x (g*k) -> n x g`.
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        if group == 0 || !x.cols().is_multiple_of(group) {
            return Err(NnError::ShapeMismatch {
                op: "sum_groups",
                left: x.shape().to_vec(),
                right: vec![group],
            });
        }
        let g = x.cols() / group;
        let mut data = Vec::with_capacity(x.rows() * g);
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            for k in 0..g {
                data.push(row[k * group..(k + 1) * group].iter().sum());
            }
        }
        let t = Tensor::from_vec(x.rows(), g, data)?;
        Ok(self.push(t, Op::SumGroups(a, group), "sum_groups"))
    }

    /// Averages consecutive blocks of `group` rows: `(n*k) x m -> n x m`.
    pub fn mean_row_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        if group == 0 || !x.rows().is_multiple_of(group) {
            return Err(NnError::ShapeMismatch {
                op: "mean_row_groups",
                left: x.shape().to_vec(),
                right: vec![group],
            });
        }
        let (n, m) = (x.rows() / group, x.cols());
        let mut data = vec![0.0; n * m];
        for r in 0..x.rows() {
            let out = &mut data[(r / group) * m..(r / group + 1) * m];
            for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
                *o += v / group as f64;
            }
        }
        let t = Tensor::from_vec(n, m, data)?;
        Ok(self.push(t, Op::MeanRowGroups(a, group), "mean_row_groups"))
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| logsumexp(x.row_slice(r))).collect();
        self.push(Tensor::column(data), Op::LogSumExpRows(a), "logsumexp_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let l = logsumexp(row);
            data.extend(row.iter().map(|v| v - l));
        }
        let t = Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(t, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(NnError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows],
                    right: v.shape().to_vec(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let t = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), "concat_cols"))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(NnError::ShapeMismatch {
                op: "slice_cols",
                left: x.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let t = Tensor::from_vec(x.rows(), len, data)?;
        Ok(self.push(t, Op::Slice(a, start), "slice_cols"))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(NnError::ShapeMismatch {
                op: "gather_rows",
                left: x.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx {
            data.extend_from_slice(x.row_slice(i));
        }
        let t = Tensor::from_vec(idx.len(), x.cols(), data)?;
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), "gather_rows"))
    }

    /// Per row `r`, picks the `group`-column block with index `idx[r]`.
    pub fn select_groups(&mut self, a: Var, group: usize, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let blocks = x.cols().checked_div(group).unwrap_or(0);
        if idx.len() != x.rows() || group == 0 || idx.iter().any(|&k| k >= blocks) {
            return Err(NnError::ShapeMismatch {
                op: "select_groups",
                left: x.shape().to_vec(),
                right: vec![idx.len(), group],
            });
        }
        let mut data = Vec::with_capacity(x.rows() * group);
        for (r, &k) in idx.iter().enumerate() {
            data.extend_from_slice(&x.row_slice(r)[k * group..(k + 1) * group]);
        }
        let t = Tensor::from_vec(x.rows(), group, data)?;
        Ok(self.push(t, Op::SelectGroups(a, group, idx.to_vec()), "select_groups"))
    }

    /// Scales each row to unit L2 norm (zero rows stay zero).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            data.extend(row.iter().map(|v| v * inv));
        }
        let t = Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(t, Op::RowNormalize(a), "row_normalize")
    }

    /// Custom row-wise function with caller-supplied local derivatives.
    ///
    /// `value` is `n x m`; each input is an `n x 1` column and `jacs[i][r, c]`
    /// is `d value[r, c] / d inputs[i][r]`.
    pub fn row_jacobian(&mut self, value: Tensor, inputs: &[Var], jacs: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != jacs.len() {
            return Err(NnError::ShapeMismatch {
                op: "row_jacobian",
                left: vec![inputs.len()],
                right: vec![jacs.len()],
            });
        }
        for (&v, j) in inputs.iter().zip(&jacs) {
            let iv = self.value(v);
            if iv.rows() != value.rows() || iv.cols() != 1 || !j.same_shape(&value) {
                return Err(NnError::ShapeMismatch {
                    op: "row_jacobian",
                    left: value.shape().to_vec(),
                    right: j.shape().to_vec(),
                });
            }
        }
        Ok(self.push(value, Op::RowJacobian(inputs.to_vec(), jacs), "row_jacobian"))
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Gradients of one scalar loss with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient tensors for bound parameters (zeros where the loss does not reach).
    pub fn of(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .map(|&v| {
                let shape = tape.value(v).shape().to_vec();
                let data = match self.get(v) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tape.value(v).len()],
                };
                Tensor::new(shape, data).expect("gradient matches value shape")
            })
            .collect()
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Reverse pass from the scalar `loss`.
pub fn backward(tape: &Tape, loss: Var) -> Result<Gradients> {
    if loss.0 >= tape.nodes.len() {
        return Err(NnError::NotOnTape(loss.0));
    }
    let lv = &tape.nodes[loss.0].value;
    if lv.len() != 1 {
        return Err(NnError::NotScalar(lv.shape().to_vec()));
    }
    tape.check()?;

    let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
    grads.resize_with(loss.0 + 1, || None);
    grads[loss.0] = Some(vec![1.0]);

    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &tape.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G B^T ; dB = A^T G
                let ga = acc(&mut grads[a.0], m * k);
                gemm(m, n, k, &g, false, bv.data(), true, ga, true);
                let gb = acc(&mut grads[b.0], k * n);
                gemm(k, m, n, av.data(), true, &g, false, gb, true);
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let (ra, ca, rb, cb) = (av.rows(), av.cols(), bv.rows(), bv.cols());
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for ii in 0..r {
                    for jj in 0..c {
                        let o = ii * c + jj;
                        let ia = bcast_index(ii, jj, ra, ca);
                        let ib = bcast_index(ii, jj, rb, cb);
                        let (x, z) = (av.data()[ia], bv.data()[ib]);
                        let go = g[o];
                        match op {
                            BinOp::Add => {
                                da[ia] += go;
                                db[ib] += go;
                            }
                            BinOp::Sub => {
                                da[ia] += go;
                                db[ib] -= go;
                            }
                            BinOp::Mul => {
                                da[ia] += go * z;
                                db[ib] += go * x;
                            }
                            BinOp::Div => {
                                da[ia] += go / z;
                                db[ib] -= go * x / (z * z);
                            }
                        }
                    }
                }
                add_into(acc(&mut grads[a.0], da.len()), &da);
                add_into(acc(&mut grads[b.0], db.len()), &db);
            }
            Op::Unary(op, a) => {
                let x = tape.value(*a);
                let ga = acc(&mut grads[a.0], x.len());
                for (idx, gv) in ga.iter_mut().enumerate() {
                    let (xv, yv, go) = (x.data()[idx], y.data()[idx], g[idx]);
                    *gv += match op {
                        UnOp::Neg => -go,
                        UnOp::Scale(c) => go * c,
                        UnOp::AddScalar(_) | UnOp::WrapAngle => go,
                        UnOp::Tanh => go * (1.0 - yv * yv),
                        UnOp::Sigmoid => go * yv * (1.0 - yv),
                        UnOp::Exp => go * yv,
                        UnOp::Log => go / xv,
                        UnOp::Sqrt => {
                            if yv > 0.0 {
                                go * 0.5 / yv
                            } else {
                                0.0
                            }
                        }
                        UnOp::Square => go * 2.0 * xv,
                        UnOp::Sin => go * xv.cos(),
                        UnOp::Cos => -go * xv.sin(),
                        UnOp::Softplus => go * sigmoid(xv),
                        UnOp::Clamp(lo, hi) => {
                            if xv >= *lo && xv <= *hi {
                                go
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
            Op::SumAll(a) => {
                let n = tape.value(*a).len();
                acc(&mut grads[a.0], n).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::MeanAll(a) => {
                let n = tape.value(*a).len();
                let s = g[0] / n.max(1) as f64;
                acc(&mut grads[a.0], n).iter_mut().for_each(|v| *v += s);
            }
            Op::SumCols(a) => {
                let x = tape.value(*a);
                let c = x.cols();
                let ga = acc(&mut grads[a.0], x.len());
                for (idx, v) in ga.iter_mut().enumerate() {
                    *v += g[idx / c];
                }
            }
            Op::SumGroups(a, group) => {
                let x = tape.value(*a);
                let (c, gc) = (x.cols(), y.cols());
                let ga = acc(&mut grads[a.0], x.len());
                for (idx, v) in ga.iter_mut().enumerate() {
                    let (r, col) = (idx / c, idx % c);
                    *v += g[r * gc + col / group];
                }
            }
            Op::MeanRowGroups(a, group) => {
                let x = tape.value(*a);
                let m = x.cols();
                let ga = acc(&mut grads[a.0], x.len());
                for (idx, v) in ga.iter_mut().enumerate() {
                    let (r, col) = (idx / m, idx % m);
                    *v += g[(r / group) * m + col] / *group as f64;
                }
            }
            Op::LogSumExpRows(a) => {
                let x = tape.value(*a);
                let c = x.cols();
                let ga = acc(&mut grads[a.0], x.len());
                for r in 0..x.rows() {
                    let l = y.data()[r];
                    for j in 0..c {
                        ga[r * c + j] += g[r] * (x.data()[r * c + j] - l).exp();
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = y.cols();
                let ga = acc(&mut grads[a.0], y.len());
                for r in 0..y.rows() {
                    let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                    for j in 0..c {
                        let idx = r * c + j;
                        ga[idx] += g[idx] - y.data()[idx].exp() * gs;
                    }
                }
            }
            Op::Concat(parts) => {
                let c = y.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = tape.value(*p);
                    let pc = pv.cols();
                    let gp = acc(&mut grads[p.0], pv.len());
                    for r in 0..pv.rows() {
                        for j in 0..pc {
                            gp[r * pc + j] += g[r * c + offset + j];
                        }
                    }
                    offset += pc;
                }
            }
            Op::Slice(a, start) => {
                let x = tape.value(*a);
                let (c, len) = (x.cols(), y.cols());
                let ga = acc(&mut grads[a.0], x.len());
                for r in 0..x.rows() {
                    for j in 0..len {
                        ga[r * c + start + j] += g[r * len + j];
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let x = tape.value(*a);
                let c = x.cols();
                let ga = acc(&mut grads[a.0], x.len());
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[r * c + j];
                    }
                }
            }
            Op::SelectGroups(a, group, idx) => {
                let x = tape.value(*a);
                let c = x.cols();
                let ga = acc(&mut grads[a.0], x.len());
                for (r, &k) in idx.iter().enumerate() {
                    for j in 0..*group {
                        ga[r * c + k * group + j] += g[r * group + j];
                    }
                }
            }
            Op::RowNormalize(a) => {
                let x = tape.value(*a);
                let c = x.cols();
                let ga = acc(&mut grads[a.0], x.len());
                for r in 0..x.rows() {
                    let row = x.row_slice(r);
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[r * c + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::RowJacobian(inputs, jacs) => {
                let c = y.cols();
                for (inp, jac) in inputs.iter().zip(jacs) {
                    let n = tape.value(*inp).len();
                    let gi = acc(&mut grads[inp.0], n);
                    for (r, gv) in gi.iter_mut().enumerate() {
                        let jr = &jac.data()[r * c..(r + 1) * c];
                        *gv += jr.iter().zip(&g[r * c..(r + 1) * c]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        grads[i] = Some(g);
    }

    Ok(Gradients { grads })
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
