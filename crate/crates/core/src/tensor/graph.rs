//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a node
//! holding its forward value and enough bookkeeping to run the vector-Jacobian
//! product later. Node indices are assigned in creation order, so iterating them
//! backwards is a valid reverse topological order.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    /// left operand is a one-element tensor
    Left,
    /// right operand is a one-element tensor
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var, Bcast),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Abs(Var),
    Silu(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    MeanAgg(Var, Vec<Vec<usize>>),
    ConcatCols(Var, Var),
    Outer3(Var, Var),
    Scalarize(Var, [Var; 3]),
    SumPool3(Var),
    Cross(Var, Var),
    RowDot(Var, Var),
    Normalize(Var),
    RowNorm(Var),
    Rbf(Var, Vec<f64>, f64),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single differentiation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    allocated: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of `f64` values held by forward node values.
    pub fn allocated_scalars(&self) -> usize {
        self.allocated
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.allocated += value.numel();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never accumulates a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient during [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    // ---- elementwise ---------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = if ta.shape() == tb.shape() {
            Bcast::None
        } else if tb.numel() == 1 {
            Bcast::Right
        } else if ta.numel() == 1 {
            Bcast::Left
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (shape, data) = match bc {
            Bcast::None => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Bcast::Right => {
                let y = tb.data()[0];
                (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
            }
            Bcast::Left => {
                let x = ta.data()[0];
                (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
            }
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(kind, a, b, bc), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(t, Op::MulScalar(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| -x);
        let ng = self.ng(&[a]);
        self.push(t, Op::Neg(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(t, Op::Abs(a), ng)
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(&[a]);
        self.push(t, Op::Silu(a), ng)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// Adds a length-`k` bias to every row of an `n×k` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("add_bias", a)?;
        let tb = self.value(bias);
        if tb.numel() != k {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: vec![n, k],
                right: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data = self
            .value(a)
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[a, bias]);
        Ok(self.push(Tensor::from_parts(vec![n, k], data), Op::AddBias(a, bias), ng))
    }

    /// Scales row `r` of an `n×k` matrix by `s[r]` where `s` is `n×1`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("mul_col", a)?;
        let ts = self.value(s);
        if ts.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                left: vec![n, k],
                right: ts.shape().to_vec(),
            });
        }
        let sv = ts.data();
        let data = self
            .value(a)
            .data()
            .chunks(k.max(1))
            .zip(sv)
            .flat_map(|(row, &f)| row.iter().map(move |x| x * f))
            .collect();
        let ng = self.ng(&[a, s]);
        Ok(self.push(Tensor::from_parts(vec![n, k], data), Op::MulCol(a, s), ng))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Column sums of an `n×k` matrix as a `1×k` matrix.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, k) = self.matrix_dims("sum_rows", a)?;
        let mut out = vec![0.0; k];
        for row in self.value(a).data().chunks(k.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(vec![1, k], out), Op::SumRows(a), ng))
    }

    // ---- indexing ------------------------------------------------------

    /// Selects rows `idx` of an `n×k` matrix.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims("gather", a)?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(&src[i * k..(i + 1) * k]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), k], data),
            Op::Gather(a, idx.to_vec()),
            ng,
        ))
    }

    /// Row-wise mean over each group of row indices. Empty groups give a zero row.
    pub fn mean_agg(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (n, k) = self.matrix_dims("mean_agg", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; groups.len() * k];
        for (gi, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let out = &mut data[gi * k..(gi + 1) * k];
            for &m in members {
                if m >= n {
                    return Err(Error::IndexOutOfRange {
                        op: "mean_agg",
                        index: m,
                        len: n,
                    });
                }
                for (o, x) in out.iter_mut().zip(&src[m * k..(m + 1) * k]) {
                    *o += x;
                }
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![groups.len(), k], data),
            Op::MeanAgg(a, groups.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ka) = self.matrix_dims("concat_cols", a)?;
        let (n2, kb) = self.matrix_dims("concat_cols", b)?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: vec![n, ka],
                right: vec![n2, kb],
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ka + kb));
        for r in 0..n {
            data.extend_from_slice(&da[r * ka..(r + 1) * ka]);
            data.extend_from_slice(&db[r * kb..(r + 1) * kb]);
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![n, ka + kb], data),
            Op::ConcatCols(a, b),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let v = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    // ---- geometric -----------------------------------------------------

    /// Per-row outer product of channels `z` (`E×c`) and a 3-vector `r` (`E×3`),
    /// laid out channel-major as `E×(3c)`.
    pub fn outer3(&mut self, z: Var, r: Var) -> Result<Var> {
        let (e, c) = self.matrix_dims("outer3", z)?;
        let (e2, three) = self.matrix_dims("outer3", r)?;
        if e != e2 || three != 3 {
            return Err(Error::ShapeMismatch {
                op: "outer3",
                left: vec![e, c],
                right: vec![e2, three],
            });
        }
        let (dz, dr) = (self.value(z).data(), self.value(r).data());
        let mut data = Vec::with_capacity(e * c * 3);
        for row in 0..e {
            let rv = &dr[row * 3..row * 3 + 3];
            for ch in 0..c {
                let zz = dz[row * c + ch];
                data.extend(rv.iter().map(|x| zz * x));
            }
        }
        let ng = self.ng(&[z, r]);
        Ok(self.push(Tensor::from_parts(vec![e, c * 3], data), Op::Outer3(z, r), ng))
    }

    /// Projects each 3-vector channel of `h` (`E×(3c)`) onto the per-row frame
    /// `(e1, e2, e3)`, each `E×3`. Output keeps the `E×(3c)` layout with the
    /// frame axis fastest.
    pub fn scalarize(&mut self, h: Var, frame: [Var; 3]) -> Result<Var> {
        let (e, c3) = self.matrix_dims("scalarize", h)?;
        if c3 % 3 != 0 {
            return Err(Error::InvalidTensor(format!(
                "scalarize expects a multiple of 3 columns, got {c3}"
            )));
        }
        for f in frame {
            let dims = self.matrix_dims("scalarize", f)?;
            if dims != (e, 3) {
                return Err(Error::ShapeMismatch {
                    op: "scalarize",
                    left: vec![e, c3],
                    right: vec![dims.0, dims.1],
                });
            }
        }
        let dh = self.value(h).data();
        let fr: Vec<&[f64]> = frame.iter().map(|f| self.value(*f).data()).collect();
        let c = c3 / 3;
        let mut data = vec![0.0; e * c3];
        for row in 0..e {
            for ch in 0..c {
                let hv = &dh[row * c3 + ch * 3..row * c3 + ch * 3 + 3];
                for (k, basis) in fr.iter().enumerate() {
                    let b = &basis[row * 3..row * 3 + 3];
                    data[row * c3 + ch * 3 + k] = hv[0] * b[0] + hv[1] * b[1] + hv[2] * b[2];
                }
            }
        }
        let ng = self.ng(&[h, frame[0], frame[1], frame[2]]);
        Ok(self.push(Tensor::from_parts(vec![e, c3], data), Op::Scalarize(h, frame), ng))
    }

    /// Sums the three frame components of each channel: `E×(3c)` → `E×c`.
    pub fn sum_pool3(&mut self, h: Var) -> Result<Var> {
        let (e, c3) = self.matrix_dims("sum_pool3", h)?;
        if c3 % 3 != 0 {
            return Err(Error::InvalidTensor(format!(
                "sum_pool3 expects a multiple of 3 columns, got {c3}"
            )));
        }
        let data = self
            .value(h)
            .data()
            .chunks(3)
            .map(|t| t[0] + t[1] + t[2])
            .collect();
        let ng = self.ng(&[h]);
        Ok(self.push(Tensor::from_parts(vec![e, c3 / 3], data), Op::SumPool3(h), ng))
    }

    fn rows3(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let da = self.matrix_dims(op, a)?;
        let db = self.matrix_dims(op, b)?;
        if da != db || da.1 != 3 {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![da.0, da.1],
                right: vec![db.0, db.1],
            });
        }
        Ok(da.0)
    }

    pub fn cross(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.rows3("cross", a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * 3);
        for r in 0..n {
            data.extend_from_slice(&cross3(&da[r * 3..r * 3 + 3], &db[r * 3..r * 3 + 3]));
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, 3], data), Op::Cross(a, b), ng))
    }

    /// Row-wise dot product of two `n×3` matrices, `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.rows3("row_dot", a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|r| dot3(&da[r * 3..r * 3 + 3], &db[r * 3..r * 3 + 3]))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, 1], data), Op::RowDot(a, b), ng))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("normalize_rows", a)?;
        let data = self
            .value(a)
            .data()
            .chunks(k.max(1))
            .flat_map(|row| {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter().map(move |x| x / norm)
            })
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, k], data), Op::Normalize(a), ng))
    }

    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("row_norm", a)?;
        let data = self
            .value(a)
            .data()
            .chunks(k.max(1))
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, 1], data), Op::RowNorm(a), ng))
    }

    /// Gaussian radial basis expansion of an `E×1` distance column:
    /// `out[e, k] = exp(-gamma * (d[e] - centers[k])^2)`.
    pub fn rbf(&mut self, dist: Var, centers: &[f64], gamma: f64) -> Result<Var> {
        let (e, one) = self.matrix_dims("rbf", dist)?;
        if one != 1 {
            return Err(Error::ShapeMismatch {
                op: "rbf",
                left: vec![e, one],
                right: vec![e, 1],
            });
        }
        let data = self
            .value(dist)
            .data()
            .iter()
            .flat_map(|&d| centers.iter().map(move |&mu| (-gamma * (d - mu).powi(2)).exp()))
            .collect();
        let ng = self.ng(&[dist]);
        Ok(self.push(
            Tensor::from_parts(vec![e, centers.len()], data),
            Op::Rbf(dist, centers.to_vec(), gamma),
            ng,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a one-element `loss`. Gradients of every node that
    /// depends on a gradient-requiring leaf become available via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let seed = Tensor::from_parts(lt.shape().to_vec(), vec![1.0]);
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward loss w.r.t. `v`; zeros if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    fn acc(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, contrib));
            }
        }
    }

    fn acc_scalar(&mut self, v: Var, s: f64) {
        self.acc(v, vec![s]);
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let gd = g.data();
        // Borrow juggling: clone the small op descriptor data we need.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (a, b, kind, bc) = (*a, *b, *kind, *bc);
                self.binary_backward(kind, a, b, bc, idx, gd);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.acc(a, gd.to_vec());
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                self.acc(a, gd.iter().map(|x| x * c).collect());
            }
            Op::Neg(a) => {
                let a = *a;
                self.acc(a, gd.iter().map(|x| -x).collect());
            }
            Op::Abs(a) => {
                let a = *a;
                let c = self
                    .val(a)
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                self.acc(a, c);
            }
            Op::Silu(a) => {
                let a = *a;
                let c = self
                    .val(a)
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.acc(a, c);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    // dA = G · Bᵀ
                    let bv = self.val(b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    self.acc(a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · G
                    let av = self.val(a);
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += x * gd[i * n + j];
                            }
                        }
                    }
                    self.acc(b, gb);
                }
            }
            Op::AddBias(a, bias) => {
                let (a, bias) = (*a, *bias);
                let k = self.val(bias).len();
                self.acc(a, gd.to_vec());
                if self.nodes[bias.0].needs_grad {
                    let mut gb = vec![0.0; k];
                    for row in gd.chunks(k.max(1)) {
                        for (o, x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.acc(bias, gb);
                }
            }
            Op::MulCol(a, s) => {
                let (a, s) = (*a, *s);
                let k = self.shape(a)[1].max(1);
                let sv = self.val(s).to_vec();
                if self.nodes[a.0].needs_grad {
                    let ga = gd
                        .chunks(k)
                        .zip(&sv)
                        .flat_map(|(row, &f)| row.iter().map(move |x| x * f))
                        .collect();
                    self.acc(a, ga);
                }
                if self.nodes[s.0].needs_grad {
                    let gs = gd
                        .chunks(k)
                        .zip(self.val(a).chunks(k))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    self.acc(s, gs);
                }
            }
            Op::Sum(a) => {
                let a = *a;
                let n = self.val(a).len();
                self.acc(a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.val(a).len();
                self.acc(a, vec![gd[0] / n.max(1) as f64; n]);
            }
            Op::SumRows(a) => {
                let a = *a;
                let n = self.shape(a)[0];
                let ga = (0..n).flat_map(|_| gd.iter().copied()).collect();
                self.acc(a, ga);
            }
            Op::Gather(a, idxs) => {
                let a = *a;
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let mut ga = vec![0.0; n * k];
                if let Op::Gather(_, idxs) = &self.nodes[idx].op {
                    for (r, &i) in idxs.iter().enumerate() {
                        for c in 0..k {
                            ga[i * k + c] += gd[r * k + c];
                        }
                    }
                }
                let _ = idxs;
                self.acc(a, ga);
            }
            Op::MeanAgg(a, _) => {
                let a = *a;
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let mut ga = vec![0.0; n * k];
                if let Op::MeanAgg(_, groups) = &self.nodes[idx].op {
                    for (gi, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        for &m in members {
                            for c in 0..k {
                                ga[m * k + c] += gd[gi * k + c] * inv;
                            }
                        }
                    }
                }
                self.acc(a, ga);
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let ka = self.shape(a)[1];
                let kb = self.shape(b)[1];
                let n = self.shape(a)[0];
                let mut ga = Vec::with_capacity(n * ka);
                let mut gb = Vec::with_capacity(n * kb);
                for r in 0..n {
                    let row = &gd[r * (ka + kb)..(r + 1) * (ka + kb)];
                    ga.extend_from_slice(&row[..ka]);
                    gb.extend_from_slice(&row[ka..]);
                }
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Reshape(a) => {
                let a = *a;
                self.acc(a, gd.to_vec());
            }
            Op::Outer3(z, r) => {
                let (z, r) = (*z, *r);
                let (e, c) = (self.shape(z)[0], self.shape(z)[1]);
                let (zv, rv) = (self.val(z), self.val(r));
                let mut gz = vec![0.0; e * c];
                let mut gr = vec![0.0; e * 3];
                for row in 0..e {
                    for ch in 0..c {
                        let go = &gd[row * c * 3 + ch * 3..row * c * 3 + ch * 3 + 3];
                        let rr = &rv[row * 3..row * 3 + 3];
                        gz[row * c + ch] = dot3(go, rr);
                        let zz = zv[row * c + ch];
                        for a in 0..3 {
                            gr[row * 3 + a] += go[a] * zz;
                        }
                    }
                }
                self.acc(z, gz);
                self.acc(r, gr);
            }
            Op::Scalarize(h, frame) => {
                let (h, frame) = (*h, *frame);
                let (e, c3) = (self.shape(h)[0], self.shape(h)[1]);
                let c = c3 / 3;
                let hv = self.val(h).to_vec();
                let fr: Vec<Vec<f64>> = frame.iter().map(|f| self.val(*f).to_vec()).collect();
                let mut gh = vec![0.0; e * c3];
                let mut gf = vec![vec![0.0; e * 3]; 3];
                for row in 0..e {
                    for ch in 0..c {
                        let base = row * c3 + ch * 3;
                        for k in 0..3 {
                            let go = gd[base + k];
                            if go == 0.0 {
                                continue;
                            }
                            for a in 0..3 {
                                gh[base + a] += go * fr[k][row * 3 + a];
                                gf[k][row * 3 + a] += go * hv[base + a];
                            }
                        }
                    }
                }
                self.acc(h, gh);
                for (f, gfk) in frame.into_iter().zip(gf) {
                    self.acc(f, gfk);
                }
            }
            Op::SumPool3(h) => {
                let h = *h;
                let gh = gd.iter().flat_map(|&x| [x, x, x]).collect();
                self.acc(h, gh);
            }
            Op::Cross(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.shape(a)[0];
                let (av, bv) = (self.val(a), self.val(b));
                let mut ga = Vec::with_capacity(n * 3);
                let mut gb = Vec::with_capacity(n * 3);
                for r in 0..n {
                    let go = &gd[r * 3..r * 3 + 3];
                    ga.extend_from_slice(&cross3(&bv[r * 3..r * 3 + 3], go));
                    gb.extend_from_slice(&cross3(go, &av[r * 3..r * 3 + 3]));
                }
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::RowDot(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.val(a), self.val(b));
                let ga = bv
                    .chunks(3)
                    .zip(gd)
                    .flat_map(|(row, &g)| row.iter().map(move |x| x * g))
                    .collect();
                let gb = av
                    .chunks(3)
                    .zip(gd)
                    .flat_map(|(row, &g)| row.iter().map(move |x| x * g))
                    .collect();
                self.acc(a, ga);
                self.acc(b, gb);
            }
            Op::Normalize(a) => {
                let a = *a;
                let k = self.shape(a)[1].max(1);
                let av = self.val(a);
                let mut ga = Vec::with_capacity(av.len());
                for (row, go) in av.chunks(k).zip(gd.chunks(k)) {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let ydotg: f64 = row.iter().zip(go).map(|(x, g)| x / norm * g).sum();
                    ga.extend(row.iter().zip(go).map(|(x, g)| (g - x / norm * ydotg) / norm));
                }
                self.acc(a, ga);
            }
            Op::RowNorm(a) => {
                let a = *a;
                let k = self.shape(a)[1].max(1);
                let av = self.val(a);
                let mut ga = Vec::with_capacity(av.len());
                for (row, &go) in av.chunks(k).zip(gd) {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        ga.extend(row.iter().map(|x| go * x / norm));
                    } else {
                        ga.extend(row.iter().map(|_| 0.0));
                    }
                }
                self.acc(a, ga);
            }
            Op::Rbf(dist, centers, gamma) => {
                let (dist, gamma) = (*dist, *gamma);
                let centers = centers.clone();
                let out = &self.nodes[idx].value;
                let kc = centers.len();
                let gdist = self
                    .val(dist)
                    .iter()
                    .enumerate()
                    .map(|(e, &d)| {
                        (0..kc)
                            .map(|k| {
                                gd[e * kc + k]
                                    * out.data()[e * kc + k]
                                    * (-2.0 * gamma * (d - centers[k]))
                            })
                            .sum()
                    })
                    .collect();
                self.acc(dist, gdist);
            }
        }
    }

    fn binary_backward(&mut self, kind: BinaryKind, a: Var, b: Var, bc: Bcast, _idx: usize, gd: &[f64]) {
        let av = self.val(a).to_vec();
        let bv = self.val(b).to_vec();
        let n = gd.len();
        let at = |i: usize| if bc == Bcast::Left { av[0] } else { av[i] };
        let bt = |i: usize| if bc == Bcast::Right { bv[0] } else { bv[i] };
        let (da, db): (Vec<f64>, Vec<f64>) = match kind {
            BinaryKind::Add => (gd.to_vec(), gd.to_vec()),
            BinaryKind::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
            BinaryKind::Mul => (
                (0..n).map(|i| gd[i] * bt(i)).collect(),
                (0..n).map(|i| gd[i] * at(i)).collect(),
            ),
            BinaryKind::Div => (
                (0..n).map(|i| gd[i] / bt(i)).collect(),
                (0..n).map(|i| -gd[i] * at(i) / (bt(i) * bt(i))).collect(),
            ),
        };
        match bc {
            Bcast::None => {
                self.acc(a, da);
                self.acc(b, db);
            }
            Bcast::Right => {
                self.acc(a, da);
                self.acc_scalar(b, db.iter().sum());
            }
            Bcast::Left => {
                self.acc_scalar(a, da.iter().sum());
                self.acc(b, db);
            }
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

pub(crate) fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}
