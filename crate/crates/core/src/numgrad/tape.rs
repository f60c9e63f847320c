//! Operation recording and reverse-mode replay.
//!
//! Every primitive pushes one node holding its forward value and enough
//! context to produce the vector-Jacobian product of its inputs. Nodes are
//! appended in evaluation order, so iterating them backwards visits each
//! node after all of its consumers.
//!
//! Non-smooth points (relu and clamp at the threshold, selu at 0, the L2
//! norm at the origin) take a zero subgradient. The tape also tracks how
//! close the recorded inputs came to such points, which lets the
//! finite-difference harness reject evaluation points that straddle a kink.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::matmul_raw;
use super::{fault, NumError, ParamId, ParamStore, Tensor};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse propagation matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub(crate) n: usize,
    pub(crate) row_ptr: Vec<usize>,
    pub(crate) col_idx: Vec<usize>,
    pub(crate) vals: Vec<f64>,
}

impl Csr {
    /// Collects the nonzero entries of a dense square matrix.
    pub fn from_dense(m: &Tensor) -> Result<Self, NumError> {
        let (r, c) = m.dims2()?;
        if r != c {
            return Err(NumError::Shape {
                op: "csr",
                lhs: m.shape().to_vec(),
                rhs: vec![c, r],
            });
        }
        let mut row_ptr = Vec::with_capacity(r + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..r {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n: r,
            row_ptr,
            col_idx,
            vals,
        })
    }

    /// Block-diagonal stacking, one block per graph in a batch.
    pub fn block_diag(blocks: &[Csr]) -> Self {
        let mut out = Self {
            n: 0,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            vals: Vec::new(),
        };
        for b in blocks {
            let offset = out.n;
            for i in 0..b.n {
                for p in b.row_ptr[i]..b.row_ptr[i + 1] {
                    out.col_idx.push(b.col_idx[p] + offset);
                    out.vals.push(b.vals[p]);
                }
                out.row_ptr.push(out.col_idx.len());
            }
            out.n += b.n;
        }
        out
    }

    pub fn size(&self) -> usize {
        self.n
    }
}

enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddN(Vec<Var>),
    Relu(Var),
    Selu(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    L2Norm(Var),
    RowL2Norms(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    Index(Var, usize),
    Propagate(Var, Rc<Csr>),
    Standardize(Var, Rc<Vec<f64>>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` when the leaf does not
    /// influence the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

/// Single-threaded recorder of differentiable operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    kink_margin: Cell<f64>,
    kink_signature: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank_err(op: &'static str, expected: usize, t: &Tensor) -> NumError {
    NumError::Rank {
        op,
        expected,
        shape: t.shape().to_vec(),
    }
}

fn accumulate(buf: &mut Option<Vec<f64>>, len: usize) -> &mut [f64] {
    buf.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            kink_margin: Cell::new(f64::INFINITY),
            kink_signature: Cell::new(FNV_OFFSET),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.kink_margin.set(f64::INFINITY);
        self.kink_signature.set(FNV_OFFSET);
    }

    /// Smallest distance from any recorded non-smooth input to its kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.get()
    }

    /// Hash of which side of its kink every recorded non-smooth input lies
    /// on. Two evaluations with equal signatures took the same branches.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature.get()
    }

    fn note_kink(&self, distance: f64) {
        if distance < self.kink_margin.get() {
            self.kink_margin.set(distance);
        }
    }

    fn note_sides(&self, values: &[f64], threshold: f64) {
        let mut h = self.kink_signature.get();
        for &x in values {
            h = (h ^ u64::from(x > threshold)).wrapping_mul(FNV_PRIME);
        }
        self.kink_signature.set(h);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn var(&self, t: &Tensor) -> Var {
        let rg = t.requires_grad;
        let mut value = t.clone();
        value.grad = None;
        self.push(value, Op::Leaf(None), rg)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf(None), false)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.grad = None;
        let rg = value.requires_grad;
        self.push(value, Op::Leaf(Some(id)), rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2().map_err(|_| shape_err("matmul", &av, &bv))?;
        let (k2, n) = bv.dims2().map_err(|_| shape_err("matmul", &av, &bv))?;
        if k != k2 {
            return Err(shape_err("matmul", &av, &bv));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, &av, &bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(av.shape(), data)?, make(a, b), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, NumError> {
        let (av, rv) = (self.value(a), self.value(row));
        let (m, n) = av.dims2().map_err(|_| shape_err(op, &av, &rv))?;
        if rv.len() != n || rv.rank() > 2 || (rv.rank() == 2 && rv.rows() != 1) {
            return Err(shape_err(op, &av, &rv));
        }
        let mut data = av.data().to_vec();
        for i in 0..m {
            for (x, &r) in data[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                *x = f(*x, r);
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(&[m, n], data)?, make(a, row), rg))
    }

    /// `a[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, NumError> {
        self.row_broadcast("add_row", a, row, |x, r| x + r, Op::AddRow)
    }

    /// `a[m×n] ⊙ row[n]` broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var, NumError> {
        self.row_broadcast("mul_row", a, row, |x, r| x * r, Op::MulRow)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), self.rg(a))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x + s).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        self.push(t, Op::AddScalar(a), self.rg(a))
    }

    /// Sum of equally shaped values.
    pub fn add_n(&self, vars: &[Var]) -> Result<Var, NumError> {
        let first = vars.first().ok_or(NumError::Empty("add_n"))?;
        let fv = self.value(*first);
        let mut data = fv.data().to_vec();
        for &v in &vars[1..] {
            let vv = self.value(v);
            if vv.shape() != fv.shape() {
                return Err(shape_err("add_n", &fv, &vv));
            }
            data.iter_mut().zip(vv.data()).for_each(|(d, x)| *d += x);
        }
        let rg = vars.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(fv.shape(), data)?, Op::AddN(vars.to_vec()), rg))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        self.push(t, op, self.rg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        if let Some(m) = av.data().iter().map(|x| x.abs()).reduce(f64::min) {
            self.note_kink(m);
        }
        self.note_sides(av.data(), 0.0);
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn selu(&self, a: Var) -> Var {
        let av = self.value(a);
        if let Some(m) = av.data().iter().map(|x| x.abs()).reduce(f64::min) {
            self.note_kink(m);
        }
        self.note_sides(av.data(), 0.0);
        self.unary(
            a,
            |x| {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            },
            Op::Selu(a),
        )
    }

    pub fn log(&self, a: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        if let Some(&bad) = av.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(NumError::Domain {
                op: "log",
                value: bad,
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        if let Some(&bad) = av.data().iter().find(|&&x| !(x >= 0.0)) {
            return Err(NumError::Domain {
                op: "sqrt",
                value: bad,
            });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    /// `max(a, floor)` elementwise.
    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        let av = self.value(a);
        if let Some(m) = av.data().iter().map(|x| (x - floor).abs()).reduce(f64::min) {
            self.note_kink(m);
        }
        self.note_sides(av.data(), floor);
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        let (m, n) = av.dims2().map_err(|_| rank_err("softmax_rows", 2, &av))?;
        let mut data = av.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::SoftmaxRows(a), self.rg(a)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), self.rg(a))
    }

    /// Column sums of a matrix: `[m×n] → [n]`.
    pub fn sum_rows(&self, a: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        let (m, n) = av.dims2()?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            out.iter_mut().zip(av.row(i)).for_each(|(o, x)| *o += x);
        }
        Ok(self.push(Tensor::vector(out), Op::SumRows(a), self.rg(a)))
    }

    /// Column means of a matrix: `[m×n] → [n]`.
    pub fn mean_rows(&self, a: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        let (m, n) = av.dims2()?;
        if m == 0 {
            return Err(NumError::Empty("mean_rows"));
        }
        let mut out = vec![0.0; n];
        for i in 0..m {
            out.iter_mut().zip(av.row(i)).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), self.rg(a)))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self, a: Var) -> Var {
        let n = self
            .value(a)
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        self.note_kink(n);
        self.push(Tensor::scalar(n), Op::L2Norm(a), self.rg(a))
    }

    /// Euclidean norm of every row: `[m×n] → [m]`.
    pub fn row_l2_norms(&self, a: Var) -> Result<Var, NumError> {
        let av = self.value(a);
        let (m, _) = av.dims2()?;
        let out: Vec<f64> = (0..m)
            .map(|i| av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        if let Some(min) = out.iter().copied().reduce(f64::min) {
            self.note_kink(min);
        }
        Ok(self.push(Tensor::vector(out), Op::RowL2Norms(a), self.rg(a)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a), self.rg(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), self.rg(a)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        let (m, n) = av.dims2()?;
        if start > end || end > m {
            return Err(NumError::Index {
                op: "slice_rows",
                index: end,
                bound: m,
            });
        }
        let data = av.data()[start * n..end * n].to_vec();
        Ok(self.push(
            Tensor::new(&[end - start, n], data)?,
            Op::SliceRows(a, start),
            self.rg(a),
        ))
    }

    /// Stacks the listed rows of a matrix (repeats allowed).
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var, NumError> {
        let av = self.value(a);
        let (m, n) = av.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: r,
                    bound: m,
                });
            }
            data.extend_from_slice(av.row(r));
        }
        Ok(self.push(
            Tensor::new(&[rows.len(), n], data)?,
            Op::GatherRows(a, Rc::new(rows.to_vec())),
            self.rg(a),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, NumError> {
        let first = self.value(*parts.first().ok_or(NumError::Empty("concat_rows"))?);
        let (_, n) = first.dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (m, c) = pv.dims2()?;
            if c != n {
                return Err(shape_err("concat_rows", &first, &pv));
            }
            data.extend_from_slice(pv.data());
            rows += m;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Single entry (flat row-major index) as a scalar.
    pub fn index(&self, a: Var, flat: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        let v = *av.data().get(flat).ok_or(NumError::Index {
            op: "index",
            index: flat,
            bound: av.len(),
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Index(a, flat), self.rg(a)))
    }

    /// Sparse constant propagation `S · x`; `S` carries no gradient.
    pub fn propagate(&self, x: Var, s: Rc<Csr>) -> Result<Var, NumError> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if m != s.n {
            return Err(NumError::Shape {
                op: "propagate",
                lhs: vec![s.n, s.n],
                rhs: xv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in s.row_ptr[i]..s.row_ptr[i + 1] {
                let w = s.vals[p];
                for (o, &v) in out_row.iter_mut().zip(xv.row(s.col_idx[p])) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Propagate(x, s), self.rg(x)))
    }

    /// Column standardization with batch statistics (biased variance).
    ///
    /// Returns the normalized values together with the column means and
    /// biased variances used, so callers can maintain running statistics.
    pub fn standardize_cols(
        &self,
        x: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), NumError> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if m == 0 {
            return Err(NumError::Empty("standardize_cols"));
        }
        let mut mean = vec![0.0; n];
        for i in 0..m {
            mean.iter_mut().zip(xv.row(i)).for_each(|(mu, v)| *mu += v);
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut var = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let d = xv.data()[i * n + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (xv.data()[i * n + j] - mean[j]) * inv_std[j];
            }
        }
        let v = self.push(
            Tensor::new(&[m, n], out)?,
            Op::Standardize(x, Rc::new(inv_std)),
            self.rg(x),
        );
        Ok((v, mean, var))
    }

    /// Gradients of a scalar `loss` with respect to every tracked value.
    /// The tape is left intact.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, NumError> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumError::Rank {
                op: "backward",
                expected: 0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let corrupt = fault::adjoint_corrupted();

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let len = |v: Var| nodes[v.0].value.len();
            match &node.op {
                Op::Leaf(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    if needs(*a) {
                        let ga = accumulate(&mut grads[a.0], m * k);
                        let factor = if corrupt { 1.5 } else { 1.0 };
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &bv.data()[p * n..(p + 1) * n];
                                let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                                ga[i * k + p] += factor * dot;
                            }
                        }
                    }
                    if needs(*b) {
                        let gb = accumulate(&mut grads[b.0], k * n);
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = av.data()[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                let gb_row = &mut gb[p * n..(p + 1) * n];
                                for (o, &x) in gb_row.iter_mut().zip(g_row) {
                                    *o += a_ip * x;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    if needs(*a) {
                        let ga = accumulate(&mut grads[a.0], g.len());
                        ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    }
                    if needs(*b) {
                        let gb = accumulate(&mut grads[b.0], g.len());
                        gb.iter_mut().zip(&g).for_each(|(o, x)| *o += sign * x);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        let ga = accumulate(&mut grads[a.0], g.len());
                        for ((o, x), y) in ga.iter_mut().zip(&g).zip(bv.data()) {
                            *o += x * y;
                        }
                    }
                    if needs(*b) {
                        let gb = accumulate(&mut grads[b.0], g.len());
                        for ((o, x), y) in gb.iter_mut().zip(&g).zip(av.data()) {
                            *o += x * y;
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let n = val(*r).len();
                    if needs(*a) {
                        let ga = accumulate(&mut grads[a.0], g.len());
                        ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    }
                    if needs(*r) {
                        let gr = accumulate(&mut grads[r.0], n);
                        for chunk in g.chunks(n) {
                            gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (val(*a), val(*r));
                    let n = rv.len();
                    if needs(*a) {
                        let ga = accumulate(&mut grads[a.0], g.len());
                        for (i, (o, x)) in ga.iter_mut().zip(&g).enumerate() {
                            *o += x * rv.data()[i % n];
                        }
                    }
                    if needs(*r) {
                        let gr = accumulate(&mut grads[r.0], n);
                        for (i, (x, y)) in g.iter().zip(av.data()).enumerate() {
                            gr[i % n] += x * y;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(&g).for_each(|(o, x)| *o += s * x);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                }
                Op::AddN(parts) => {
                    for p in parts {
                        if needs(*p) {
                            let gp = accumulate(&mut grads[p.0], g.len());
                            gp.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = val(*a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), &inp) in ga.iter_mut().zip(&g).zip(av.data()) {
                        if inp > 0.0 {
                            *o += x;
                        }
                    }
                }
                Op::Selu(a) => {
                    let av = val(*a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), &inp) in ga.iter_mut().zip(&g).zip(av.data()) {
                        let d = if inp > 0.0 {
                            SELU_LAMBDA
                        } else if inp < 0.0 {
                            SELU_LAMBDA * SELU_ALPHA * inp.exp()
                        } else {
                            0.0
                        };
                        *o += x * d;
                    }
                }
                Op::Log(a) => {
                    let av = val(*a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), &inp) in ga.iter_mut().zip(&g).zip(av.data()) {
                        *o += x / inp;
                    }
                }
                Op::Sqrt(a) => {
                    let out = &node.value;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), &y) in ga.iter_mut().zip(&g).zip(out.data()) {
                        if y > 0.0 {
                            *o += x / (2.0 * y);
                        }
                    }
                }
                Op::ClampMin(a, floor) => {
                    let av = val(*a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), &inp) in ga.iter_mut().zip(&g).zip(av.data()) {
                        if inp > *floor {
                            *o += x;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (i, (g_row, y_row)) in g.chunks(n).zip(y.data().chunks(n)).enumerate() {
                        let dot: f64 = g_row.iter().zip(y_row).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[i * n + j] += y_row[j] * (g_row[j] - dot);
                        }
                    }
                }
                Op::Sum(a) => {
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
                Op::Mean(a) => {
                    let n = len(*a);
                    let ga = accumulate(&mut grads[a.0], n);
                    ga.iter_mut().for_each(|o| *o += g[0] / n as f64);
                }
                Op::SumRows(a) | Op::MeanRows(a) => {
                    let av = val(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let w = if matches!(node.op, Op::MeanRows(_)) {
                        1.0 / m as f64
                    } else {
                        1.0
                    };
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for row in ga.chunks_mut(n) {
                        row.iter_mut().zip(&g).for_each(|(o, x)| *o += w * x);
                    }
                }
                Op::L2Norm(a) => {
                    let av = val(*a);
                    let norm = node.value.item();
                    let ga = accumulate(&mut grads[a.0], av.len());
                    if norm > 0.0 {
                        for (o, x) in ga.iter_mut().zip(av.data()) {
                            *o += g[0] * x / norm;
                        }
                    }
                }
                Op::RowL2Norms(a) => {
                    let av = val(*a);
                    let n = av.cols();
                    let norms = node.value.data();
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for (i, &norm) in norms.iter().enumerate() {
                        if norm > 0.0 {
                            for j in 0..n {
                                ga[i * n + j] += g[i] * av.data()[i * n + j] / norm;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let ga = accumulate(&mut grads[a.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let n = node.value.cols();
                    let total = len(*a);
                    let ga = accumulate(&mut grads[a.0], total);
                    for (o, x) in ga[start * n..].iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let n = node.value.cols();
                    let total = len(*a);
                    let ga = accumulate(&mut grads[a.0], total);
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[k * n + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let l = len(*p);
                        if needs(*p) {
                            let gp = accumulate(&mut grads[p.0], l);
                            gp.iter_mut()
                                .zip(&g[offset..offset + l])
                                .for_each(|(o, x)| *o += x);
                        }
                        offset += l;
                    }
                }
                Op::Index(a, flat) => {
                    let total = len(*a);
                    let ga = accumulate(&mut grads[a.0], total);
                    ga[*flat] += g[0];
                }
                Op::Propagate(x, s) => {
                    let n = node.value.cols();
                    let total = len(*x);
                    let gx = accumulate(&mut grads[x.0], total);
                    for i in 0..s.n {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in s.row_ptr[i]..s.row_ptr[i + 1] {
                            let w = s.vals[p];
                            let c = s.col_idx[p];
                            for (o, &v) in gx[c * n..(c + 1) * n].iter_mut().zip(g_row) {
                                *o += w * v;
                            }
                        }
                    }
                }
                Op::Standardize(x, inv_std) => {
                    let xhat = &node.value;
                    let (m, n) = (xhat.rows(), xhat.cols());
                    let mut sum_g = vec![0.0; n];
                    let mut sum_gx = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            sum_g[j] += g[i * n + j];
                            sum_gx[j] += g[i * n + j] * xhat.data()[i * n + j];
                        }
                    }
                    let gx = accumulate(&mut grads[x.0], m * n);
                    let mf = m as f64;
                    for i in 0..m {
                        for j in 0..n {
                            let k = i * n + j;
                            gx[k] += inv_std[j] / mf
                                * (mf * g[k] - sum_g[j] - xhat.data()[k] * sum_gx[j]);
                        }
                    }
                }
            }
        }

        let mut by_param: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for (idx, node) in nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Leaf(Some(pid)), Some(g)) = (&node.op, grads[idx].as_ref()) {
                match by_param.get_mut(pid) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(o, x)| *o += x),
                    None => {
                        by_param.insert(*pid, g.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }

    /// Reverse sweep from `loss`, accumulating into the `grad` buffer of
    /// every parameter leaf, then clears the tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients, NumError> {
        let grads = self.gradients(loss)?;
        for (pid, g) in grads.params() {
            let t = store.get_mut(pid);
            match t.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(o, x)| *o += x),
                None => t.grad = Some(g.to_vec()),
            }
        }
        self.clear();
        Ok(grads)
    }
}
