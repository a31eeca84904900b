//! Define-by-run tape of dense matrix operations.
//!
//! Every primitive computes its forward value eagerly, checks it for
//! NaN/Inf, and records enough structure for a vector-Jacobian product in
//! [`Tape::gradients`] and a Jacobian-vector product in [`jvp`].

use std::sync::atomic::{AtomicU32, Ordering};

use super::{DiffError, ParamId, ParamStore, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift { x: Var, scale: f64 },
    Tanh(Var),
    Exp(Var),
    Square(Var),
    AbsPow(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    Select(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so inputs always precede the
/// ops that consume them and a single reverse sweep visits each op once.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; `None` when the root
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<(), DiffError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<(), DiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            Err(DiffError::ForeignVar)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var, DiffError> {
        ensure_finite(name, &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: f64) -> Result<Var, DiffError> {
        self.leaf(Tensor::filled(rows, cols, value))
    }

    /// Records a parameter; its adjoint is written back by [`backward`](Self::backward).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, DiffError> {
        self.push("param", store.value(id).clone(), Op::Param(id))
    }

    /// Binds every parameter of `store`, indexed by [`ParamId::index`].
    pub fn bind_all(&mut self, store: &ParamStore) -> Result<Vec<Var>, DiffError> {
        store.ids().map(|id| self.param(store, id)).collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<(), DiffError> {
        self.check(a)?;
        self.check(row)?;
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sr,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let av = self.value(a);
        let mut out = av.clone();
        let c = av.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % c];
        }
        self.push("add_row", out, Op::AddRow(a, row))
    }

    /// `a * row` entry-wise, broadcasting a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let av = self.value(a);
        let mut out = av.clone();
        let c = av.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % c];
        }
        self.push("mul_row", out, Op::MulRow(a, row))
    }

    /// `x W + b` with a row-vector bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        self.check(x)?;
        let v = self.value(x).map(|a| scale * a + shift);
        self.push("scale_shift", v, Op::ScaleShift { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var, DiffError> {
        self.scale_shift(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, DiffError> {
        self.scale_shift(x, -1.0, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let v = self.value(x).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let v = self.value(x).map(f64::exp);
        self.push("exp", v, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let v = self.value(x).map(|a| a * a);
        self.push("square", v, Op::Square(x))
    }

    /// `|x|^p` for `p >= 1`.
    pub fn abs_pow(&mut self, x: Var, p: f64) -> Result<Var, DiffError> {
        self.check(x)?;
        if p == 2.0 {
            return self.square(x);
        }
        if !(p >= 1.0 && p.is_finite()) {
            return Err(DiffError::InvalidArgument("abs_pow exponent must be >= 1"));
        }
        let v = self.value(x).map(|a| a.abs().powf(p));
        self.push("abs_pow", v, Op::AbsPow(x, p))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let t = self.value(x);
        if t.is_empty() {
            return Err(DiffError::InvalidArgument("mean of an empty tensor"));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Per-row sum, `N x c -> N x 1`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let v = Tensor::new(t.rows(), 1, data)?;
        self.push("row_sum", v, Op::RowSum(x))
    }

    /// Concatenates along the feature (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts
            .first()
            .ok_or(DiffError::InvalidArgument("concat of zero tensors"))?;
        self.check(first)?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            self.check(p)?;
            let s = self.shape(p);
            if s.0 != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new(rows, cols, data)?;
        self.push("concat", v, Op::Concat(parts.to_vec()))
    }

    /// Picks columns `idx` (in that order); covers both splitting and
    /// permuting along the feature axis.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        self.check(x)?;
        let t = self.value(x);
        if idx.iter().any(|&i| i >= t.cols()) {
            return Err(DiffError::IndexOutOfRange { op: "select" });
        }
        let mut data = Vec::with_capacity(t.rows() * idx.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let v = Tensor::new(t.rows(), idx.len(), data)?;
        self.push("select", v, Op::Select(x, idx.to_vec()))
    }

    /// Flat gather: output entry `k` is `x.data()[idx[k]]`, shaped
    /// `rows x cols`.
    pub fn gather(
        &mut self,
        x: Var,
        idx: Vec<usize>,
        rows: usize,
        cols: usize,
    ) -> Result<Var, DiffError> {
        self.check(x)?;
        if idx.len() != rows * cols {
            return Err(DiffError::BadLength {
                rows,
                cols,
                len: idx.len(),
            });
        }
        let src = self.value(x).data();
        if idx.iter().any(|&i| i >= src.len()) {
            return Err(DiffError::IndexOutOfRange { op: "gather" });
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(rows, cols, data)?;
        self.push("gather", v, Op::Gather(x, idx))
    }

    /// Reverse sweep from a scalar root.
    pub fn gradients(&self, root: Var) -> Result<Gradients, DiffError> {
        self.check(root)?;
        if self.shape(root) != (1, 1) {
            return Err(DiffError::NotScalar(self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.index + 1];
        grads[root.index] = Some(Tensor::scalar(1.0));

        for i in (0..=root.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul_unchecked(&bv.transpose());
                    let gb = av.transpose().matmul_unchecked(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, *r, g.column_sums());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let rv = self.value(*r).data();
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut ga = g.clone();
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= rv[k % c];
                    }
                    let gr = g.zip_map(av, |x, y| x * y).column_sums();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *r, gr);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScaleShift { x, scale } => {
                    let s = *scale;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |v, y| v * (1.0 - y * y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&node.value, |v, y| v * y);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let gx = g.zip_map(self.value(*x), |v, a| 2.0 * a * v);
                    accumulate(&mut grads, *x, gx);
                }
                Op::AbsPow(x, p) => {
                    let p = *p;
                    let gx = g.zip_map(self.value(*x), |v, a| {
                        if a == 0.0 {
                            0.0
                        } else {
                            v * p * a.abs().powf(p - 1.0) * a.signum()
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads, *x, Tensor::filled(r, c, g.data()[0]));
                }
                Op::Mean(x) => {
                    let (r, c) = self.shape(*x);
                    let v = g.data()[0] / (r * c) as f64;
                    accumulate(&mut grads, *x, Tensor::filled(r, c, v));
                }
                Op::RowSum(x) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(r, c);
                    for row in 0..r {
                        let gv = g.data()[row];
                        gx.data_mut()[row * c..(row + 1) * c].fill(gv);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        let mut gp = Tensor::zeros(rows, pc);
                        for r in 0..rows {
                            gp.data_mut()[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Select(x, idx) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(r, c);
                    let k = idx.len();
                    for row in 0..r {
                        for (j, &i) in idx.iter().enumerate() {
                            gx.data_mut()[row * c + i] += g.data()[row * k + j];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather(x, idx) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        gx.data_mut()[i] += g.data()[k];
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// Reverse sweep that overwrites every gradient slot of `store` with
    /// `d root / d param`. Parameters the root does not depend on get zero.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<(), DiffError> {
        let grads = self.gradients(root)?;
        store.zero_grads();
        for (i, node) in self.nodes.iter().enumerate().take(root.index + 1) {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    store.grad_mut(id).add_assign(g);
                }
            }
        }
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(DiffError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Forward-mode directional derivative recorded on the tape.
///
/// Runs `f` on `x`, then emits tape ops computing `J_f(x) v` by
/// propagating tangents through every op `f` recorded. The tangent is an
/// ordinary tape value, so reverse mode can differentiate through it.
/// `f` must build its output from `x`, parameters and constants only.
pub fn jvp<F>(tape: &mut Tape, x: Var, v: Var, f: F) -> Result<(Var, Var), DiffError>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var, DiffError>,
{
    tape.check(x)?;
    tape.check(v)?;
    if tape.shape(x) != tape.shape(v) {
        return Err(DiffError::ShapeMismatch {
            op: "jvp",
            lhs: tape.shape(x),
            rhs: tape.shape(v),
        });
    }
    let start = tape.len();
    let y = f(tape, x)?;
    tape.check(y)?;
    if y == x {
        return Ok((y, v));
    }
    if y.index < start {
        let (r, c) = tape.shape(y);
        let z = tape.constant(r, c, 0.0)?;
        return Ok((y, z));
    }
    let end = y.index + 1;
    let mut tangents: Vec<Option<Var>> = vec![None; end - start];
    let tangent_of = |tangents: &[Option<Var>], u: Var| -> Option<Var> {
        if u == x {
            Some(v)
        } else if u.index >= start && u.index < end {
            tangents[u.index - start]
        } else {
            None
        }
    };

    for i in start..end {
        let op = tape.nodes[i].op.clone();
        let out = Var {
            tape: tape.id,
            index: i,
        };
        let t = match op {
            Op::Leaf | Op::Param(_) => None,
            Op::MatMul(a, b) => {
                let ta = tangent_of(&tangents, a);
                let tb = tangent_of(&tangents, b);
                let p = ta.map(|ta| tape.matmul(ta, b)).transpose()?;
                let q = tb.map(|tb| tape.matmul(a, tb)).transpose()?;
                sum_opt(tape, p, q)?
            }
            Op::AddRow(a, r) => {
                let ta = tangent_of(&tangents, a);
                let tr = tangent_of(&tangents, r);
                match (ta, tr) {
                    (ta, Some(tr)) => {
                        let base = match ta {
                            Some(ta) => ta,
                            None => {
                                let (rr, cc) = tape.shape(a);
                                tape.constant(rr, cc, 0.0)?
                            }
                        };
                        Some(tape.add_row(base, tr)?)
                    }
                    (ta, None) => ta,
                }
            }
            Op::MulRow(a, r) => {
                let ta = tangent_of(&tangents, a);
                let tr = tangent_of(&tangents, r);
                let p = ta.map(|ta| tape.mul_row(ta, r)).transpose()?;
                let q = tr.map(|tr| tape.mul_row(a, tr)).transpose()?;
                sum_opt(tape, p, q)?
            }
            Op::Add(a, b) => {
                let ta = tangent_of(&tangents, a);
                let tb = tangent_of(&tangents, b);
                sum_opt(tape, ta, tb)?
            }
            Op::Sub(a, b) => {
                let ta = tangent_of(&tangents, a);
                let tb = tangent_of(&tangents, b);
                match (ta, tb) {
                    (Some(ta), Some(tb)) => Some(tape.sub(ta, tb)?),
                    (Some(ta), None) => Some(ta),
                    (None, Some(tb)) => Some(tape.neg(tb)?),
                    (None, None) => None,
                }
            }
            Op::Mul(a, b) => {
                let ta = tangent_of(&tangents, a);
                let tb = tangent_of(&tangents, b);
                let p = ta.map(|ta| tape.mul(ta, b)).transpose()?;
                let q = tb.map(|tb| tape.mul(a, tb)).transpose()?;
                sum_opt(tape, p, q)?
            }
            Op::ScaleShift { x: a, scale } => tangent_of(&tangents, a)
                .map(|t| tape.scale(t, scale))
                .transpose()?,
            Op::Tanh(a) => match tangent_of(&tangents, a) {
                Some(t) => {
                    let y2 = tape.square(out)?;
                    let d = tape.scale_shift(y2, -1.0, 1.0)?;
                    Some(tape.mul(t, d)?)
                }
                None => None,
            },
            Op::Exp(a) => tangent_of(&tangents, a)
                .map(|t| tape.mul(t, out))
                .transpose()?,
            Op::Square(a) => match tangent_of(&tangents, a) {
                Some(t) => {
                    let two_a = tape.scale(a, 2.0)?;
                    Some(tape.mul(two_a, t)?)
                }
                None => None,
            },
            Op::AbsPow(a, _) => match tangent_of(&tangents, a) {
                Some(_) => return Err(DiffError::Unsupported("jvp through abs_pow")),
                None => None,
            },
            Op::Sum(a) => tangent_of(&tangents, a)
                .map(|t| tape.sum(t))
                .transpose()?,
            Op::Mean(a) => tangent_of(&tangents, a)
                .map(|t| tape.mean(t))
                .transpose()?,
            Op::RowSum(a) => tangent_of(&tangents, a)
                .map(|t| tape.row_sum(t))
                .transpose()?,
            Op::Concat(parts) => {
                let ts: Vec<Option<Var>> =
                    parts.iter().map(|&p| tangent_of(&tangents, p)).collect();
                if ts.iter().all(Option::is_none) {
                    None
                } else {
                    let mut filled = Vec::with_capacity(parts.len());
                    for (&p, t) in parts.iter().zip(ts) {
                        filled.push(match t {
                            Some(t) => t,
                            None => {
                                let (r, c) = tape.shape(p);
                                tape.constant(r, c, 0.0)?
                            }
                        });
                    }
                    Some(tape.concat(&filled)?)
                }
            }
            Op::Select(a, idx) => tangent_of(&tangents, a)
                .map(|t| tape.select(t, &idx))
                .transpose()?,
            Op::Gather(a, idx) => {
                let (r, c) = tape.shape(out);
                tangent_of(&tangents, a)
                    .map(|t| tape.gather(t, idx, r, c))
                    .transpose()?
            }
        };
        tangents[i - start] = t;
    }

    let ty = match tangents[y.index - start] {
        Some(t) => t,
        None => {
            let (r, c) = tape.shape(y);
            tape.constant(r, c, 0.0)?
        }
    };
    Ok((y, ty))
}

fn sum_opt(tape: &mut Tape, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>, DiffError> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, None) => a,
        (None, b) => b,
    })
}
