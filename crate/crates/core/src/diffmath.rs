//! Reverse-mode automatic differentiation on a flat arena tape.
//!
//! A [`Tape`] is a Wengert list: every operation appends one node and writes
//! its primal value into a shared column-major `f64` arena. Node ids therefore
//! form a topological order by construction, and [`Tape::backward`] is a single
//! reverse sweep that visits ids in strictly decreasing order, accumulating
//! adjoints into a second arena that mirrors the primal layout.
//!
//! Values are matrices of shape `(rows, cols)` stored column-major; scalars
//! are `(1, 1)`. Columns are the batch axis throughout this crate (one column
//! per particle), so column-structured ops (`col`, `gather_cols`, `hstack`,
//! `add_cols`, `mul_cols`) touch contiguous memory.
//!
//! Graphs are define-by-run: a tape is built per evaluation and dropped. All
//! arithmetic is `f64`; evaluation order is fixed, so results are
//! bit-deterministic for a fixed input sequence.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a tape node. Cheap to copy; only valid for the tape it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: u32,
    rows: u32,
    cols: u32,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows as usize
    }

    pub fn cols(&self) -> usize {
        self.cols as usize
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Extension point for fused operations whose forward and adjoint rules live
/// outside this module. Implementations must be pure functions of their
/// inputs; `backward_input` adds (never overwrites) the contribution for one
/// input slot so repeated inputs accumulate correctly.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Output shape given input shapes. Called once at node creation.
    fn out_shape(&self, inputs: &[(usize, usize)]) -> Result<(usize, usize)>;

    fn forward(&self, inputs: &[&[f64]], out: &mut [f64]) -> Result<()>;

    /// Accumulate `d out / d inputs[which]`ᵀ · `grad_out` into `grad_in`.
    fn backward_input(
        &self,
        which: usize,
        inputs: &[&[f64]],
        primal: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
    );
}

enum Op {
    Leaf,
    StopGradient,
    Neg(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    MatVec(u32, u32),
    MatMul(u32, u32),
    Tanh(u32),
    Relu(u32),
    Exp(u32),
    Log(u32),
    Square(u32),
    Sum(u32),
    Dot(u32, u32),
    ScalarMul(u32, f64),
    ScalarAdd(u32),
    MulScalarNode(u32, u32),
    AddScalarNode(u32, u32),
    AddCols(u32, u32),
    MulCols(u32, u32),
    Index(u32, usize),
    ColOf(u32, usize),
    StackScalars(Box<[u32]>),
    HStack(Box<[u32]>),
    GatherCols(u32, Box<[usize]>),
    RepeatCols(u32),
    SliceRows(u32, usize),
    SymFromTriu(u32),
    DiagFromVec(u32),
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Box<[u32]>,
    },
}

struct Node {
    op: Op,
    off: usize,
    rows: u32,
    cols: u32,
}

impl Node {
    fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }
}

/// Adjoints from one backward sweep, indexed by the originating [`Var`].
pub struct Gradients {
    grads: Vec<f64>,
    offs: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`. Zero-filled for nodes the
    /// root does not depend on.
    pub fn wrt(&self, v: Var) -> &[f64] {
        let (off, len) = self.offs[v.id as usize];
        &self.grads[off..off + len]
    }

    pub fn scalar_wrt(&self, v: Var) -> f64 {
        self.wrt(v)[0]
    }
}

/// Arena-backed reverse-mode tape. See the module docs for the layout.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Primal value of `v`, column-major.
    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.id as usize];
        &self.vals[n.off..n.off + n.len()]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> Var {
        debug_assert!(rows > 0 && cols > 0);
        let off = self.vals.len();
        self.vals.resize(off + rows * cols, 0.0);
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            off,
            rows: rows as u32,
            cols: cols as u32,
        });
        Var {
            id,
            rows: rows as u32,
            cols: cols as u32,
        }
    }

    /// Split the arena so the freshly pushed node's region is writable while
    /// earlier regions stay readable. Inputs always precede outputs because
    /// ids are topologically ordered.
    fn out_and_head(&mut self, v: Var) -> (&mut [f64], &[f64]) {
        let n = &self.nodes[v.id as usize];
        let (off, len) = (n.off, n.len());
        let (head, tail) = self.vals.split_at_mut(off);
        (&mut tail[..len], head)
    }

    fn region(&self, id: u32) -> (usize, usize) {
        let n = &self.nodes[id as usize];
        (n.off, n.len())
    }

    fn same_shape(op: &'static str, a: Var, b: Var) -> Result<()> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(())
    }

    fn require_scalar(op: &'static str, v: Var) -> Result<()> {
        if !v.is_scalar() {
            return Err(Error::BadShape {
                op,
                expected: "a scalar",
                got: v.shape(),
            });
        }
        Ok(())
    }

    fn require_col(op: &'static str, v: Var) -> Result<()> {
        if v.cols != 1 {
            return Err(Error::BadShape {
                op,
                expected: "a single-column vector",
                got: v.shape(),
            });
        }
        Ok(())
    }

    /// New differentiable input holding `values` (column-major).
    pub fn leaf(&mut self, rows: usize, cols: usize, values: &[f64]) -> Result<Var> {
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument {
                what: "leaf",
                why: format!(
                    "got {} values for shape ({rows}, {cols})",
                    values.len()
                ),
            });
        }
        let v = self.push(Op::Leaf, rows, cols);
        let (out, _) = self.out_and_head(v);
        out.copy_from_slice(values);
        Ok(v)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(1, 1, &[value]).expect("scalar leaf is well formed")
    }

    /// Identity in value; blocks gradient flow in the backward sweep.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.push(Op::StopGradient, a.rows(), a.cols());
        let (aoff, alen) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        out.copy_from_slice(&head[aoff..aoff + alen]);
        v
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let v = self.push(op, a.rows(), a.cols());
        let (aoff, alen) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        for (o, x) in out.iter_mut().zip(&head[aoff..aoff + alen]) {
            *o = f(*x);
        }
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        Self::same_shape(name, a, b)?;
        let v = self.push(op, a.rows(), a.cols());
        let (aoff, _) = self.region(a.id);
        let (boff, _) = self.region(b.id);
        let (out, head) = self.out_and_head(v);
        for i in 0..out.len() {
            out[i] = f(head[aoff + i], head[boff + i]);
        }
        Ok(v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg(a.id), a, |x| -x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Op::Add(a.id, b.id), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Op::Sub(a.id, b.id), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Op::Mul(a.id, b.id), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", Op::Div(a.id, b.id), a, b, |x, y| x / y)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a.id), a, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a.id), a, |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a.id), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a.id), a, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a.id), a, |x| x * x)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::ScalarMul(a.id, c), a, |x| c * x)
    }

    pub fn scalar_add(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::ScalarAdd(a.id), a, |x| c + x)
    }

    /// `a * s` where `s` is a scalar node.
    pub fn mul_scalar_node(&mut self, a: Var, s: Var) -> Result<Var> {
        Self::require_scalar("mul_scalar_node", s)?;
        let c = self.scalar_value(s);
        Ok(self.unary(Op::MulScalarNode(a.id, s.id), a, |x| c * x))
    }

    /// `a + s` broadcast over all entries, where `s` is a scalar node.
    pub fn add_scalar_node(&mut self, a: Var, s: Var) -> Result<Var> {
        Self::require_scalar("add_scalar_node", s)?;
        let c = self.scalar_value(s);
        Ok(self.unary(Op::AddScalarNode(a.id, s.id), a, |x| c + x))
    }

    /// Matrix `(m, n)` times column vector `(n, 1)`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        if x.cols != 1 || a.cols != x.rows {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: a.shape(),
                rhs: x.shape(),
            });
        }
        let (m, n) = a.shape();
        let v = self.push(Op::MatVec(a.id, x.id), m, 1);
        let (aoff, _) = self.region(a.id);
        let (xoff, _) = self.region(x.id);
        let (out, head) = self.out_and_head(v);
        let av = &head[aoff..aoff + m * n];
        let xv = &head[xoff..xoff + n];
        for j in 0..n {
            let xj = xv[j];
            let col = &av[j * m..(j + 1) * m];
            for r in 0..m {
                out[r] += col[r] * xj;
            }
        }
        Ok(v)
    }

    /// Matrix product `(m, k) x (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (m, k) = a.shape();
        let n = b.cols();
        let v = self.push(Op::MatMul(a.id, b.id), m, n);
        let (aoff, _) = self.region(a.id);
        let (boff, _) = self.region(b.id);
        let (out, head) = self.out_and_head(v);
        let av = &head[aoff..aoff + m * k];
        let bv = &head[boff..boff + k * n];
        matmul_into(av, bv, m, k, n, out, false, false);
        Ok(v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.push(Op::Sum(a.id), 1, 1);
        let (aoff, alen) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        out[0] = head[aoff..aoff + alen].iter().sum();
        v
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape("dot", a, b)?;
        let v = self.push(Op::Dot(a.id, b.id), 1, 1);
        let (aoff, alen) = self.region(a.id);
        let (boff, _) = self.region(b.id);
        let (out, head) = self.out_and_head(v);
        out[0] = head[aoff..aoff + alen]
            .iter()
            .zip(&head[boff..boff + alen])
            .map(|(x, y)| x * y)
            .sum();
        Ok(v)
    }

    /// `mat + col` with the `(r, 1)` column broadcast across all columns.
    pub fn add_cols(&mut self, mat: Var, col: Var) -> Result<Var> {
        Self::require_col("add_cols", col)?;
        if mat.rows != col.rows {
            return Err(Error::ShapeMismatch {
                op: "add_cols",
                lhs: mat.shape(),
                rhs: col.shape(),
            });
        }
        let (r, c) = mat.shape();
        let v = self.push(Op::AddCols(mat.id, col.id), r, c);
        let (moff, _) = self.region(mat.id);
        let (coff, _) = self.region(col.id);
        let (out, head) = self.out_and_head(v);
        let mv = &head[moff..moff + r * c];
        let cv = &head[coff..coff + r];
        for j in 0..c {
            for i in 0..r {
                out[j * r + i] = mv[j * r + i] + cv[i];
            }
        }
        Ok(v)
    }

    /// `mat * col` elementwise with the `(r, 1)` column broadcast.
    pub fn mul_cols(&mut self, mat: Var, col: Var) -> Result<Var> {
        Self::require_col("mul_cols", col)?;
        if mat.rows != col.rows {
            return Err(Error::ShapeMismatch {
                op: "mul_cols",
                lhs: mat.shape(),
                rhs: col.shape(),
            });
        }
        let (r, c) = mat.shape();
        let v = self.push(Op::MulCols(mat.id, col.id), r, c);
        let (moff, _) = self.region(mat.id);
        let (coff, _) = self.region(col.id);
        let (out, head) = self.out_and_head(v);
        let mv = &head[moff..moff + r * c];
        let cv = &head[coff..coff + r];
        for j in 0..c {
            for i in 0..r {
                out[j * r + i] = mv[j * r + i] * cv[i];
            }
        }
        Ok(v)
    }

    /// Scalar at flat (column-major) position `i`.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        if i >= a.len() {
            return Err(Error::InvalidArgument {
                what: "index",
                why: format!("position {i} out of bounds for shape {:?}", a.shape()),
            });
        }
        let v = self.push(Op::Index(a.id, i), 1, 1);
        let (aoff, _) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        out[0] = head[aoff + i];
        Ok(v)
    }

    /// Column `c` of a matrix as a `(rows, 1)` vector.
    pub fn col(&mut self, a: Var, c: usize) -> Result<Var> {
        if c >= a.cols() {
            return Err(Error::InvalidArgument {
                what: "col",
                why: format!("column {c} out of bounds for shape {:?}", a.shape()),
            });
        }
        let r = a.rows();
        let v = self.push(Op::ColOf(a.id, c), r, 1);
        let (aoff, _) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        out.copy_from_slice(&head[aoff + c * r..aoff + (c + 1) * r]);
        Ok(v)
    }

    /// Stack scalar nodes into an `(n, 1)` vector.
    pub fn stack_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument {
                what: "stack_scalars",
                why: "empty input".into(),
            });
        }
        for x in xs {
            Self::require_scalar("stack_scalars", *x)?;
        }
        let ids: Box<[u32]> = xs.iter().map(|x| x.id).collect();
        let offs: Vec<usize> = xs.iter().map(|x| self.region(x.id).0).collect();
        let v = self.push(Op::StackScalars(ids), xs.len(), 1);
        let (out, head) = self.out_and_head(v);
        for (o, off) in out.iter_mut().zip(offs) {
            *o = head[off];
        }
        Ok(v)
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn hstack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument {
                what: "hstack",
                why: "empty input".into(),
            });
        }
        let r = xs[0].rows();
        let mut total = 0;
        for x in xs {
            if x.rows() != r {
                return Err(Error::ShapeMismatch {
                    op: "hstack",
                    lhs: xs[0].shape(),
                    rhs: x.shape(),
                });
            }
            total += x.cols();
        }
        let ids: Box<[u32]> = xs.iter().map(|x| x.id).collect();
        let regions: Vec<(usize, usize)> = xs.iter().map(|x| self.region(x.id)).collect();
        let v = self.push(Op::HStack(ids), r, total);
        let (out, head) = self.out_and_head(v);
        let mut at = 0;
        for (off, len) in regions {
            out[at..at + len].copy_from_slice(&head[off..off + len]);
            at += len;
        }
        Ok(v)
    }

    /// Select columns (with repetition allowed) into a new matrix.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::InvalidArgument {
                what: "gather_cols",
                why: "empty index set".into(),
            });
        }
        for &c in idx {
            if c >= a.cols() {
                return Err(Error::InvalidArgument {
                    what: "gather_cols",
                    why: format!("column {c} out of bounds for shape {:?}", a.shape()),
                });
            }
        }
        let r = a.rows();
        let v = self.push(
            Op::GatherCols(a.id, idx.to_vec().into_boxed_slice()),
            r,
            idx.len(),
        );
        let (aoff, _) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        for (j, &c) in idx.iter().enumerate() {
            out[j * r..(j + 1) * r].copy_from_slice(&head[aoff + c * r..aoff + (c + 1) * r]);
        }
        Ok(v)
    }

    /// Tile a `(r, 1)` column `n` times into `(r, n)`.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        Self::require_col("repeat_cols", a)?;
        if n == 0 {
            return Err(Error::InvalidArgument {
                what: "repeat_cols",
                why: "zero repetitions".into(),
            });
        }
        let r = a.rows();
        let v = self.push(Op::RepeatCols(a.id), r, n);
        let (aoff, _) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        for j in 0..n {
            out[j * r..(j + 1) * r].copy_from_slice(&head[aoff..aoff + r]);
        }
        Ok(v)
    }

    /// Rows `start..start + len` of a single-column vector.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        Self::require_col("slice_rows", a)?;
        if len == 0 || start + len > a.rows() {
            return Err(Error::InvalidArgument {
                what: "slice_rows",
                why: format!(
                    "range {start}..{} out of bounds for {} rows",
                    start + len,
                    a.rows()
                ),
            });
        }
        let v = self.push(Op::SliceRows(a.id, start), len, 1);
        let (aoff, _) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        out.copy_from_slice(&head[aoff + start..aoff + start + len]);
        Ok(v)
    }

    /// Symmetric `(d, d)` matrix from its upper triangle packed row-wise as a
    /// `(d(d+1)/2, 1)` vector.
    pub fn sym_from_triu(&mut self, a: Var, d: usize) -> Result<Var> {
        Self::require_col("sym_from_triu", a)?;
        if a.rows() != d * (d + 1) / 2 {
            return Err(Error::BadShape {
                op: "sym_from_triu",
                expected: "d(d+1)/2 packed entries",
                got: a.shape(),
            });
        }
        let v = self.push(Op::SymFromTriu(a.id), d, d);
        let (aoff, _) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        let av = &head[aoff..];
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                out[j * d + i] = av[k];
                out[i * d + j] = av[k];
                k += 1;
            }
        }
        Ok(v)
    }

    /// Diagonal `(d, d)` matrix from a `(d, 1)` vector.
    pub fn diag_from_vec(&mut self, a: Var) -> Result<Var> {
        Self::require_col("diag_from_vec", a)?;
        let d = a.rows();
        let v = self.push(Op::DiagFromVec(a.id), d, d);
        let (aoff, _) = self.region(a.id);
        let (out, head) = self.out_and_head(v);
        for i in 0..d {
            out[i * d + i] = head[aoff + i];
        }
        Ok(v)
    }

    /// Append a fused operation. The forward pass runs immediately.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let shapes: Vec<(usize, usize)> = inputs.iter().map(|v| v.shape()).collect();
        let (rows, cols) = op.out_shape(&shapes)?;
        let ids: Box<[u32]> = inputs.iter().map(|v| v.id).collect();
        let regions: Vec<(usize, usize)> = inputs.iter().map(|v| self.region(v.id)).collect();
        let v = self.push(Op::Custom { op, inputs: ids }, rows, cols);
        let node = &self.nodes[v.id as usize];
        let (head, tail) = self.vals.split_at_mut(node.off);
        let out = &mut tail[..rows * cols];
        let slices: Vec<&[f64]> = regions.iter().map(|&(o, l)| &head[o..o + l]).collect();
        let op = match &node.op {
            Op::Custom { op, .. } => op,
            _ => unreachable!(),
        };
        op.forward(&slices, out)?;
        Ok(v)
    }

    /// Numerically stable `log Σ exp` of a single-column vector, built from
    /// primitive nodes with the max shift treated as a constant. Errors when
    /// every entry is `-inf` (or any entry is NaN) instead of producing NaN.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        Self::require_col("logsumexp", a)?;
        let mut m = f64::NEG_INFINITY;
        let mut has_nan = false;
        for &x in self.value(a) {
            has_nan |= x.is_nan();
            m = m.max(x);
        }
        if has_nan || !m.is_finite() {
            return Err(Error::Numerical {
                what: "logsumexp",
                why: if has_nan {
                    "input contains NaN".into()
                } else if m == f64::NEG_INFINITY {
                    "all inputs are -inf".into()
                } else {
                    "input contains +inf".into()
                },
            });
        }
        let shifted = self.scalar_add(a, -m);
        let e = self.exp(shifted);
        let s = self.sum(e);
        let l = self.log(s);
        Ok(self.scalar_add(l, m))
    }

    /// Reverse sweep from a scalar root. Leaves unreachable from the root get
    /// zero gradients. The tape is untouched; repeated sweeps are independent.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        Self::require_scalar("backward", root)?;
        let mut grads = vec![0.0; self.vals.len()];
        let offs: Vec<(usize, usize)> = self.nodes.iter().map(|n| (n.off, n.len())).collect();
        grads[offs[root.id as usize].0] = 1.0;

        for id in (0..=root.id as usize).rev() {
            let node = &self.nodes[id];
            let (off, len) = (node.off, node.len());
            let (rows, cols) = (node.rows as usize, node.cols as usize);
            // The output adjoint region starts at `off`; every input region
            // lies strictly before it, so one split covers both sides.
            macro_rules! split {
                () => {{
                    let (ins, outs) = grads.split_at_mut(off);
                    (ins, &outs[..len])
                }};
            }
            let val_in = |vid: u32| {
                let (o, l) = offs[vid as usize];
                &self.vals[o..o + l]
            };
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::Neg(a) => {
                    let (ins, g) = split!();
                    let (ao, _) = offs[*a as usize];
                    for i in 0..len {
                        ins[ao + i] -= g[i];
                    }
                }
                Op::Add(a, b) => {
                    let (ao, _) = offs[*a as usize];
                    let (bo, _) = offs[*b as usize];
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i];
                    }
                    for i in 0..len {
                        ins[bo + i] += g[i];
                    }
                }
                Op::Sub(a, b) => {
                    let (ao, _) = offs[*a as usize];
                    let (bo, _) = offs[*b as usize];
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i];
                    }
                    for i in 0..len {
                        ins[bo + i] -= g[i];
                    }
                }
                Op::Mul(a, b) => {
                    let (ao, _) = offs[*a as usize];
                    let (bo, _) = offs[*b as usize];
                    let av = val_in(*a);
                    let bv = val_in(*b);
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i] * bv[i];
                    }
                    for i in 0..len {
                        ins[bo + i] += g[i] * av[i];
                    }
                }
                Op::Div(a, b) => {
                    let (ao, _) = offs[*a as usize];
                    let (bo, _) = offs[*b as usize];
                    let av = val_in(*a);
                    let bv = val_in(*b);
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i] / bv[i];
                    }
                    for i in 0..len {
                        ins[bo + i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
                Op::MatVec(a, x) => {
                    let (ao, _) = offs[*a as usize];
                    let (xo, _) = offs[*x as usize];
                    let av = val_in(*a);
                    let xv = val_in(*x);
                    let m = rows;
                    let n = xv.len();
                    let (ins, g) = split!();
                    for j in 0..n {
                        let xj = xv[j];
                        for r in 0..m {
                            ins[ao + j * m + r] += g[r] * xj;
                        }
                    }
                    for j in 0..n {
                        let mut acc = 0.0;
                        for r in 0..m {
                            acc += av[j * m + r] * g[r];
                        }
                        ins[xo + j] += acc;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ao, _) = offs[*a as usize];
                    let (bo, _) = offs[*b as usize];
                    let av = val_in(*a);
                    let bv = val_in(*b);
                    let m = rows;
                    let n = cols;
                    let k = av.len() / m;
                    let (ins, g) = split!();
                    // A += G Bᵀ, B += Aᵀ G.
                    matmul_into(g, bv, m, n, k, &mut ins[ao..ao + m * k], false, true);
                    matmul_into(av, g, m, k, n, &mut ins[bo..bo + k * n], true, false);
                }
                Op::Tanh(a) => {
                    let (ao, _) = offs[*a as usize];
                    let y = &self.vals[off..off + len];
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Relu(a) => {
                    let (ao, _) = offs[*a as usize];
                    let xv = val_in(*a);
                    let (ins, g) = split!();
                    for i in 0..len {
                        if xv[i] > 0.0 {
                            ins[ao + i] += g[i];
                        }
                    }
                }
                Op::Exp(a) => {
                    let (ao, _) = offs[*a as usize];
                    let y = &self.vals[off..off + len];
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i] * y[i];
                    }
                }
                Op::Log(a) => {
                    let (ao, _) = offs[*a as usize];
                    let xv = val_in(*a);
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i] / xv[i];
                    }
                }
                Op::Square(a) => {
                    let (ao, _) = offs[*a as usize];
                    let xv = val_in(*a);
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += 2.0 * g[i] * xv[i];
                    }
                }
                Op::Sum(a) => {
                    let (ao, alen) = offs[*a as usize];
                    let (ins, g) = split!();
                    let gv = g[0];
                    for i in 0..alen {
                        ins[ao + i] += gv;
                    }
                }
                Op::Dot(a, b) => {
                    let (ao, alen) = offs[*a as usize];
                    let (bo, _) = offs[*b as usize];
                    let av = val_in(*a);
                    let bv = val_in(*b);
                    let (ins, g) = split!();
                    let gv = g[0];
                    for i in 0..alen {
                        ins[ao + i] += gv * bv[i];
                    }
                    for i in 0..alen {
                        ins[bo + i] += gv * av[i];
                    }
                }
                Op::ScalarMul(a, c) => {
                    let (ao, _) = offs[*a as usize];
                    let c = *c;
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i] * c;
                    }
                }
                Op::ScalarAdd(a) => {
                    let (ao, _) = offs[*a as usize];
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i];
                    }
                }
                Op::MulScalarNode(a, s) => {
                    let (ao, _) = offs[*a as usize];
                    let (so, _) = offs[*s as usize];
                    let sv = val_in(*s)[0];
                    let av = val_in(*a);
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i] * sv;
                    }
                    let mut acc = 0.0;
                    for i in 0..len {
                        acc += g[i] * av[i];
                    }
                    ins[so] += acc;
                }
                Op::AddScalarNode(a, s) => {
                    let (ao, _) = offs[*a as usize];
                    let (so, _) = offs[*s as usize];
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + i] += g[i];
                    }
                    ins[so] += g.iter().sum::<f64>();
                }
                Op::AddCols(mat, colv) => {
                    let (mo, _) = offs[*mat as usize];
                    let (co, _) = offs[*colv as usize];
                    let r = rows;
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[mo + i] += g[i];
                    }
                    for j in 0..cols {
                        for i in 0..r {
                            ins[co + i] += g[j * r + i];
                        }
                    }
                }
                Op::MulCols(mat, colv) => {
                    let (mo, _) = offs[*mat as usize];
                    let (co, _) = offs[*colv as usize];
                    let mv = val_in(*mat);
                    let cv = val_in(*colv);
                    let r = rows;
                    let (ins, g) = split!();
                    for j in 0..cols {
                        for i in 0..r {
                            ins[mo + j * r + i] += g[j * r + i] * cv[i];
                        }
                    }
                    for j in 0..cols {
                        for i in 0..r {
                            ins[co + i] += g[j * r + i] * mv[j * r + i];
                        }
                    }
                }
                Op::Index(a, i) => {
                    let (ao, _) = offs[*a as usize];
                    let (ins, g) = split!();
                    ins[ao + i] += g[0];
                }
                Op::ColOf(a, c) => {
                    let (ao, _) = offs[*a as usize];
                    let r = rows;
                    let (ins, g) = split!();
                    for i in 0..r {
                        ins[ao + c * r + i] += g[i];
                    }
                }
                Op::StackScalars(ids) => {
                    let srcs: Vec<usize> = ids.iter().map(|&i| offs[i as usize].0).collect();
                    let (ins, g) = split!();
                    for (i, so) in srcs.into_iter().enumerate() {
                        ins[so] += g[i];
                    }
                }
                Op::HStack(ids) => {
                    let regions: Vec<(usize, usize)> =
                        ids.iter().map(|&i| offs[i as usize]).collect();
                    let (ins, g) = split!();
                    let mut at = 0;
                    for (o, l) in regions {
                        for i in 0..l {
                            ins[o + i] += g[at + i];
                        }
                        at += l;
                    }
                }
                Op::GatherCols(a, idx) => {
                    let (ao, _) = offs[*a as usize];
                    let r = rows;
                    let (ins, g) = split!();
                    for (j, &c) in idx.iter().enumerate() {
                        for i in 0..r {
                            ins[ao + c * r + i] += g[j * r + i];
                        }
                    }
                }
                Op::RepeatCols(a) => {
                    let (ao, _) = offs[*a as usize];
                    let r = rows;
                    let (ins, g) = split!();
                    for j in 0..cols {
                        for i in 0..r {
                            ins[ao + i] += g[j * r + i];
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let (ao, _) = offs[*a as usize];
                    let (ins, g) = split!();
                    for i in 0..len {
                        ins[ao + start + i] += g[i];
                    }
                }
                Op::SymFromTriu(a) => {
                    let (ao, _) = offs[*a as usize];
                    let d = rows;
                    let (ins, g) = split!();
                    let mut k = 0;
                    for i in 0..d {
                        for j in i..d {
                            ins[ao + k] += if i == j {
                                g[i * d + i]
                            } else {
                                g[j * d + i] + g[i * d + j]
                            };
                            k += 1;
                        }
                    }
                }
                Op::DiagFromVec(a) => {
                    let (ao, _) = offs[*a as usize];
                    let d = rows;
                    let (ins, g) = split!();
                    for i in 0..d {
                        ins[ao + i] += g[i * d + i];
                    }
                }
                Op::Custom { op, inputs } => {
                    let primal = &self.vals[off..off + len];
                    let in_slices: Vec<&[f64]> = inputs
                        .iter()
                        .map(|&i| {
                            let (o, l) = offs[i as usize];
                            &self.vals[o..o + l]
                        })
                        .collect();
                    for (which, &iid) in inputs.iter().enumerate() {
                        let (io, il) = offs[iid as usize];
                        let (ins, g) = grads.split_at_mut(off);
                        op.backward_input(
                            which,
                            &in_slices,
                            primal,
                            &g[..len],
                            &mut ins[io..io + il],
                        );
                    }
                }
            }
        }

        Ok(Gradients { grads, offs })
    }
}

/// `out += opt(A) x opt(B)` with optional transposes, column-major.
#[allow(clippy::too_many_arguments)]
fn matmul_into(
    a: &[f64],
    b: &[f64],
    m: usize,
    k_or_n: usize,
    n_or_k: usize,
    out: &mut [f64],
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            // A (m, k) x B (k, n) -> (m, n); axpy over A columns.
            let (k, n) = (k_or_n, n_or_k);
            debug_assert_eq!(out.len(), m * n);
            for j in 0..n {
                let outc = &mut out[j * m..(j + 1) * m];
                for i in 0..k {
                    let bij = b[j * k + i];
                    if bij == 0.0 {
                        continue;
                    }
                    let ac = &a[i * m..(i + 1) * m];
                    for r in 0..m {
                        outc[r] += ac[r] * bij;
                    }
                }
            }
        }
        (false, true) => {
            // A (m, n) x Bᵀ where B (k, n) -> (m, k): out[:, i] += Σ_j A[:, j] B[i, j].
            let (n, k) = (k_or_n, n_or_k);
            debug_assert_eq!(out.len(), m * k);
            for j in 0..n {
                let ac = &a[j * m..(j + 1) * m];
                for i in 0..k {
                    let bij = b[j * k + i];
                    if bij == 0.0 {
                        continue;
                    }
                    let outc = &mut out[i * m..(i + 1) * m];
                    for r in 0..m {
                        outc[r] += ac[r] * bij;
                    }
                }
            }
        }
        (true, false) => {
            // Aᵀ where A (m, k) x B (m, n) -> (k, n): out[i, j] = A[:, i] · B[:, j].
            let (k, n) = (k_or_n, n_or_k);
            debug_assert_eq!(out.len(), k * n);
            for j in 0..n {
                let bc = &b[j * m..(j + 1) * m];
                for i in 0..k {
                    let ac = &a[i * m..(i + 1) * m];
                    let mut acc = 0.0;
                    for r in 0..m {
                        acc += ac[r] * bc[r];
                    }
                    out[j * k + i] += acc;
                }
            }
        }
        (true, true) => unreachable!("not needed by any adjoint rule"),
    }
}

/// Stable `log Σ exp` over a plain slice, for host-side (non-tape) code.
/// Returns `-inf` for a slice of `-inf` entries.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Variational parameter families: generative (`Theta`), proposal (`Phi`), and
/// the transition family shared between the generative model and the proposal
/// (`Varphi`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Theta,
    Phi,
    Varphi,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Theta, ParamGroup::Phi, ParamGroup::Varphi];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Theta => "theta",
            ParamGroup::Phi => "phi",
            ParamGroup::Varphi => "varphi",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index of a registered parameter, stable for the life of the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotId(usize);

struct Slot {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    group: ParamGroup,
    shape: (usize, usize),
    values: Vec<f64>,
}

/// Owns parameter values between tape evaluations. Slots keep registration
/// order, which fixes staging order and makes flattened group vectors stable.
#[derive(Default)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    by_name: BTreeMap<String, usize>,
}

/// Leaf vars for every slot of a store, in slot order, on one tape.
pub struct StagedParams {
    vars: Vec<Var>,
}

impl StagedParams {
    pub fn var(&self, id: SlotId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<SlotId> {
        if values.len() != rows * cols {
            return Err(Error::ParameterShape {
                name: name.into(),
                got: (values.len(), 1),
                expected: (rows, cols),
            });
        }
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument {
                what: "parameter registration",
                why: format!("duplicate name `{name}`"),
            });
        }
        let id = self.slots.len();
        self.by_name.insert(name.to_string(), id);
        self.slots.push(Slot {
            name: name.to_string(),
            group,
            rows,
            cols,
            values,
        });
        Ok(SlotId(id))
    }

    pub fn id_of(&self, name: &str) -> Result<SlotId> {
        self.by_name
            .get(name)
            .map(|&i| SlotId(i))
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn name(&self, id: SlotId) -> &str {
        &self.slots[id.0].name
    }

    pub fn group(&self, id: SlotId) -> ParamGroup {
        self.slots[id.0].group
    }

    pub fn shape(&self, id: SlotId) -> (usize, usize) {
        (self.slots[id.0].rows, self.slots[id.0].cols)
    }

    pub fn values(&self, id: SlotId) -> &[f64] {
        &self.slots[id.0].values
    }

    pub fn values_mut(&mut self, id: SlotId) -> &mut [f64] {
        &mut self.slots[id.0].values
    }

    pub fn set_values(&mut self, id: SlotId, values: &[f64]) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if values.len() != slot.values.len() {
            return Err(Error::ParameterShape {
                name: slot.name.clone(),
                got: (values.len(), 1),
                expected: (slot.rows, slot.cols),
            });
        }
        slot.values.copy_from_slice(values);
        Ok(())
    }

    pub fn slot_ids(&self) -> impl Iterator<Item = SlotId> {
        (0..self.slots.len()).map(SlotId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<SlotId> {
        (0..self.slots.len())
            .filter(|&i| self.slots[i].group == group)
            .map(SlotId)
            .collect()
    }

    /// Total number of scalar parameters in a group.
    pub fn group_dim(&self, group: ParamGroup) -> usize {
        self.slots
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.values.len())
            .sum()
    }

    /// Create one leaf per slot on `tape`, in slot order.
    pub fn stage(&self, tape: &mut Tape) -> StagedParams {
        let vars = self
            .slots
            .iter()
            .map(|s| {
                tape.leaf(s.rows, s.cols, &s.values)
                    .expect("slot shapes are validated at registration")
            })
            .collect();
        StagedParams { vars }
    }

    /// Checkpoint as a flat JSON object keyed by parameter name.
    pub fn to_checkpoint(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for s in &self.slots {
            let entry = CheckpointEntry {
                group: s.group,
                shape: (s.rows, s.cols),
                values: s.values.clone(),
            };
            map.insert(
                s.name.clone(),
                serde_json::to_value(entry).expect("checkpoint entries serialize"),
            );
        }
        serde_json::Value::Object(map)
    }

    /// Load values from a checkpoint produced by a store with identical slots.
    /// Names, groups, and shapes must match exactly; extra or missing entries
    /// are errors.
    pub fn load_checkpoint(&mut self, ckpt: &serde_json::Value) -> Result<()> {
        let map = ckpt.as_object().ok_or_else(|| Error::InvalidArgument {
            what: "checkpoint",
            why: "top level must be an object".into(),
        })?;
        for key in map.keys() {
            if !self.by_name.contains_key(key) {
                return Err(Error::UnknownParameter(key.clone()));
            }
        }
        for slot_idx in 0..self.slots.len() {
            let name = self.slots[slot_idx].name.clone();
            let raw = map
                .get(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let entry: CheckpointEntry = serde_json::from_value(raw.clone())?;
            let slot = &mut self.slots[slot_idx];
            if entry.shape != (slot.rows, slot.cols) {
                return Err(Error::ParameterShape {
                    name,
                    got: entry.shape,
                    expected: (slot.rows, slot.cols),
                });
            }
            if entry.group != slot.group {
                return Err(Error::InvalidArgument {
                    what: "checkpoint",
                    why: format!(
                        "parameter `{name}` has group {}, expected {}",
                        entry.group, slot.group
                    ),
                });
            }
            slot.values.copy_from_slice(&entry.values);
        }
        Ok(())
    }
}
