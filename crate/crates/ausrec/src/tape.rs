//! A reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value is a 2-D array (scalars are 1x1). Nodes are recorded in
//! creation order, which is already a topological order, and the backward
//! sweep visits each node exactly once.
//!
//! The sweep comes in two flavors. [`Tape::grad`] computes plain gradient
//! values. [`Tape::grad_vars`] *records* the backward pass as new tape
//! operations, so the resulting gradient is itself differentiable — that is
//! what lets the meta objective differentiate through the one-step virtual
//! update of the embeddings.
//!
//! Sparse matrices only ever enter as constant left factors of a product;
//! they are never differentiated.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::sparse::SparseMatrix;
use crate::{Error, Result};

static TAPE_GENERATION: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a tape. Cheap to copy; only valid for the
/// tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    gen: u64,
}

/// A constant sparse factor prepared for products: holds the matrix and its
/// transpose so the backward rule needs no recomputation.
#[derive(Debug, Clone)]
pub struct SpmmOperand {
    mat: Arc<SparseMatrix>,
    trans: Arc<SparseMatrix>,
}

impl SpmmOperand {
    pub fn new(mat: SparseMatrix) -> Self {
        let trans = Arc::new(mat.transpose());
        Self {
            mat: Arc::new(mat),
            trans,
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.mat
    }

    fn reversed(&self) -> Self {
        Self {
            mat: Arc::clone(&self.trans),
            trans: Arc::clone(&self.mat),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Spmm {
        s: SpmmOperand,
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddN {
        xs: Vec<usize>,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    ScalarMul {
        x: usize,
        c: f64,
    },
    ConcatCols {
        a: usize,
        b: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        end: usize,
    },
    PadCols {
        x: usize,
        offset: usize,
    },
    RowGather {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    ScatterAddRows {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    Sigmoid {
        x: usize,
    },
    LogSigmoid {
        x: usize,
    },
    Relu {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    SumCols {
        x: usize,
    },
    SumRows {
        x: usize,
    },
    BroadcastScalar {
        x: usize,
    },
    BroadcastRows {
        x: usize,
    },
    BroadcastCols {
        x: usize,
    },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::ConcatCols { a, b } => {
                f(*a);
                f(*b);
            }
            Op::AddN { xs } => xs.iter().for_each(|&x| f(x)),
            Op::Spmm { x, .. }
            | Op::ScalarMul { x, .. }
            | Op::SliceCols { x, .. }
            | Op::PadCols { x, .. }
            | Op::RowGather { x, .. }
            | Op::ScatterAddRows { x, .. }
            | Op::Sigmoid { x }
            | Op::LogSigmoid { x }
            | Op::Relu { x }
            | Op::MeanAll { x }
            | Op::SumAll { x }
            | Op::SumCols { x }
            | Op::SumRows { x }
            | Op::BroadcastScalar { x }
            | Op::BroadcastRows { x }
            | Op::BroadcastCols { x } => f(*x),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Spmm { .. } => "spmm",
            Op::Add { .. } => "add",
            Op::AddN { .. } => "add_n",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::RowGather { .. } => "row_gather",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::Relu { .. } => "relu",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
            Op::SumCols { .. } => "sum_cols",
            Op::SumRows { .. } => "sum_rows",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::BroadcastCols { .. } => "broadcast_cols",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording tape. Not shared across threads; one tape per training step.
pub struct Tape {
    gen: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    // -softplus(-x), written to avoid overflow on either tail.
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn dot_ex(a: &Array2<f64>, b: &Array2<f64>, ta: bool, tb: bool) -> Array2<f64> {
    match (ta, tb) {
        (false, false) => a.dot(b),
        (true, false) => a.t().dot(b),
        (false, true) => a.dot(&b.t()),
        (true, true) => a.t().dot(&b.t()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            gen: TAPE_GENERATION.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.gen != self.gen {
            return Err(Error::InvalidArgument(
                "tracked value belongs to a different tape".into(),
            ));
        }
        Ok(v.id)
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            id: nodes.len() - 1,
            gen: self.gen,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.id].value;
        (val.nrows(), val.ncols())
    }

    /// Clones the forward value out of the tape.
    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.id].value;
        assert_eq!(val.len(), 1, "value_scalar on a non-scalar");
        val[[0, 0]]
    }

    pub fn value_is_finite(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id]
            .value
            .iter()
            .all(|x| x.is_finite())
    }

    /// Records a trainable input.
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a constant; identical to a leaf, gradients simply are not
    /// requested for it.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(sa)
    }

    /// Dense product with optional transposes on either factor.
    pub fn matmul_ex(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let inner_a = if ta { va.nrows() } else { va.ncols() };
            let inner_b = if tb { vb.ncols() } else { vb.nrows() };
            if inner_a != inner_b {
                return Err(Error::Shape {
                    op: "matmul",
                    detail: format!(
                        "{}x{} (t={ta}) times {}x{} (t={tb})",
                        va.nrows(),
                        va.ncols(),
                        vb.nrows(),
                        vb.ncols()
                    ),
                });
            }
            dot_ex(va, vb, ta, tb)
        };
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// Product with a constant sparse left factor; gradients flow only to
    /// the dense side.
    pub fn spmm(&self, s: &SpmmOperand, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            s.mat.spmm(&nodes[x].value)?
        };
        Ok(self.push(value, Op::Spmm { s: s.clone(), x }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a].value + &nodes[b].value
        };
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Sum of any number of same-shaped values.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("add_n of zero values".into()));
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        for &x in &xs[1..] {
            self.binary_shapes("add_n", xs[0], x)?;
        }
        let ids: Vec<usize> = xs.iter().map(|&x| self.check(x)).collect::<Result<_>>()?;
        let value = {
            let nodes = self.nodes.borrow();
            let mut acc = nodes[ids[0]].value.clone();
            for &id in &ids[1..] {
                acc += &nodes[id].value;
            }
            acc
        };
        Ok(self.push(value, Op::AddN { xs: ids }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a].value - &nodes[b].value
        };
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a].value * &nodes[b].value
        };
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scalar_mul(&self, x: Var, c: f64) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[x].value * c
        };
        Ok(self.push(value, Op::ScalarMul { x, c }))
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            if va.nrows() != vb.nrows() {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("{} rows vs {} rows", va.nrows(), vb.nrows()),
                });
            }
            ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
                .expect("checked row counts above")
        };
        Ok(self.push(value, Op::ConcatCols { a, b }))
    }

    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x].value;
            if start >= end || end > vx.ncols() {
                return Err(Error::Shape {
                    op: "slice_cols",
                    detail: format!("range {start}..{end} of {} columns", vx.ncols()),
                });
            }
            vx.slice(s![.., start..end]).to_owned()
        };
        Ok(self.push(value, Op::SliceCols { x, start, end }))
    }

    /// Places `x` into a zero matrix with `total` columns at column `offset`.
    pub fn pad_cols(&self, x: Var, total: usize, offset: usize) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x].value;
            if offset + vx.ncols() > total {
                return Err(Error::Shape {
                    op: "pad_cols",
                    detail: format!(
                        "{} columns at offset {offset} exceed total {total}",
                        vx.ncols()
                    ),
                });
            }
            let mut out = Array2::zeros((vx.nrows(), total));
            out.slice_mut(s![.., offset..offset + vx.ncols()])
                .assign(vx);
            out
        };
        Ok(self.push(value, Op::PadCols { x, offset }))
    }

    /// Selects rows of `x`: output row `i` is `x` row `idx[i]`.
    pub fn row_gather(&self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x].value;
            if let Some(&bad) = idx.iter().find(|&&r| r >= vx.nrows()) {
                return Err(Error::InvalidArgument(format!(
                    "row index {bad} out of range for {} rows",
                    vx.nrows()
                )));
            }
            let mut out = Array2::zeros((idx.len(), vx.ncols()));
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).assign(&vx.row(r));
            }
            out
        };
        Ok(self.push(value, Op::RowGather { x, idx }))
    }

    /// Adjoint of `row_gather`: accumulates row `i` of `x` into output row
    /// `idx[i]` of a zero matrix with `rows` rows.
    pub fn scatter_add_rows(&self, x: Var, idx: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x].value;
            if vx.nrows() != idx.len() {
                return Err(Error::Shape {
                    op: "scatter_add_rows",
                    detail: format!("{} rows vs {} indices", vx.nrows(), idx.len()),
                });
            }
            if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
                return Err(Error::InvalidArgument(format!(
                    "scatter index {bad} out of range for {rows} rows"
                )));
            }
            let mut out = Array2::zeros((rows, vx.ncols()));
            for (i, &r) in idx.iter().enumerate() {
                let mut dst = out.row_mut(r);
                dst += &vx.row(i);
            }
            out
        };
        Ok(self.push(value, Op::ScatterAddRows { x, idx }))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = self.nodes.borrow()[x].value.mapv(sigmoid_scalar);
        Ok(self.push(value, Op::Sigmoid { x }))
    }

    /// `ln(sigmoid(x))`, computed in an overflow-free form.
    pub fn log_sigmoid(&self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = self.nodes.borrow()[x].value.mapv(log_sigmoid_scalar);
        Ok(self.push(value, Op::LogSigmoid { x }))
    }

    /// Rectifier. The backward rule multiplies by the constant 0/1 activity
    /// mask captured at forward time.
    pub fn relu(&self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = self.nodes.borrow()[x].value.mapv(|v| v.max(0.0));
        Ok(self.push(value, Op::Relu { x }))
    }

    /// Mean over all elements, as a 1x1 value.
    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let v = &self.nodes.borrow()[x].value;
            if v.is_empty() {
                return Err(Error::InvalidArgument("mean of an empty value".into()));
            }
            Array2::from_elem((1, 1), v.sum() / v.len() as f64)
        };
        Ok(self.push(value, Op::MeanAll { x }))
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = Array2::from_elem((1, 1), self.nodes.borrow()[x].value.sum());
        Ok(self.push(value, Op::SumAll { x }))
    }

    /// Row-wise sum: `(r, c) -> (r, 1)`.
    pub fn sum_cols(&self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let v = &self.nodes.borrow()[x].value;
            v.sum_axis(Axis(1)).insert_axis(Axis(1))
        };
        Ok(self.push(value, Op::SumCols { x }))
    }

    /// Column-wise sum: `(r, c) -> (1, c)`.
    pub fn sum_rows(&self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let v = &self.nodes.borrow()[x].value;
            v.sum_axis(Axis(0)).insert_axis(Axis(0))
        };
        Ok(self.push(value, Op::SumRows { x }))
    }

    /// Replicates a 1x1 value to `(rows, cols)`.
    pub fn broadcast_scalar(&self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let v = &self.nodes.borrow()[x].value;
            if v.len() != 1 {
                return Err(Error::Shape {
                    op: "broadcast_scalar",
                    detail: format!("input is {}x{}, expected 1x1", v.nrows(), v.ncols()),
                });
            }
            Array2::from_elem((rows, cols), v[[0, 0]])
        };
        Ok(self.push(value, Op::BroadcastScalar { x }))
    }

    /// Replicates a `(1, c)` row to `(rows, c)`.
    pub fn broadcast_rows(&self, x: Var, rows: usize) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let v = &self.nodes.borrow()[x].value;
            if v.nrows() != 1 {
                return Err(Error::Shape {
                    op: "broadcast_rows",
                    detail: format!("input has {} rows, expected 1", v.nrows()),
                });
            }
            let mut out = Array2::zeros((rows, v.ncols()));
            for mut row in out.rows_mut() {
                row.assign(&v.row(0));
            }
            out
        };
        Ok(self.push(value, Op::BroadcastRows { x }))
    }

    /// Replicates an `(r, 1)` column to `(r, cols)`.
    pub fn broadcast_cols(&self, x: Var, cols: usize) -> Result<Var> {
        let x = self.check(x)?;
        let value = {
            let v = &self.nodes.borrow()[x].value;
            if v.ncols() != 1 {
                return Err(Error::Shape {
                    op: "broadcast_cols",
                    detail: format!("input has {} columns, expected 1", v.ncols()),
                });
            }
            let mut out = Array2::zeros((v.nrows(), cols));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                row.fill(v[[i, 0]]);
            }
            out
        };
        Ok(self.push(value, Op::BroadcastCols { x }))
    }

    fn require_scalar(&self, y: Var) -> Result<()> {
        if self.shape(y) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "gradient target must be scalar, got {:?}",
                self.shape(y)
            )));
        }
        Ok(())
    }

    /// Marks every node from which some `wrt` leaf is reachable going
    /// forward; the backward sweeps only propagate adjoints inside this
    /// subgraph, so gradient paths that cannot influence any requested
    /// value are never computed.
    fn reachable_from(&self, y: Var, wrt: &[Var]) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut active = vec![false; y.id + 1];
        for w in wrt {
            if w.id <= y.id {
                active[w.id] = true;
            }
        }
        for i in 0..=y.id {
            if !active[i] {
                let mut any = false;
                nodes[i].op.for_each_input(|j| any |= active[j]);
                active[i] = any;
            }
        }
        active
    }

    /// Reverse-mode gradients of a scalar with respect to `wrt`, as plain
    /// values. Values not reachable from `y` get zero gradients.
    pub fn grad(&self, y: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>> {
        self.check(y)?;
        self.require_scalar(y)?;
        for &w in wrt {
            self.check(w)?;
        }
        let active = self.reachable_from(y, wrt);
        let nodes = self.nodes.borrow();
        let wanted: HashMap<usize, ()> = wrt.iter().map(|w| (w.id, ())).collect();
        let mut found: HashMap<usize, Array2<f64>> = HashMap::new();
        let mut adj: Vec<Option<Array2<f64>>> = (0..=y.id).map(|_| None).collect();
        if active[y.id] {
            adj[y.id] = Some(Array2::ones((1, 1)));
        }

        let acc = |slot: &mut Option<Array2<f64>>, contrib: Array2<f64>| match slot {
            Some(a) => *a += &contrib,
            None => *slot = Some(contrib),
        };

        for i in (0..=y.id).rev() {
            let Some(a) = adj[i].take() else { continue };
            if wanted.contains_key(&i) {
                found.entry(i).or_insert_with(|| a.clone());
            }
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul {
                    a: ia,
                    b: ib,
                    ta,
                    tb,
                } => {
                    let (va, vb) = (&nodes[*ia].value, &nodes[*ib].value);
                    if active[*ia] {
                        let da = if !ta {
                            dot_ex(&a, vb, false, !tb)
                        } else {
                            dot_ex(vb, &a, *tb, true)
                        };
                        acc(&mut adj[*ia], da);
                    }
                    if active[*ib] {
                        let db = if !tb {
                            dot_ex(va, &a, !ta, false)
                        } else {
                            dot_ex(&a, va, true, *ta)
                        };
                        acc(&mut adj[*ib], db);
                    }
                }
                Op::Spmm { s: sp, x } => {
                    if active[*x] {
                        acc(&mut adj[*x], sp.trans.spmm(&a)?);
                    }
                }
                Op::Add { a: ia, b: ib } => {
                    for &t in &[*ia, *ib] {
                        if active[t] {
                            acc(&mut adj[t], a.clone());
                        }
                    }
                }
                Op::AddN { xs } => {
                    for &x in xs {
                        if active[x] {
                            acc(&mut adj[x], a.clone());
                        }
                    }
                }
                Op::Sub { a: ia, b: ib } => {
                    if active[*ib] {
                        acc(&mut adj[*ib], &a * -1.0);
                    }
                    if active[*ia] {
                        acc(&mut adj[*ia], a);
                    }
                }
                Op::Mul { a: ia, b: ib } => {
                    if active[*ia] {
                        acc(&mut adj[*ia], &a * &nodes[*ib].value);
                    }
                    if active[*ib] {
                        acc(&mut adj[*ib], &a * &nodes[*ia].value);
                    }
                }
                Op::ScalarMul { x, c } => {
                    if active[*x] {
                        acc(&mut adj[*x], &a * *c);
                    }
                }
                Op::ConcatCols { a: ia, b: ib } => {
                    let ca = nodes[*ia].value.ncols();
                    if active[*ia] {
                        acc(&mut adj[*ia], a.slice(s![.., ..ca]).to_owned());
                    }
                    if active[*ib] {
                        acc(&mut adj[*ib], a.slice(s![.., ca..]).to_owned());
                    }
                }
                Op::SliceCols { x, start, end } => {
                    if active[*x] {
                        let vx = &nodes[*x].value;
                        let mut d = Array2::zeros((vx.nrows(), vx.ncols()));
                        d.slice_mut(s![.., *start..*end]).assign(&a);
                        acc(&mut adj[*x], d);
                    }
                }
                Op::PadCols { x, offset } => {
                    if active[*x] {
                        let c = nodes[*x].value.ncols();
                        acc(
                            &mut adj[*x],
                            a.slice(s![.., *offset..offset + c]).to_owned(),
                        );
                    }
                }
                Op::RowGather { x, idx } => {
                    if active[*x] {
                        let vx = &nodes[*x].value;
                        let mut d = Array2::zeros((vx.nrows(), vx.ncols()));
                        for (j, &r) in idx.iter().enumerate() {
                            let mut dst = d.row_mut(r);
                            dst += &a.row(j);
                        }
                        acc(&mut adj[*x], d);
                    }
                }
                Op::ScatterAddRows { x, idx } => {
                    if active[*x] {
                        let c = a.ncols();
                        let mut d = Array2::zeros((idx.len(), c));
                        for (j, &r) in idx.iter().enumerate() {
                            d.row_mut(j).assign(&a.row(r));
                        }
                        acc(&mut adj[*x], d);
                    }
                }
                Op::Sigmoid { x } => {
                    if active[*x] {
                        let y_val = &nodes[i].value;
                        acc(&mut adj[*x], &a * &(y_val * &y_val.mapv(|v| 1.0 - v)));
                    }
                }
                Op::LogSigmoid { x } => {
                    if active[*x] {
                        let sig_neg = nodes[*x].value.mapv(|v| sigmoid_scalar(-v));
                        acc(&mut adj[*x], &a * &sig_neg);
                    }
                }
                Op::Relu { x } => {
                    if active[*x] {
                        let mask = nodes[*x].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        acc(&mut adj[*x], &a * &mask);
                    }
                }
                Op::MeanAll { x } => {
                    if active[*x] {
                        let vx = &nodes[*x].value;
                        let g = a[[0, 0]] / vx.len() as f64;
                        acc(&mut adj[*x], Array2::from_elem((vx.nrows(), vx.ncols()), g));
                    }
                }
                Op::SumAll { x } => {
                    if active[*x] {
                        let vx = &nodes[*x].value;
                        acc(
                            &mut adj[*x],
                            Array2::from_elem((vx.nrows(), vx.ncols()), a[[0, 0]]),
                        );
                    }
                }
                Op::SumCols { x } => {
                    if active[*x] {
                        let c = nodes[*x].value.ncols();
                        let mut d = Array2::zeros((a.nrows(), c));
                        for (j, mut row) in d.rows_mut().into_iter().enumerate() {
                            row.fill(a[[j, 0]]);
                        }
                        acc(&mut adj[*x], d);
                    }
                }
                Op::SumRows { x } => {
                    if active[*x] {
                        let r = nodes[*x].value.nrows();
                        let mut d = Array2::zeros((r, a.ncols()));
                        for mut row in d.rows_mut() {
                            row.assign(&a.row(0));
                        }
                        acc(&mut adj[*x], d);
                    }
                }
                Op::BroadcastScalar { x } => {
                    if active[*x] {
                        acc(&mut adj[*x], Array2::from_elem((1, 1), a.sum()));
                    }
                }
                Op::BroadcastRows { x } => {
                    if active[*x] {
                        acc(&mut adj[*x], a.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::BroadcastCols { x } => {
                    if active[*x] {
                        acc(&mut adj[*x], a.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                }
            }
        }
        drop(nodes);

        let out: Vec<Array2<f64>> = wrt
            .iter()
            .map(|w| match found.get(&w.id) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.shape(*w);
                    Array2::zeros((r, c))
                }
            })
            .collect();
        for (w, g) in wrt.iter().zip(&out) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(self.non_finite_diagnostic(y, *w));
            }
        }
        Ok(out)
    }

    /// Finds the first node with a non-finite forward value to name in the
    /// error; falls back to naming the gradient itself.
    fn non_finite_diagnostic(&self, y: Var, w: Var) -> Error {
        let nodes = self.nodes.borrow();
        for (i, node) in nodes.iter().enumerate().take(y.id + 1) {
            if node.value.iter().any(|v| !v.is_finite()) {
                return Error::Numerical {
                    context: format!("backward through node {i}"),
                    detail: format!("forward value of `{}` is non-finite", node.op.name()),
                };
            }
        }
        Error::Numerical {
            context: "gradient".into(),
            detail: format!("non-finite gradient for node {}", w.id),
        }
    }

    /// Reverse-mode gradients recorded as new tape operations, so the
    /// results remain differentiable. Returns one `Var` per `wrt` entry
    /// (a zero constant where `y` does not depend on it).
    pub fn grad_vars(&self, y: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check(y)?;
        self.require_scalar(y)?;
        for &w in wrt {
            self.check(w)?;
        }
        let active = self.reachable_from(y, wrt);
        // Ops are cloned out up front so emission below never re-enters the
        // node list while it is borrowed.
        let ops: Vec<Op> = self
            .nodes
            .borrow()
            .iter()
            .take(y.id + 1)
            .map(|n| n.op.clone())
            .collect();
        let var = |id: usize| Var { id, gen: self.gen };

        let mut contribs: Vec<Vec<Var>> = vec![Vec::new(); y.id + 1];
        if active[y.id] {
            contribs[y.id].push(self.constant(Array2::ones((1, 1))));
        }
        let mut settled: HashMap<usize, Var> = HashMap::new();

        for i in (0..=y.id).rev() {
            if contribs[i].is_empty() {
                continue;
            }
            let a = self.add_n(&std::mem::take(&mut contribs[i]))?;
            settled.insert(i, a);
            match &ops[i] {
                Op::Leaf => {}
                Op::MatMul {
                    a: ia,
                    b: ib,
                    ta,
                    tb,
                } => {
                    let (va, vb) = (var(*ia), var(*ib));
                    if active[*ia] {
                        let da = if !ta {
                            self.matmul_ex(a, vb, false, !tb)?
                        } else {
                            self.matmul_ex(vb, a, *tb, true)?
                        };
                        contribs[*ia].push(da);
                    }
                    if active[*ib] {
                        let db = if !tb {
                            self.matmul_ex(va, a, !ta, false)?
                        } else {
                            self.matmul_ex(a, va, true, *ta)?
                        };
                        contribs[*ib].push(db);
                    }
                }
                Op::Spmm { s: sp, x } => {
                    if active[*x] {
                        contribs[*x].push(self.spmm(&sp.reversed(), a)?);
                    }
                }
                Op::Add { a: ia, b: ib } => {
                    for &t in &[*ia, *ib] {
                        if active[t] {
                            contribs[t].push(a);
                        }
                    }
                }
                Op::AddN { xs } => {
                    for &x in xs {
                        if active[x] {
                            contribs[x].push(a);
                        }
                    }
                }
                Op::Sub { a: ia, b: ib } => {
                    if active[*ia] {
                        contribs[*ia].push(a);
                    }
                    if active[*ib] {
                        contribs[*ib].push(self.scalar_mul(a, -1.0)?);
                    }
                }
                Op::Mul { a: ia, b: ib } => {
                    if active[*ia] {
                        contribs[*ia].push(self.mul(a, var(*ib))?);
                    }
                    if active[*ib] {
                        contribs[*ib].push(self.mul(a, var(*ia))?);
                    }
                }
                Op::ScalarMul { x, c } => {
                    if active[*x] {
                        contribs[*x].push(self.scalar_mul(a, *c)?);
                    }
                }
                Op::ConcatCols { a: ia, b: ib } => {
                    let ca = self.shape(var(*ia)).1;
                    let cb = self.shape(var(*ib)).1;
                    if active[*ia] {
                        contribs[*ia].push(self.slice_cols(a, 0, ca)?);
                    }
                    if active[*ib] {
                        contribs[*ib].push(self.slice_cols(a, ca, ca + cb)?);
                    }
                }
                Op::SliceCols { x, start, .. } => {
                    if active[*x] {
                        let total = self.shape(var(*x)).1;
                        contribs[*x].push(self.pad_cols(a, total, *start)?);
                    }
                }
                Op::PadCols { x, offset } => {
                    if active[*x] {
                        let c = self.shape(var(*x)).1;
                        contribs[*x].push(self.slice_cols(a, *offset, offset + c)?);
                    }
                }
                Op::RowGather { x, idx } => {
                    if active[*x] {
                        let rows = self.shape(var(*x)).0;
                        contribs[*x].push(self.scatter_add_rows(a, Arc::clone(idx), rows)?);
                    }
                }
                Op::ScatterAddRows { x, idx } => {
                    if active[*x] {
                        contribs[*x].push(self.row_gather(a, Arc::clone(idx))?);
                    }
                }
                Op::Sigmoid { x } => {
                    if active[*x] {
                        let y_var = var(i);
                        let (r, c) = self.shape(y_var);
                        let one = self.constant(Array2::ones((r, c)));
                        let compl = self.sub(one, y_var)?;
                        let deriv = self.mul(y_var, compl)?;
                        contribs[*x].push(self.mul(a, deriv)?);
                    }
                }
                Op::LogSigmoid { x } => {
                    if active[*x] {
                        let neg = self.scalar_mul(var(*x), -1.0)?;
                        let deriv = self.sigmoid(neg)?;
                        contribs[*x].push(self.mul(a, deriv)?);
                    }
                }
                Op::Relu { x } => {
                    if active[*x] {
                        let mask = {
                            let nodes = self.nodes.borrow();
                            nodes[*x].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
                        };
                        let mask = self.constant(mask);
                        contribs[*x].push(self.mul(a, mask)?);
                    }
                }
                Op::MeanAll { x } => {
                    if active[*x] {
                        let (r, c) = self.shape(var(*x));
                        let scaled = self.scalar_mul(a, 1.0 / (r * c) as f64)?;
                        contribs[*x].push(self.broadcast_scalar(scaled, r, c)?);
                    }
                }
                Op::SumAll { x } => {
                    if active[*x] {
                        let (r, c) = self.shape(var(*x));
                        contribs[*x].push(self.broadcast_scalar(a, r, c)?);
                    }
                }
                Op::SumCols { x } => {
                    if active[*x] {
                        let c = self.shape(var(*x)).1;
                        contribs[*x].push(self.broadcast_cols(a, c)?);
                    }
                }
                Op::SumRows { x } => {
                    if active[*x] {
                        let r = self.shape(var(*x)).0;
                        contribs[*x].push(self.broadcast_rows(a, r)?);
                    }
                }
                Op::BroadcastScalar { x } => {
                    if active[*x] {
                        contribs[*x].push(self.sum_all(a)?);
                    }
                }
                Op::BroadcastRows { x } => {
                    if active[*x] {
                        contribs[*x].push(self.sum_rows(a)?);
                    }
                }
                Op::BroadcastCols { x } => {
                    if active[*x] {
                        contribs[*x].push(self.sum_cols(a)?);
                    }
                }
            }
        }

        wrt.iter()
            .map(|w| match settled.get(&w.id) {
                Some(&v) => Ok(v),
                None => {
                    let (r, c) = self.shape(*w);
                    Ok(self.constant(Array2::zeros((r, c))))
                }
            })
            .collect()
    }

    /// Differentiates a meta objective through a one-step descent update.
    ///
    /// `inner_loss` builds the weighted training objective from `w`;
    /// the virtual update `w - alpha * d(inner)/dw` is recorded as a
    /// differentiable expression, `meta_loss` is built on top of it, and the
    /// gradients of the result with respect to `theta` are returned.
    pub fn grad_through_update<F, G>(
        &self,
        w: Var,
        theta: &[Var],
        alpha: f64,
        inner_loss: F,
        meta_loss: G,
    ) -> Result<Vec<Array2<f64>>>
    where
        F: FnOnce(&Tape, Var) -> Result<Var>,
        G: FnOnce(&Tape, Var) -> Result<Var>,
    {
        let w_hat = self.virtual_step(w, alpha, inner_loss)?;
        let meta = meta_loss(self, w_hat)?;
        self.grad(meta, theta)
    }

    /// The differentiable one-step descent `w - alpha * d(inner)/dw`.
    pub fn virtual_step<F>(&self, w: Var, alpha: f64, inner_loss: F) -> Result<Var>
    where
        F: FnOnce(&Tape, Var) -> Result<Var>,
    {
        let inner = inner_loss(self, w)?;
        let g = self.grad_vars(inner, &[w])?[0];
        let step = self.scalar_mul(g, alpha)?;
        self.sub(w, step)
    }
}
