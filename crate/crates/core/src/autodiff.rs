//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Values are computed eagerly when an op is recorded. Each node keeps what its
//! adjoint rule needs, so `backward` is a single reverse sweep over the tape.
//! Column vectors are `k x 1` matrices and a batch of vectors is a `k x M` matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ssm::Map;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Jacobians {
    Shared(DMatrix<f64>),
    PerColumn(Vec<DMatrix<f64>>),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    MatMul(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    L2NormSq(usize),
    MapColumns(usize, Jacobians),
    GainApply { gain: usize, innovation: usize },
    NormalizeColumns(usize, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::MatMul(..) => "matmul",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L2NormSq(..) => "l2_norm_sq",
            Op::MapColumns(..) => "map_columns",
            Op::GainApply { .. } => "gain_apply",
            Op::NormalizeColumns(..) => "normalize_columns",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    name: &'static str,
}

/// Append-only record of operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: fresh_id(), nodes: Vec::new(), record: true }
    }

    /// A tape that computes values only. Every op result is stored as a leaf, so
    /// nothing can be differentiated but map Jacobians are never formed.
    pub fn inference() -> Self {
        Self { id: fresh_id(), nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Vars created before the reset are rejected afterwards.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
    }

    /// Drops the nodes recorded after `mark` (a previous [`Tape::len`]). Vars with an
    /// index below `mark` stay valid; later ones must not be used again.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Names of the recorded ops, in order.
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.name)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Autodiff("variable belongs to a different tape".into()));
        }
        if v.id >= self.nodes.len() {
            return Err(Error::Autodiff("variable was truncated away".into()));
        }
        Ok(v.id)
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        let (rows, cols) = value.shape();
        let name = op.name();
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, name });
        Var { id: self.nodes.len() - 1, tape: self.id, rows, cols }
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(DMatrix::from_element(1, 1, value))
    }

    /// New leaf holding a copy of `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[self.check(v)?].value.clone();
        Ok(self.leaf(value))
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[self.check(v).expect("stale or foreign variable")].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[(0, 0)]
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
        let ids = (self.check(a)?, self.check(b)?);
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(ids)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape(a, b, "add")?;
        let value = &self.nodes[ia].value + &self.nodes[ib].value;
        Ok(self.push(value, Op::Add(ia, ib)))
    }

    /// `a + bias` with a `rows x 1` bias broadcast over the columns of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        if bias.shape() != (a.rows, 1) {
            return Err(Error::shape(format!("add_bias: {:?} vs bias {:?}", a.shape(), bias.shape())));
        }
        let mut value = self.nodes[ia].value.clone();
        let b = &self.nodes[ib].value;
        for mut col in value.column_iter_mut() {
            col += b;
        }
        Ok(self.push(value, Op::AddBias(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape(a, b, "sub")?;
        let value = &self.nodes[ia].value - &self.nodes[ib].value;
        Ok(self.push(value, Op::Sub(ia, ib)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if a.cols != b.rows {
            return Err(Error::shape(format!("matmul: {:?} x {:?}", a.shape(), b.shape())));
        }
        let value = &self.nodes[ia].value * &self.nodes[ib].value;
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape(a, b, "hadamard")?;
        let value = self.nodes[ia].value.component_mul(&self.nodes[ib].value);
        Ok(self.push(value, Op::Hadamard(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = &self.nodes[ia].value * c;
        Ok(self.push(value, Op::Scale(ia, c)))
    }

    /// Vertical concatenation; all parts must have the same number of columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let ids = parts.iter().map(|p| self.check(*p)).collect::<Result<Vec<_>>>()?;
        if parts.iter().any(|p| p.cols != first.cols) {
            return Err(Error::shape("concat: column counts differ"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut value = DMatrix::zeros(rows, first.cols);
        let mut at = 0;
        for (p, id) in parts.iter().zip(&ids) {
            value.rows_mut(at, p.rows).copy_from(&self.nodes[*id].value);
            at += p.rows;
        }
        Ok(self.push(value, Op::Concat(ids)))
    }

    /// Rows `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        if start + len > a.rows || len == 0 {
            return Err(Error::shape(format!("slice {start}+{len} of {} rows", a.rows)));
        }
        let value = self.nodes[ia].value.rows(start, len).into_owned();
        Ok(self.push(value, Op::Slice(ia, start)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f64::tanh);
        Ok(self.push(value, Op::Tanh(ia)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(sigmoid);
        Ok(self.push(value, Op::Sigmoid(ia)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| v.max(0.0));
        Ok(self.push(value, Op::Relu(ia)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| v * v);
        Ok(self.push(value, Op::Square(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = DMatrix::from_element(1, 1, self.nodes[ia].value.sum());
        Ok(self.push(value, Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = DMatrix::from_element(1, 1, self.nodes[ia].value.mean());
        Ok(self.push(value, Op::Mean(ia)))
    }

    /// Sum of squared entries.
    pub fn l2_norm_sq(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = DMatrix::from_element(1, 1, self.nodes[ia].value.norm_squared());
        Ok(self.push(value, Op::L2NormSq(ia)))
    }

    /// Applies `map` to every column. Linear maps become one matrix product; other
    /// maps cache one Jacobian per column for the adjoint.
    pub fn map_columns(&mut self, a: Var, map: &Map) -> Result<Var> {
        let ia = self.check(a)?;
        let out_rows = map
            .output_dim(a.rows)
            .ok_or_else(|| Error::shape(format!("map does not accept {}-vectors", a.rows)))?;
        if let Map::Linear(mat) = map {
            let value = mat * &self.nodes[ia].value;
            let jac = if self.record { Jacobians::Shared(mat.clone()) } else { Jacobians::PerColumn(Vec::new()) };
            return Ok(self.push(value, Op::MapColumns(ia, jac)));
        }
        let input = &self.nodes[ia].value;
        let mut value = DMatrix::zeros(out_rows, a.cols);
        let mut jacs = Vec::with_capacity(if self.record { a.cols } else { 0 });
        for (j, col) in input.column_iter().enumerate() {
            let x = col.into_owned();
            value.set_column(j, &map.eval(&x));
            if self.record {
                jacs.push(map.jacobian(&x));
            }
        }
        Ok(self.push(value, Op::MapColumns(ia, Jacobians::PerColumn(jacs))))
    }

    /// Column-wise `K_j * dy_j` where column `j` of `gain` holds an `rows x n` matrix
    /// in row-major order, `K[i, k] = gain[i * n + k, j]`.
    pub fn gain_apply(&mut self, gain: Var, innovation: Var) -> Result<Var> {
        let (ig, iy) = (self.check(gain)?, self.check(innovation)?);
        let n = innovation.rows;
        if gain.cols != innovation.cols || n == 0 || gain.rows % n != 0 {
            return Err(Error::shape(format!("gain_apply: {:?} with {:?}", gain.shape(), innovation.shape())));
        }
        let m = gain.rows / n;
        let (k, dy) = (&self.nodes[ig].value, &self.nodes[iy].value);
        let value = DMatrix::from_fn(m, gain.cols, |i, j| (0..n).map(|c| k[(i * n + c, j)] * dy[(c, j)]).sum());
        Ok(self.push(value, Op::GainApply { gain: ig, innovation: iy }))
    }

    /// Scales each column to unit Euclidean norm; all-zero columns pass through.
    pub fn normalize_columns(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let mut value = self.nodes[ia].value.clone();
        let mut norms = Vec::with_capacity(a.cols);
        for mut col in value.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
            norms.push(norm);
        }
        Ok(self.push(value, Op::NormalizeColumns(ia, norms)))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ir = self.check(root)?;
        if root.shape() != (1, 1) {
            return Err(Error::Autodiff(format!("backward root must be scalar, got {:?}", root.shape())));
        }
        if !self.record {
            return Err(Error::Autodiff("tape records values only".into()));
        }
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; ir + 1];
        adj[ir] = Some(DMatrix::from_element(1, 1, 1.0));
        for id in (0..=ir).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients { tape: self.id, adj })
    }

    fn propagate(&self, node: &Node, g: &DMatrix<f64>, adj: &mut [Option<DMatrix<f64>>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                *slot(adj, *a, val(*a)) += g;
                *slot(adj, *b, val(*b)) += g;
            }
            Op::AddBias(a, b) => {
                *slot(adj, *a, val(*a)) += g;
                let bias = slot(adj, *b, val(*b));
                for col in g.column_iter() {
                    *bias += col;
                }
            }
            Op::Sub(a, b) => {
                *slot(adj, *a, val(*a)) += g;
                *slot(adj, *b, val(*b)) -= g;
            }
            Op::MatMul(a, b) => {
                *slot(adj, *a, val(*a)) += g * val(*b).transpose();
                slot(adj, *b, val(*b)).gemm_tr(1.0, val(*a), g, 1.0);
            }
            Op::Hadamard(a, b) => {
                *slot(adj, *a, val(*a)) += g.component_mul(val(*b));
                *slot(adj, *b, val(*b)) += g.component_mul(val(*a));
            }
            Op::Scale(a, c) => {
                *slot(adj, *a, val(*a)) += g * *c;
            }
            Op::Concat(ids) => {
                let mut at = 0;
                for id in ids {
                    let rows = val(*id).nrows();
                    *slot(adj, *id, val(*id)) += g.rows(at, rows);
                    at += rows;
                }
            }
            Op::Slice(a, start) => {
                let mut dst = slot(adj, *a, val(*a)).rows_mut(*start, g.nrows());
                dst += g;
            }
            Op::Tanh(a) => {
                let local = node.value.map(|y| 1.0 - y * y);
                *slot(adj, *a, val(*a)) += g.component_mul(&local);
            }
            Op::Sigmoid(a) => {
                let local = node.value.map(|y| y * (1.0 - y));
                *slot(adj, *a, val(*a)) += g.component_mul(&local);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let dst = slot(adj, *a, x);
                dst.zip_zip_apply(g, x, |d, gi, xi| {
                    if xi > 0.0 {
                        *d += gi;
                    }
                });
            }
            Op::Square(a) => {
                *slot(adj, *a, val(*a)) += g.component_mul(val(*a)) * 2.0;
            }
            Op::Sum(a) => {
                slot(adj, *a, val(*a)).add_scalar_mut(g[(0, 0)]);
            }
            Op::Mean(a) => {
                let count = val(*a).len() as f64;
                slot(adj, *a, val(*a)).add_scalar_mut(g[(0, 0)] / count);
            }
            Op::L2NormSq(a) => {
                *slot(adj, *a, val(*a)) += val(*a) * (2.0 * g[(0, 0)]);
            }
            Op::MapColumns(a, jac) => {
                let dst = slot(adj, *a, val(*a));
                match jac {
                    Jacobians::Shared(mat) => dst.gemm_tr(1.0, mat, g, 1.0),
                    Jacobians::PerColumn(jacs) => {
                        for (j, jm) in jacs.iter().enumerate() {
                            let mut col = dst.column_mut(j);
                            col.gemv_tr(1.0, jm, &g.column(j), 1.0);
                        }
                    }
                }
            }
            Op::GainApply { gain, innovation } => {
                let (k, dy) = (val(*gain), val(*innovation));
                let n = dy.nrows();
                let m = g.nrows();
                {
                    let dk = slot(adj, *gain, k);
                    for j in 0..g.ncols() {
                        for i in 0..m {
                            for c in 0..n {
                                dk[(i * n + c, j)] += g[(i, j)] * dy[(c, j)];
                            }
                        }
                    }
                }
                let ddy = slot(adj, *innovation, dy);
                for j in 0..g.ncols() {
                    for c in 0..n {
                        ddy[(c, j)] += (0..m).map(|i| g[(i, j)] * k[(i * n + c, j)]).sum::<f64>();
                    }
                }
            }
            Op::NormalizeColumns(a, norms) => {
                let y = &node.value;
                let dst = slot(adj, *a, val(*a));
                for (j, norm) in norms.iter().enumerate() {
                    if *norm > 0.0 {
                        let gj = g.column(j);
                        let yj = y.column(j);
                        let proj = gj.dot(&yj);
                        let mut col = dst.column_mut(j);
                        col += (gj - yj * proj) / *norm;
                    } else {
                        let mut col = dst.column_mut(j);
                        col += g.column(j);
                    }
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<DMatrix<f64>>], id: usize, like: &DMatrix<f64>) -> &'a mut DMatrix<f64> {
    adj[id].get_or_insert_with(|| DMatrix::zeros(like.nrows(), like.ncols()))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Adjoints of every node reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    adj: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> DMatrix<f64> {
        assert_eq!(v.tape, self.tape, "gradient requested for a variable of another tape");
        self.adj.get(v.id).and_then(|a| a.clone()).unwrap_or_else(|| DMatrix::zeros(v.rows, v.cols))
    }

    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        if v.tape != self.tape {
            return None;
        }
        self.adj.get(v.id).and_then(|a| a.as_ref())
    }
}
