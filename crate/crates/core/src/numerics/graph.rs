//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each builder method runs
//! the forward computation eagerly and appends a node; [`Graph::backward`]
//! walks the tape once in reverse and returns a [`Gradients`] table.
//! Parameters live in a [`ParamStore`] borrowed by the graph, so leaf
//! values are never copied onto the tape.

use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberately wrong backward rules, used to confirm that the gradient
/// checker notices broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Sigmoid backward multiplies by `1.5·s(1−s)` instead of `s(1−s)`.
    Sigmoid,
    /// PReLU backward drops the slope gradient.
    PreluSlope,
}

/// Normalization plan for one block of rows.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub rows: Vec<usize>,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// True when `mean`/`inv_std` were computed from the rows themselves
    /// (and are therefore differentiated through); false when they are
    /// externally supplied constants.
    pub from_batch: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Neg(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Prelu(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Column(Var, usize),
    GatherRows { table: Var, index: Rc<[usize]> },
    SegmentMean { table: Var, segments: Rc<[Vec<usize>]> },
    ConcatCols(Vec<Var>),
    NormalizeGroups { x: Var, groups: Rc<[GroupStats]> },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            fault: None,
        }
    }

    /// A graph with no parameter store; only explicit leaves are available.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store().value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding `value`; gradients are reported for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let needs = self.store().get(id).requires_grad;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- linear

    /// `a · b` for matrices (1-D operands are single rows).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).rows_cols();
        let (br, bc) = self.value(b).rows_cols();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            ar,
            ac,
            ta,
            self.value(b).data(),
            br,
            bc,
            tb,
            &mut out,
            false,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb },
            needs,
        ))
    }

    // ----------------------------------------------------------- elementwise

    fn broadcast_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.len() == 1 {
            Ok(sa.shape().to_vec())
        } else if sa.len() == 1 {
            Ok(sb.shape().to_vec())
        } else {
            Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} are not broadcast-compatible",
                sa.shape(),
                sb.shape()
            )))
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let shape = self.broadcast_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match (va.len(), vb.len()) {
            (x, y) if x == y => va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect(),
            (1, _) => vb.data().iter().map(|&q| f(va.item(), q)).collect(),
            _ => va.data().iter().map(|&p| f(p, vb.item())).collect(),
        };
        debug_assert_eq!(data.len(), n);
        Ok((Tensor::new(shape, data)?, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// Adds a bias row (length = column count of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        if self.value(bias).len() != c {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match columns of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), needs))
    }

    /// Multiplies row `i` of `x` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        if self.value(w).len() != r {
            return Err(Error::Dimension(format!(
                "row weights {:?} do not match rows of {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let wv = self.value(w).data();
        for i in 0..r {
            for o in &mut out[i * c..(i + 1) * c] {
                *o *= wv[i];
            }
        }
        let needs = self.needs(x) || self.needs(w);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows(x, w), needs))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// `ln(1 + eˣ)` evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Parametric ReLU with one learnable scalar slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return Err(Error::Dimension(format!(
                "prelu slope must be scalar, got {:?}",
                self.shape(slope)
            )));
        }
        let a = self.value(slope).item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| if v > 0.0 { v } else { a * v }).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(slope);
        Ok(self.push(t, Op::Prelu(x, slope), needs))
    }

    // ------------------------------------------------------------ reductions

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::Dimension("softmax of empty input".into()));
        }
        let t = softmax_rows_values(va);
        let needs = self.needs(a);
        Ok(self.push(t, Op::SoftmaxRows(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Sums each row, producing an `r × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = va.rows_cols();
        let data = (0..r).map(|i| va.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let needs = self.needs(a);
        self.push(Tensor::new(vec![r, 1], data).unwrap(), Op::SumCols(a), needs)
    }

    /// Column `j` of a matrix as an `r × 1` column.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = va.rows_cols();
        if j >= c {
            return Err(Error::Dimension(format!("column {j} of {:?}", va.shape())));
        }
        let data = (0..r).map(|i| va.data()[i * c + j]).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![r, 1], data)?, Op::Column(a, j), needs))
    }

    /// Row-wise inner product of two equally shaped matrices (`r × 1`).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "row_dot of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let p = self.mul(a, b)?;
        Ok(self.sum_cols(p))
    }

    // -------------------------------------------------------------- indexing

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, index: Rc<[usize]>) -> Result<Var> {
        let vt = self.value(table);
        let (r, c) = vt.rows_cols();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= r {
                return Err(Error::Lookup(format!("row {i} out of range for table with {r} rows")));
            }
            out.extend_from_slice(&vt.data()[i * c..(i + 1) * c]);
        }
        if index.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        let t = Tensor::new(vec![index.len(), c], out)?;
        let needs = self.needs(table);
        Ok(self.push(t, Op::GatherRows { table, index }, needs))
    }

    /// Row `i` of the output is the mean of the `table` rows listed in
    /// `segments[i]`, or zero when that list is empty.
    pub fn segment_mean(&mut self, table: Var, segments: Rc<[Vec<usize>]>) -> Result<Var> {
        let vt = self.value(table);
        let (r, c) = vt.rows_cols();
        if segments.is_empty() {
            return Err(Error::Dimension("segment_mean of zero segments".into()));
        }
        let mut out = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                continue;
            }
            let dst = &mut out[s * c..(s + 1) * c];
            for &i in seg {
                if i >= r {
                    return Err(Error::Lookup(format!("row {i} out of range for table with {r} rows")));
                }
                for (d, v) in dst.iter_mut().zip(&vt.data()[i * c..(i + 1) * c]) {
                    *d += v;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let t = Tensor::new(vec![segments.len(), c], out)?;
        let needs = self.needs(table);
        Ok(self.push(t, Op::SegmentMean { table, segments }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat row counts differ: {rows} vs {r}"
                )));
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            let c = vp.cols();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c].copy_from_slice(vp.row(i));
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Standardizes each block of rows with its own per-column statistics:
    /// `(x − mean)·inv_std`. Blocks must partition the rows of `x`.
    pub fn normalize_groups(&mut self, x: Var, groups: Vec<GroupStats>) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.rows_cols();
        let mut covered = vec![false; r];
        let mut out = vec![0.0; r * c];
        for g in &groups {
            if g.mean.len() != c || g.inv_std.len() != c {
                return Err(Error::Dimension(format!(
                    "group statistics of width {} for {c} columns",
                    g.mean.len()
                )));
            }
            for &i in &g.rows {
                if i >= r || covered[i] {
                    return Err(Error::Contract(format!("row {i} not covered exactly once")));
                }
                covered[i] = true;
                for j in 0..c {
                    out[i * c + j] = (vx.data()[i * c + j] - g.mean[j]) * g.inv_std[j];
                }
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Contract("normalization groups do not cover every row".into()));
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(
            t,
            Op::NormalizeGroups {
                x,
                groups: groups.into(),
            },
            needs,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        if self.value(seed).len() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.shape(seed)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(vec![1.0]);

        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(Var(idx), &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients {
            grads: HashMap::new(),
            params: Vec::new(),
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param);
            if !(is_leaf && node.needs_grad) {
                continue;
            }
            let shape = self.value(Var(idx)).shape().to_vec();
            let data = grads[idx]
                .take()
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            let t = Tensor::new(shape, data)?;
            if let Value::Param(id) = node.value {
                out.params.push((id, Var(idx)));
            }
            out.grads.insert(Var(idx), t);
        }
        Ok(out)
    }

    fn propagate(&self, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[out.0];
        let y = self.value(out);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ar, ac) = va.rows_cols();
                let (br, bc) = vb.rows_cols();
                let (m, n) = y.rows_cols();
                if self.needs(*a) {
                    let da = slot(grads, *a, va.len());
                    if *ta {
                        gemm(vb.data(), br, bc, *tb, g, m, n, true, da, true);
                    } else {
                        gemm(g, m, n, false, vb.data(), br, bc, !*tb, da, true);
                    }
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, vb.len());
                    if *tb {
                        gemm(g, m, n, true, va.data(), ar, ac, *ta, db, true);
                    } else {
                        gemm(va.data(), ar, ac, !*ta, g, m, n, false, db, true);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate_broadcast(*a, g, 1.0, grads);
                self.accumulate_broadcast(*b, g, sign, grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let prod = elementwise_with(g, vb.data(), |gi, q| gi * q);
                    self.accumulate_broadcast(*a, &prod, 1.0, grads);
                }
                if self.needs(*b) {
                    let prod = elementwise_with(g, va.data(), |gi, p| gi * p);
                    self.accumulate_broadcast(*b, &prod, 1.0, grads);
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.needs(*bias) {
                    let c = self.value(*bias).len();
                    let db = slot(grads, *bias, c);
                    for chunk in g.chunks(c) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::ScaleRows(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let c = vx.cols();
                if self.needs(*x) {
                    let dx = slot(grads, *x, vx.len());
                    for (i, (dst, src)) in dx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let wi = vw.data()[i];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s * wi;
                        }
                    }
                }
                if self.needs(*w) {
                    let dw = slot(grads, *w, vw.len());
                    for (i, (gs, xs)) in g.chunks(c).zip(vx.data().chunks(c)).enumerate() {
                        dw[i] += gs.iter().zip(xs).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
            Op::Neg(a) => {
                let da = slot(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
            }
            Op::Sigmoid(a) => {
                let k = if self.fault == Some(BackwardFault::Sigmoid) { 1.5 } else { 1.0 };
                let da = slot(grads, *a, g.len());
                for ((d, gi), s) in da.iter_mut().zip(g).zip(y.data()) {
                    *d += k * gi * s * (1.0 - s);
                }
            }
            Op::Exp(a) => {
                let da = slot(grads, *a, g.len());
                for ((d, gi), e) in da.iter_mut().zip(g).zip(y.data()) {
                    *d += gi * e;
                }
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                let da = slot(grads, *a, g.len());
                for ((d, gi), x) in da.iter_mut().zip(g).zip(va) {
                    *d += gi / x;
                }
            }
            Op::Softplus(a) => {
                let va = self.value(*a).data();
                let da = slot(grads, *a, g.len());
                for ((d, gi), x) in da.iter_mut().zip(g).zip(va) {
                    *d += gi * sigmoid(*x);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                let dx = slot(grads, *x, g.len());
                for ((d, gi), v) in dx.iter_mut().zip(g).zip(vx) {
                    if *v >= *lo && *v <= *hi {
                        *d += gi;
                    }
                }
            }
            Op::Prelu(x, slope) => {
                let vx = self.value(*x).data();
                let a = self.value(*slope).item();
                if self.needs(*x) {
                    let dx = slot(grads, *x, g.len());
                    for ((d, gi), v) in dx.iter_mut().zip(g).zip(vx) {
                        *d += if *v > 0.0 { *gi } else { a * gi };
                    }
                }
                if self.needs(*slope) && self.fault != Some(BackwardFault::PreluSlope) {
                    let s: f64 = vx
                        .iter()
                        .zip(g)
                        .filter(|(v, _)| **v <= 0.0)
                        .map(|(v, gi)| v * gi)
                        .sum();
                    slot(grads, *slope, 1)[0] += s;
                }
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                let da = slot(grads, *a, g.len());
                for ((dst, gs), ys) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = gs.iter().zip(ys).map(|(p, q)| p * q).sum();
                    for ((d, gi), yi) in dst.iter_mut().zip(gs).zip(ys) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                slot(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g[0] / n as f64;
                slot(grads, *a, n).iter_mut().for_each(|d| *d += v);
            }
            Op::SumCols(a) => {
                let va = self.value(*a);
                let c = va.cols();
                let da = slot(grads, *a, va.len());
                for (dst, gi) in da.chunks_mut(c).zip(g) {
                    dst.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Column(a, j) => {
                let va = self.value(*a);
                let c = va.cols();
                let da = slot(grads, *a, va.len());
                for (i, gi) in g.iter().enumerate() {
                    da[i * c + j] += gi;
                }
            }
            Op::GatherRows { table, index } => {
                let vt = self.value(*table);
                let c = vt.cols();
                let dt = slot(grads, *table, vt.len());
                for (k, &i) in index.iter().enumerate() {
                    add_into(&mut dt[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::SegmentMean { table, segments } => {
                let vt = self.value(*table);
                let c = vt.cols();
                let dt = slot(grads, *table, vt.len());
                for (s, seg) in segments.iter().enumerate() {
                    if seg.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / seg.len() as f64;
                    for &i in seg {
                        for (d, gi) in dt[i * c..(i + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                            *d += gi * inv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let dp = slot(grads, p, rows * c);
                        for i in 0..rows {
                            add_into(
                                &mut dp[i * c..(i + 1) * c],
                                &g[i * total + offset..i * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::NormalizeGroups { x, groups } => {
                let c = y.cols();
                let dx = slot(grads, *x, g.len());
                for grp in groups.iter() {
                    if grp.from_batch {
                        let n = grp.rows.len() as f64;
                        for j in 0..c {
                            let mut sum_g = 0.0;
                            let mut sum_gy = 0.0;
                            for &i in &grp.rows {
                                sum_g += g[i * c + j];
                                sum_gy += g[i * c + j] * y.data()[i * c + j];
                            }
                            for &i in &grp.rows {
                                let k = i * c + j;
                                dx[k] += grp.inv_std[j] / n * (n * g[k] - sum_g - y.data()[k] * sum_gy);
                            }
                        }
                    } else {
                        for &i in &grp.rows {
                            for j in 0..c {
                                dx[i * c + j] += g[i * c + j] * grp.inv_std[j];
                            }
                        }
                    }
                }
            }
        }
    }

    fn accumulate_broadcast(&self, target: Var, g: &[f64], sign: f64, grads: &mut [Option<Vec<f64>>]) {
        if !self.needs(target) {
            return;
        }
        let n = self.value(target).len();
        let dst = slot(grads, target, n);
        if n == g.len() {
            for (d, gi) in dst.iter_mut().zip(g) {
                *d += sign * gi;
            }
        } else {
            dst[0] += sign * g.iter().sum::<f64>();
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Pairs `g` with `other`, broadcasting a length-1 `other`.
fn elementwise_with(g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if other.len() == 1 {
        g.iter().map(|&a| f(a, other[0])).collect()
    } else {
        g.iter().zip(other).map(|(&a, &b)| f(a, b)).collect()
    }
}

/// Result of [`Graph::backward`]: gradients for every leaf that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads.get(v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, v)| (*p, &self.grads[v]))
    }

    /// Adds every parameter gradient into `store`'s accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.params() {
            store.accumulate(id, g.data());
        }
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax of a value tensor, outside any graph.
pub fn softmax_rows_values(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}
