//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Backward rules are
//! themselves written in terms of recorded primitives, so [`Tape::grad`] with
//! `create_graph = true` yields gradients that can be differentiated again. This is
//! what lets an unrolled inner training loop be back-propagated into the data it was
//! trained on.
//!
//! ```
//! use usbd_core::tape::Tape;
//! use usbd_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
//! let loss = x.frobenius_norm_sq();
//! let g = tape.gradients(loss, &[x]).unwrap();
//! assert_eq!(g[0].data(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Names of the recorded operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MulScalarVar,
    Sum,
    Expand,
    Trace,
    FrobeniusNormSq,
    Sigmoid,
    Relu,
    ClampMin,
    Exp,
    Log,
    Sqrt,
    Powf,
    LogSoftmaxRows,
    GatherRows,
    SegmentSum,
    MeanRows,
    SliceRows,
    PadRows,
    ConcatRows,
    PickCols,
    ScatterCols,
}

impl Primitive {
    pub const ALL: [Primitive; 30] = [
        Primitive::Leaf,
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::MulScalarVar,
        Primitive::Sum,
        Primitive::Expand,
        Primitive::Trace,
        Primitive::FrobeniusNormSq,
        Primitive::Sigmoid,
        Primitive::Relu,
        Primitive::ClampMin,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Sqrt,
        Primitive::Powf,
        Primitive::LogSoftmaxRows,
        Primitive::GatherRows,
        Primitive::SegmentSum,
        Primitive::MeanRows,
        Primitive::SliceRows,
        Primitive::PadRows,
        Primitive::ConcatRows,
        Primitive::PickCols,
        Primitive::ScatterCols,
    ];

    pub fn from_name(name: &str) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::MulScalarVar => "mul_scalar_var",
            Primitive::Sum => "sum",
            Primitive::Expand => "expand",
            Primitive::Trace => "trace",
            Primitive::FrobeniusNormSq => "frobenius_norm_sq",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::ClampMin => "clamp_min",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Powf => "powf",
            Primitive::LogSoftmaxRows => "log_softmax_rows",
            Primitive::GatherRows => "gather_rows",
            Primitive::SegmentSum => "segment_sum",
            Primitive::MeanRows => "mean_rows",
            Primitive::SliceRows => "slice_rows",
            Primitive::PadRows => "pad_rows",
            Primitive::ConcatRows => "concat_rows",
            Primitive::PickCols => "pick_cols",
            Primitive::ScatterCols => "scatter_cols",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[allow(dead_code)] // shape fields are only read through Debug
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MulScalarVar(usize, usize),
    Sum(usize),
    Expand(usize, usize, usize),
    Trace(usize),
    FrobeniusNormSq(usize),
    Sigmoid(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Powf(usize, f64),
    LogSoftmaxRows(usize),
    GatherRows(usize, Rc<[usize]>),
    SegmentSum(usize, Rc<[usize]>, usize),
    MeanRows(usize),
    SliceRows(usize, usize, usize),
    PadRows(usize, usize, usize),
    ConcatRows(Rc<[usize]>),
    PickCols(usize, Rc<[usize]>),
    ScatterCols(usize, Rc<[usize]>, usize),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::MulScalarVar(..) => Primitive::MulScalarVar,
            Op::Sum(_) => Primitive::Sum,
            Op::Expand(..) => Primitive::Expand,
            Op::Trace(_) => Primitive::Trace,
            Op::FrobeniusNormSq(_) => Primitive::FrobeniusNormSq,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Relu(_) => Primitive::Relu,
            Op::ClampMin(..) => Primitive::ClampMin,
            Op::Exp(_) => Primitive::Exp,
            Op::Log(_) => Primitive::Log,
            Op::Sqrt(_) => Primitive::Sqrt,
            Op::Powf(..) => Primitive::Powf,
            Op::LogSoftmaxRows(_) => Primitive::LogSoftmaxRows,
            Op::GatherRows(..) => Primitive::GatherRows,
            Op::SegmentSum(..) => Primitive::SegmentSum,
            Op::MeanRows(_) => Primitive::MeanRows,
            Op::SliceRows(..) => Primitive::SliceRows,
            Op::PadRows(..) => Primitive::PadRows,
            Op::ConcatRows(_) => Primitive::ConcatRows,
            Op::PickCols(..) => Primitive::PickCols,
            Op::ScatterCols(..) => Primitive::ScatterCols,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulScalarVar(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sum(a)
            | Op::Expand(a, ..)
            | Op::Trace(a)
            | Op::FrobeniusNormSq(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::ClampMin(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Powf(a, _)
            | Op::LogSoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::SegmentSum(a, ..)
            | Op::MeanRows(a)
            | Op::SliceRows(a, ..)
            | Op::PadRows(a, ..)
            | Op::PickCols(a, _)
            | Op::ScatterCols(a, ..) => vec![*a],
            Op::ConcatRows(parts) => parts.to_vec(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
    param: bool,
}

/// Append-only operation record. Node ids are topologically ordered by construction.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    fault: Cell<Option<Primitive>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor attached to a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_node.iter().map(|(k, v)| (*k, v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            fault: Cell::new(None),
        }
    }

    /// A tape whose backward rule for `primitive` is sign-flipped. Used to check
    /// that gradient oracles actually catch a broken rule.
    pub fn with_fault(primitive: Primitive) -> Self {
        let tape = Self::new();
        tape.fault.set(Some(primitive));
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            tracked: true,
            param: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            tracked: false,
            param: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = self.recording.get() && op.inputs().iter().any(|&i| nodes[i].tracked);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
            param: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Stacks tensors vertically.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_rows",
            lhs: (0, 0),
            rhs: (0, 0),
        })?;
        let cols = first.shape().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Rc<[usize]> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::from_vec(rows, cols, data)?, Op::ConcatRows(ids)))
    }

    /// Gradients of a scalar `loss` with respect to `wrt`.
    ///
    /// With `create_graph` the returned vars are themselves recorded and can be
    /// differentiated again; otherwise they are detached constants.
    pub fn grad<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        let (rows, cols) = loss.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalarLoss { rows, cols });
        }
        let end = loss.id + 1;
        let mut reach = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < end {
                    reach[w.id] = true;
                }
            }
            for id in 0..end {
                if !reach[id] && nodes[id].tracked {
                    reach[id] = nodes[id].op.inputs().iter().any(|&i| reach[i]);
                }
            }
        }

        let previous = self.recording.replace(create_graph);
        let result = self.accumulate(loss, end, &reach).map(|adj| {
            wrt.iter()
                .map(|w| match adj.get(w.id).copied().flatten() {
                    Some(g) if create_graph => g,
                    Some(g) => g.detach(),
                    None => {
                        let (r, c) = w.shape();
                        self.constant(Tensor::zeros(r, c))
                    }
                })
                .collect()
        });
        self.recording.set(previous);
        result
    }

    fn accumulate<'t>(
        &'t self,
        loss: Var<'t>,
        end: usize,
        reach: &[bool],
    ) -> Result<Vec<Option<Var<'t>>>> {
        let mut adj: Vec<Option<Var<'t>>> = vec![None; end];
        adj[loss.id] = Some(self.scalar(1.0));
        for id in (0..end).rev() {
            if !reach[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let flip = self.fault.get() == Some(op.primitive());
            let out = Var { tape: self, id };
            for (input, contrib) in self.backward_rule(&op, out, g, reach)? {
                let contrib = if flip { contrib.scale(-1.0) } else { contrib };
                adj[input] = Some(match adj[input] {
                    Some(acc) => acc.add(contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(adj)
    }

    /// Detached gradient values with respect to `wrt`.
    pub fn gradients<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Tensor>> {
        Ok(self
            .grad(loss, wrt, false)?
            .into_iter()
            .map(|g| (*g.value()).clone())
            .collect())
    }

    /// Gradients with respect to every parameter leaf recorded so far.
    pub fn backward<'t>(&'t self, loss: Var<'t>) -> Result<Gradients> {
        let params: Vec<Var<'t>> = {
            let nodes = self.nodes.borrow();
            (0..=loss.id.min(nodes.len() - 1))
                .filter(|&i| nodes[i].param)
                .map(|id| Var { tape: self, id })
                .collect()
        };
        let grads = self.gradients(loss, &params)?;
        Ok(Gradients {
            by_node: params.iter().map(|p| p.id).zip(grads).collect(),
        })
    }

    fn backward_rule<'t>(
        &'t self,
        op: &Op,
        out: Var<'t>,
        g: Var<'t>,
        reach: &[bool],
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let v = |id: usize| Var { tape: self, id };
        let need = |id: usize| reach[id];
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(a) {
                    res.push((a, g.matmul(v(b).t())?));
                }
                if need(b) {
                    res.push((b, v(a).t().matmul(g)?));
                }
            }
            Op::Transpose(a) => res.push((a, g.t())),
            Op::Add(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    res.push((a, g.mul(v(b))?));
                }
                if need(b) {
                    res.push((b, g.mul(v(a))?));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    res.push((a, g.div(v(b))?));
                }
                if need(b) {
                    res.push((b, g.mul(out)?.div(v(b))?.scale(-1.0)));
                }
            }
            Op::Scale(a, c) => res.push((a, g.scale(c))),
            Op::AddScalar(a, _) => res.push((a, g)),
            Op::MulScalarVar(a, s) => {
                if need(a) {
                    res.push((a, g.mul_scalar(v(s))?));
                }
                if need(s) {
                    res.push((s, g.mul(v(a))?.sum()));
                }
            }
            Op::Sum(a) => {
                let (r, c) = v(a).shape();
                res.push((a, g.expand(r, c)?));
            }
            Op::Expand(a, ..) => res.push((a, g.sum())),
            Op::Trace(a) => {
                let n = v(a).shape().0;
                let eye = self.constant(Tensor::identity(n));
                res.push((a, g.expand(n, n)?.mul(eye)?));
            }
            Op::FrobeniusNormSq(a) => {
                let (r, c) = v(a).shape();
                res.push((a, g.expand(r, c)?.mul(v(a))?.scale(2.0)));
            }
            Op::Sigmoid(a) => {
                let slope = out.mul(out.scale(-1.0).add_scalar(1.0))?;
                res.push((a, g.mul(slope)?));
            }
            Op::Relu(a) => {
                let mask = self.constant(v(a).value().map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                res.push((a, g.mul(mask)?));
            }
            Op::ClampMin(a, lo) => {
                let mask = self.constant(v(a).value().map(|x| if x > lo { 1.0 } else { 0.0 }));
                res.push((a, g.mul(mask)?));
            }
            Op::Exp(a) => res.push((a, g.mul(out)?)),
            Op::Log(a) => res.push((a, g.div(v(a))?)),
            Op::Sqrt(a) => res.push((a, g.div(out.scale(2.0))?)),
            Op::Powf(a, p) => res.push((a, g.mul(v(a).powf(p - 1.0).scale(p))?)),
            Op::LogSoftmaxRows(a) => {
                let (_, c) = v(a).shape();
                let ones_col = self.constant(Tensor::full(c, 1, 1.0));
                let ones_row = self.constant(Tensor::full(1, c, 1.0));
                let row_total = g.matmul(ones_col)?.matmul(ones_row)?;
                res.push((a, g.sub(out.exp().mul(row_total)?)?));
            }
            Op::GatherRows(a, ref idx) => {
                let n = v(a).shape().0;
                res.push((a, g.segment_sum(idx, n)?));
            }
            Op::SegmentSum(a, ref seg, _) => res.push((a, g.gather_rows(seg)?)),
            Op::MeanRows(a) => {
                let n = v(a).shape().0;
                res.push((a, g.gather_rows(&vec![0; n])?.scale(1.0 / n as f64)));
            }
            Op::SliceRows(a, start, _) => {
                let total = v(a).shape().0;
                res.push((a, g.pad_rows(start, total)?));
            }
            Op::PadRows(a, start, _) => {
                let len = v(a).shape().0;
                res.push((a, g.slice_rows(start, len)?));
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts.iter() {
                    let len = v(p).shape().0;
                    if need(p) {
                        res.push((p, g.slice_rows(offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::PickCols(a, ref idx) => {
                let c = v(a).shape().1;
                res.push((a, g.scatter_cols(idx, c)?));
            }
            Op::ScatterCols(a, ref idx, _) => res.push((a, g.pick_cols(idx)?)),
        }
        Ok(res)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Whether gradients can flow through this var.
    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Constant copy of the current value.
    pub fn detach(&self) -> Var<'t> {
        let value = (*self.value()).clone();
        self.tape.constant(value)
    }

    fn binary_same(&self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let a = self.value();
        let b = other.value();
        a.check_same(op, &b)?;
        Ok((a, b))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().transpose();
        self.tape.push(value, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same(other, "add")?;
        Ok(self
            .tape
            .push(a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same(other, "sub")?;
        Ok(self
            .tape
            .push(a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same(other, "mul")?;
        Ok(self
            .tape
            .push(a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same(other, "div")?;
        Ok(self
            .tape
            .push(a.zip_map(&b, |x, y| x / y), Op::Div(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().scale(c);
        self.tape.push(value, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().map(|x| x + c);
        self.tape.push(value, Op::AddScalar(self.id, c))
    }

    /// Multiplies every entry by the 1x1 var `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_var",
                lhs: self.shape(),
                rhs: sv.shape(),
            });
        }
        let c = sv.item();
        let value = self.value().scale(c);
        Ok(self.tape.push(value, Op::MulScalarVar(self.id, s.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(value, Op::Sum(self.id))
    }

    /// Broadcasts a 1x1 var to `rows` x `cols`.
    pub fn expand(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: v.shape(),
                rhs: (1, 1),
            });
        }
        Ok(self.tape.push(
            Tensor::full(rows, cols, v.item()),
            Op::Expand(self.id, rows, cols),
        ))
    }

    pub fn trace(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rows() != v.cols() {
            return Err(Error::ShapeMismatch {
                op: "trace",
                lhs: v.shape(),
                rhs: (v.cols(), v.rows()),
            });
        }
        Ok(self
            .tape
            .push(Tensor::scalar(v.trace()), Op::Trace(self.id)))
    }

    pub fn frobenius_norm_sq(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().frobenius_norm_sq());
        self.tape.push(value, Op::FrobeniusNormSq(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().map(sigmoid);
        self.tape.push(value, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.value().map(|x| x.max(0.0));
        self.tape.push(value, Op::Relu(self.id))
    }

    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        let value = self.value().map(|x| x.max(lo));
        self.tape.push(value, Op::ClampMin(self.id, lo))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        self.tape.push(value, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let value = self.value().map(f64::ln);
        self.tape.push(value, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.value().map(f64::sqrt);
        self.tape.push(value, Op::Sqrt(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let value = self.value().map(|x| x.powf(p));
        self.tape.push(value, Op::Powf(self.id, p))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let v = self.value();
        let mut out = (*v).clone();
        let cols = v.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.tape.push(out, Op::LogSoftmaxRows(self.id))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: v.rows(),
            });
        }
        let cols = v.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let value = Tensor::from_vec(idx.len(), cols, data)?;
        Ok(self.tape.push(value, Op::GatherRows(self.id, idx.into())))
    }

    /// Row `s` of the output sums the input rows whose segment id is `s`.
    pub fn segment_sum(self, segments: &[usize], num_segments: usize) -> Result<Var<'t>> {
        let v = self.value();
        if segments.len() != v.rows() {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                lhs: v.shape(),
                rhs: (segments.len(), 1),
            });
        }
        let cols = v.cols();
        let mut out = Tensor::zeros(num_segments, cols);
        for (i, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::IndexOutOfRange {
                    op: "segment_sum",
                    index: s,
                    bound: num_segments,
                });
            }
            let src = v.row(i);
            let dst = &mut out.data_mut()[s * cols..(s + 1) * cols];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += x;
            }
        }
        Ok(self.tape.push(
            out,
            Op::SegmentSum(self.id, segments.into(), num_segments),
        ))
    }

    /// Column means as a 1 x cols var.
    pub fn mean_rows(self) -> Var<'t> {
        let v = self.value();
        let n = v.rows() as f64;
        let value = Tensor::from_fn(1, v.cols(), |_, j| {
            (0..v.rows()).map(|i| v.get(i, j)).sum::<f64>() / n
        });
        self.tape.push(value, Op::MeanRows(self.id))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start + len > v.rows() {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: v.rows(),
            });
        }
        let c = v.cols();
        let value = Tensor::from_vec(len, c, v.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.tape.push(value, Op::SliceRows(self.id, start, len)))
    }

    /// Embeds this var at row `start` of a zero matrix with `total` rows.
    pub fn pad_rows(self, start: usize, total: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start + v.rows() > total {
            return Err(Error::IndexOutOfRange {
                op: "pad_rows",
                index: start + v.rows(),
                bound: total,
            });
        }
        let c = v.cols();
        let mut out = Tensor::zeros(total, c);
        out.data_mut()[start * c..(start + v.rows()) * c].copy_from_slice(v.data());
        Ok(self.tape.push(out, Op::PadRows(self.id, start, total)))
    }

    /// Picks entry `idx[i]` from row `i`, giving a column vector.
    pub fn pick_cols(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if idx.len() != v.rows() {
            return Err(Error::ShapeMismatch {
                op: "pick_cols",
                lhs: v.shape(),
                rhs: (idx.len(), 1),
            });
        }
        let mut data = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= v.cols() {
                return Err(Error::IndexOutOfRange {
                    op: "pick_cols",
                    index: j,
                    bound: v.cols(),
                });
            }
            data.push(v.get(i, j));
        }
        let value = Tensor::from_vec(idx.len(), 1, data)?;
        Ok(self.tape.push(value, Op::PickCols(self.id, idx.into())))
    }

    /// Places entry `i` of a column vector at column `idx[i]` of a zero matrix.
    pub fn scatter_cols(self, idx: &[usize], cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.cols() != 1 || idx.len() != v.rows() {
            return Err(Error::ShapeMismatch {
                op: "scatter_cols",
                lhs: v.shape(),
                rhs: (idx.len(), 1),
            });
        }
        let mut out = Tensor::zeros(v.rows(), cols);
        for (i, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_cols",
                    index: j,
                    bound: cols,
                });
            }
            out.set(i, j, v.get(i, 0));
        }
        Ok(self
            .tape
            .push(out, Op::ScatterCols(self.id, idx.into(), cols)))
    }

    /// Adds a 1 x cols row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let n = self.shape().0;
        self.add(row.gather_rows(&vec![0; n])?)
    }
}
