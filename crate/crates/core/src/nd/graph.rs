//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded in creation order into a [`Graph`]; that order is
//! a topological order by construction, and the backward pass replays it in
//! exact reverse. Every op validates shapes up front and rejects non-finite
//! results instead of propagating them.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nd::tensor::Tensor;

/// Handle to a node in one [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Handle to a trainable parameter in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Forward-pass mode. Dropout is active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named store of trainable parameter tensors, shared across graphs.
///
/// Registration order is fixed and doubles as the serialization order of
/// checkpoints, so gradient reduction and optimizer sweeps over the store
/// are deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    /// Registers a parameter under a unique name.
    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        assert!(value.all_finite(), "parameter {name} has non-finite values");
        self.entries.push((name.to_string(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}

/// Gradients keyed by parameter, in deterministic (id) order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(i, t)| (ParamId(*i), t))
    }

    fn add(&mut self, id: ParamId, shape: &[usize], grad: &[f64]) {
        let entry = self
            .by_param
            .entry(id.0)
            .or_insert_with(|| Tensor::zeros(shape));
        for (d, g) in entry.data_mut().iter_mut().zip(grad) {
            *d += g;
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul { a: NodeId, b: NodeId },
    MatVec { m: NodeId, v: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Softmax { x: NodeId },
    Log { x: NodeId },
    Sum { x: NodeId },
    Scale { x: NodeId, c: f64 },
    Concat { parts: Vec<NodeId> },
    StackRows { rows: Vec<NodeId> },
    Row { m: NodeId, index: usize },
    GatherRows { m: NodeId, ids: Vec<usize> },
    Pick { x: NodeId, index: usize },
    Dropout { x: NodeId, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded forward computation. One graph belongs to one worker at a
/// time; independent graphs may run concurrently against a read-shared
/// [`Params`] store.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Adds a constant (non-trainable) leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf { param: None })
    }

    /// Binds a parameter from the store as a trainable leaf. Its gradient is
    /// reported under `id` by [`Graph::backward`].
    pub fn param(&mut self, id: ParamId, store: &Params) -> NodeId {
        self.push_unchecked(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(value, op))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av.data()[i * k + p];
                let brow = &bv.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bj) in orow.iter_mut().zip(brow) {
                    *o += aip * bj;
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out).map_err(|_| Error::NonFinite { op: "matmul" })?;
        self.push("matmul", value, Op::MatMul { a, b })
    }

    /// Matrix–vector product: rank-2 times rank-1.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.shape().len() != 2 || vv.shape().len() != 1 || mv.cols() != vv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: mv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let (rows, cols) = (mv.rows(), mv.cols());
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let mrow = &mv.data()[i * cols..(i + 1) * cols];
            out[i] = mrow.iter().zip(vv.data()).map(|(a, b)| a * b).sum();
        }
        let value =
            Tensor::from_vec(&[rows], out).map_err(|_| Error::NonFinite { op: "matvec" })?;
        self.push("matvec", value, Op::MatVec { m, v })
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = av.shape().to_vec();
        let value = Tensor::from_vec(&shape, data).map_err(|_| Error::NonFinite { op: op_name })?;
        self.push(op_name, value, op)
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    /// Elementwise (Hadamard) product of two equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|v| f(*v)).collect();
        let shape = xv.shape().to_vec();
        let value = Tensor::from_vec(&shape, data).map_err(|_| Error::NonFinite { op: op_name })?;
        self.push(op_name, value, op)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("tanh", x, f64::tanh, Op::Tanh { x })
    }

    /// Elementwise natural log. Non-positive inputs are a non-finite error.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("log", x, f64::ln, Op::Log { x })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary("scale", x, |v| c * v, Op::Scale { x, c })
    }

    /// Max-shifted softmax over a rank-1 tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.numel() == 0 {
            return Err(Error::InvalidArgument(format!(
                "softmax wants a non-empty vector, got shape {:?}",
                xv.shape()
            )));
        }
        let max = xv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let shape = xv.shape().to_vec();
        let value =
            Tensor::from_vec(&shape, data).map_err(|_| Error::NonFinite { op: "softmax" })?;
        self.push("softmax", value, Op::Softmax { x })
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { x })
    }

    /// Concatenation of rank-1 tensors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.shape().len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "concat wants vectors, got shape {:?}",
                    pv.shape()
                )));
            }
            data.extend_from_slice(pv.data());
        }
        let n = data.len();
        let value = Tensor::from_vec(&[n], data).map_err(|_| Error::NonFinite { op: "concat" })?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// Stacks equally sized rank-1 tensors into a rank-2 tensor, one per row.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("stack_rows of zero rows".into()));
        }
        let width = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let rv = self.value(*r);
            if rv.shape().len() != 1 || rv.numel() != width {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: rv.shape().to_vec(),
                });
            }
            data.extend_from_slice(rv.data());
        }
        let value = Tensor::from_vec(&[rows.len(), width], data)
            .map_err(|_| Error::NonFinite { op: "stack_rows" })?;
        self.push(
            "stack_rows",
            value,
            Op::StackRows {
                rows: rows.to_vec(),
            },
        )
    }

    /// Extracts row `index` of a rank-2 tensor as a vector.
    pub fn row(&mut self, m: NodeId, index: usize) -> Result<NodeId> {
        let mv = self.value(m);
        if mv.shape().len() != 2 || index >= mv.rows() {
            return Err(Error::InvalidArgument(format!(
                "row {} out of range for shape {:?}",
                index,
                mv.shape()
            )));
        }
        let cols = mv.cols();
        let data = mv.data()[index * cols..(index + 1) * cols].to_vec();
        let value = Tensor::from_vec(&[cols], data).map_err(|_| Error::NonFinite { op: "row" })?;
        self.push("row", value, Op::Row { m, index })
    }

    /// Gathers rows of a rank-2 tensor by index; duplicate indices are
    /// allowed and accumulate gradient into the same source row.
    pub fn gather_rows(&mut self, m: NodeId, ids: &[usize]) -> Result<NodeId> {
        let mv = self.value(m);
        if mv.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "gather_rows wants a matrix, got shape {:?}",
                mv.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather_rows of zero rows".into()));
        }
        let (rows, cols) = (mv.rows(), mv.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for id in ids {
            if *id >= rows {
                return Err(Error::InvalidArgument(format!(
                    "row id {id} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&mv.data()[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::from_vec(&[ids.len(), cols], data)
            .map_err(|_| Error::NonFinite { op: "gather_rows" })?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                m,
                ids: ids.to_vec(),
            },
        )
    }

    /// Selects one element of a rank-1 tensor as a scalar.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || index >= xv.numel() {
            return Err(Error::InvalidArgument(format!(
                "pick {} out of range for shape {:?}",
                index,
                xv.shape()
            )));
        }
        let v = xv.data()[index];
        self.push("pick", Tensor::scalar(v), Op::Pick { x, index })
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`, so eval
    /// mode is a pure identity (the input node is returned unchanged).
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f64> = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        let value =
            Tensor::from_vec(&shape, data).map_err(|_| Error::NonFinite { op: "dropout" })?;
        self.push("dropout", value, Op::Dropout { x, mask })
    }

    /// Reverse-mode sweep from a scalar loss node. Returns one gradient per
    /// trainable leaf bound in this graph; leaves the loss does not reach
    /// get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        out.add(*pid, self.nodes[id].value.shape(), &g);
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = G · Bᵀ
                    let da = self.ensure(&mut grads, *a);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                    // dB = Aᵀ · G
                    let db = self.ensure(&mut grads, *b);
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av.data()[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += s;
                        }
                    }
                }
                Op::MatVec { m, v } => {
                    let (mv, vv) = (self.value(*m), self.value(*v));
                    let (rows, cols) = (mv.rows(), mv.cols());
                    let dm = self.ensure(&mut grads, *m);
                    for i in 0..rows {
                        for j in 0..cols {
                            dm[i * cols + j] += g[i] * vv.data()[j];
                        }
                    }
                    let dv = self.ensure(&mut grads, *v);
                    for i in 0..rows {
                        for j in 0..cols {
                            dv[j] += mv.data()[i * cols + j] * g[i];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let da = self.ensure(&mut grads, *a);
                    for (d, gi) in da.iter_mut().zip(&g) {
                        *d += gi;
                    }
                    let db = self.ensure(&mut grads, *b);
                    for (d, gi) in db.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Mul { a, b } => {
                    let bv: Vec<f64> = self.value(*b).data().to_vec();
                    let av: Vec<f64> = self.value(*a).data().to_vec();
                    let da = self.ensure(&mut grads, *a);
                    for ((d, gi), bi) in da.iter_mut().zip(&g).zip(&bv) {
                        *d += gi * bi;
                    }
                    let db = self.ensure(&mut grads, *b);
                    for ((d, gi), ai) in db.iter_mut().zip(&g).zip(&av) {
                        *d += gi * ai;
                    }
                }
                Op::Sigmoid { x } => {
                    let s: Vec<f64> = self.nodes[id].value.data().to_vec();
                    let dx = self.ensure(&mut grads, *x);
                    for ((d, gi), si) in dx.iter_mut().zip(&g).zip(&s) {
                        *d += gi * si * (1.0 - si);
                    }
                }
                Op::Tanh { x } => {
                    let u: Vec<f64> = self.nodes[id].value.data().to_vec();
                    let dx = self.ensure(&mut grads, *x);
                    for ((d, gi), ui) in dx.iter_mut().zip(&g).zip(&u) {
                        *d += gi * (1.0 - ui * ui);
                    }
                }
                Op::Softmax { x } => {
                    let p: Vec<f64> = self.nodes[id].value.data().to_vec();
                    let dot: f64 = g.iter().zip(&p).map(|(gi, pi)| gi * pi).sum();
                    let dx = self.ensure(&mut grads, *x);
                    for ((d, gi), pi) in dx.iter_mut().zip(&g).zip(&p) {
                        *d += pi * (gi - dot);
                    }
                }
                Op::Log { x } => {
                    let xv: Vec<f64> = self.value(*x).data().to_vec();
                    let dx = self.ensure(&mut grads, *x);
                    for ((d, gi), xi) in dx.iter_mut().zip(&g).zip(&xv) {
                        *d += gi / xi;
                    }
                }
                Op::Sum { x } => {
                    let dx = self.ensure(&mut grads, *x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    let dx = self.ensure(&mut grads, *x);
                    for (d, gi) in dx.iter_mut().zip(&g) {
                        *d += c * gi;
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let len = self.value(p).numel();
                        let dp = self.ensure(&mut grads, p);
                        for (d, gi) in dp.iter_mut().zip(&g[offset..offset + len]) {
                            *d += gi;
                        }
                        offset += len;
                    }
                }
                Op::StackRows { rows } => {
                    let width = self.value(rows[0]).numel();
                    for (i, r) in rows.clone().iter().enumerate() {
                        let dr = self.ensure(&mut grads, *r);
                        for (d, gi) in dr.iter_mut().zip(&g[i * width..(i + 1) * width]) {
                            *d += gi;
                        }
                    }
                }
                Op::Row { m, index } => {
                    let cols = self.value(*m).cols();
                    let start = index * cols;
                    let dm = self.ensure(&mut grads, *m);
                    for (d, gi) in dm[start..start + cols].iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::GatherRows { m, ids } => {
                    let cols = self.value(*m).cols();
                    let ids = ids.clone();
                    let dm = self.ensure(&mut grads, *m);
                    for (j, src) in ids.iter().enumerate() {
                        let start = src * cols;
                        for (d, gi) in dm[start..start + cols].iter_mut().zip(&g[j * cols..]) {
                            *d += gi;
                        }
                    }
                }
                Op::Pick { x, index } => {
                    let index = *index;
                    let dx = self.ensure(&mut grads, *x);
                    dx[index] += g[0];
                }
                Op::Dropout { x, mask } => {
                    let mask = mask.clone();
                    let dx = self.ensure(&mut grads, *x);
                    for ((d, gi), mi) in dx.iter_mut().zip(&g).zip(&mask) {
                        *d += gi * mi;
                    }
                }
            }
        }

        // Trainable leaves the loss never reached still report zeros.
        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if out.get(pid).is_none() {
                    out.add(pid, node.value.shape(), &vec![0.0; node.value.numel()]);
                }
            }
        }
        Ok(out)
    }

    fn ensure<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> &'g mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    // Independent check: same product, different loop structure.
    fn oracle_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.input(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = g.input(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let a = g.input(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let z = g.input(Tensor::zeros(&[2, 2]));
        let c = g.matmul(a, z).unwrap();
        assert_eq!(g.value(c).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let b =
            Tensor::from_vec(&[4, 2], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let expect = oracle_matmul(&a, &b);
        let mut g = Graph::new();
        let an = g.input(a);
        let bn = g.input(b);
        let c = g.matmul(an, bn).unwrap();
        for (got, want) in g.value(c).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(t2(2, 3, &[0.0; 6]));
        let b = g.input(t2(2, 2, &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn pointwise_identities() {
        let mut g = Graph::new();
        let zero = g.input(t1(&[0.0]));
        let s = g.sigmoid(zero).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let t = g.tanh(zero).unwrap();
        assert_eq!(g.value(t).data()[0], 0.0);

        // sigmoid(x) + sigmoid(-x) == 1 on sampled points
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..32 {
            let x: f64 = rng.gen_range(-8.0..8.0);
            let xp = g.input(t1(&[x]));
            let xn = g.input(t1(&[-x]));
            let sp = g.sigmoid(xp).unwrap();
            let sn = g.sigmoid(xn).unwrap();
            let total = g.value(sp).data()[0] + g.value(sn).data()[0];
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pointwise_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.input(t1(&[1.0, 2.0]));
        let b = g.input(t1(&[1.0, 2.0, 3.0]));
        assert!(matches!(
            g.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
        assert!(matches!(
            g.mul(a, b),
            Err(Error::ShapeMismatch { op: "mul", .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_single() {
        let mut g = Graph::new();
        let c = g.input(t1(&[2.5, 2.5, 2.5]));
        let p = g.softmax(c).unwrap();
        for v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = g.input(t1(&[-4.0]));
        let p1 = g.softmax(one).unwrap();
        assert_eq!(g.value(p1).data(), &[1.0]);
    }

    #[test]
    fn softmax_shift_invariance_and_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..9);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let shift: f64 = rng.gen_range(-100.0..100.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let mut g = Graph::new();
            let a = g.input(t1(&v));
            let b = g.input(t1(&shifted));
            let pa = g.softmax(a).unwrap();
            let pb = g.softmax(b).unwrap();
            let sum: f64 = g.value(pa).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(g.value(pa).data().iter().all(|p| *p >= 0.0));
            for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_empty_is_an_error() {
        let mut g = Graph::new();
        let e = g.input(Tensor::zeros(&[0]));
        assert!(g.softmax(e).is_err());
    }

    #[test]
    fn backward_quadratic() {
        // loss = sum(p ⊙ p) at p = [1, 2] → grad [2, 4]
        let mut store = Params::new();
        let p = store.register("p", t1(&[1.0, 2.0]));
        let mut g = Graph::new();
        let pn = g.param(p, &store);
        let sq = g.mul(pn, pn).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_unused_param_gets_zero() {
        let mut store = Params::new();
        let p = store.register("p", t1(&[1.0, 2.0]));
        let q = store.register("q", t1(&[3.0]));
        let mut g = Graph::new();
        let pn = g.param(p, &store);
        let _qn = g.param(q, &store);
        let loss = g.sum(pn).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(q).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let v = g.input(t1(&[1.0, 2.0]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn backward_duplicate_bindings_accumulate() {
        // Two leaves bound to the same parameter must sum their gradients.
        let mut store = Params::new();
        let p = store.register("p", t1(&[2.0]));
        let mut g = Graph::new();
        let a = g.param(p, &store);
        let b = g.param(p, &store);
        let prod = g.mul(a, b).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        // d(p·p)/dp = 2p = 4
        assert_eq!(grads.get(p).unwrap().data(), &[4.0]);
    }

    #[test]
    fn gather_and_pick_gradients() {
        let mut store = Params::new();
        let m = store.register("m", t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut g = Graph::new();
        let mn = g.param(m, &store);
        let gathered = g.gather_rows(mn, &[1, 1]).unwrap();
        assert_eq!(g.value(gathered).data(), &[3.0, 4.0, 3.0, 4.0]);
        let loss = g.sum(gathered).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(m).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.input(t1(&[1.0, 2.0, 3.0]));
        let same = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(same, x);
        let same = g.dropout(x, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.input(t1(&[1.0]));
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(g.dropout(x, 1.5, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[n], 1.0));
        let d = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean: f64 = g.value(d).data().iter().sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let run = || {
            let mut store = Params::new();
            let w = store.register("w", t2(2, 3, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let wn = g.param(w, &store);
            let x = g.input(t1(&[1.0, -1.0, 0.5]));
            let y = g.matvec(wn, x).unwrap();
            let yd = g.dropout(y, 0.5, Mode::Train, &mut rng).unwrap();
            let s = g.sigmoid(yd).unwrap();
            let loss = g.sum(s).unwrap();
            let grads = g.backward(loss).unwrap();
            (
                g.value(loss).scalar_value().to_bits(),
                grads
                    .get(w)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
