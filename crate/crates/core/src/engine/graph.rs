//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, so node ids are already a topological order and [`Graph::backward`]
//! is a single reverse sweep. Parameters enter the graph through
//! [`Graph::with_params`], which places parameter `i` at node `i`; the
//! resulting [`Gradients`] are indexed by [`ParamId`].
//!
//! Non-differentiable points take fixed one-sided choices: `relu'(0) = 0`
//! and the pinball derivative at zero residual takes the `u >= 0` branch.

use super::params::{ParamId, ParamSet};
use super::{EngineError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operation set.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `[n, k] x [k, m] -> [n, m]`.
    MatMul,
    /// Elementwise; the right operand may broadcast over leading axes when its
    /// shape equals a suffix of the left shape (bias addition).
    Add,
    Sub,
    Hadamard,
    ScalarMul(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    /// 2-D transpose.
    Transpose,
    Sigmoid,
    Tanh,
    Relu,
    /// Input `[B, L, C_in]`, kernel `[K, C_in, C_out]`, stride 1, valid padding.
    Conv1d,
    /// Input `[B, H, W, C_in]`, kernel `[KH, KW, C_in, C_out]`, stride 1, valid padding.
    Conv2d,
    ReduceMean,
    ReduceSum,
    /// Reverses axis 1 (the time axis of `[B, T, ..]`), or axis 0 for rank 1.
    ReverseTime,
    /// Check loss applied to a residual `u = y - y_hat`: `q*u` when `u >= 0`,
    /// `(q-1)*u` otherwise. Levels broadcast along the last axis.
    Pinball(Vec<f64>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::ScalarMul(_) => "scalar-mul",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Conv1d => "conv1d",
            OpKind::Conv2d => "conv2d",
            OpKind::ReduceMean => "reduce-mean",
            OpKind::ReduceSum => "reduce-sum",
            OpKind::ReverseTime => "reverse-time",
            OpKind::Pinball(_) => "pinball-residual-branch",
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Input,
    Param,
    Op(OpKind),
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient of a scalar loss with respect to each parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    /// One tensor per parameter, in parameter order.
    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    n_params: usize,
    track_kinks: bool,
    kinks: Vec<i8>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose first `params.len()` nodes are the parameter leaves.
    pub fn with_params(params: &ParamSet) -> Self {
        let nodes = params
            .iter()
            .map(|(_, _, t)| Node {
                kind: NodeKind::Param,
                inputs: Vec::new(),
                value: t.clone(),
                requires_grad: true,
            })
            .collect();
        Self {
            nodes,
            n_params: params.len(),
            track_kinks: false,
            kinks: Vec::new(),
        }
    }

    /// Record the sign of every input to a non-differentiable op
    /// (relu, pinball), exposed through [`Graph::kink_signature`].
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_signature(&self) -> &[i8] {
        &self.kinks
    }

    pub fn param(&self, id: ParamId) -> NodeId {
        assert!(id.0 < self.n_params, "parameter {} not registered", id.0);
        NodeId(id.0)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Input, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        kind: NodeKind,
        inputs: Vec<NodeId>,
        value: Tensor,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluate `op` on `inputs` and record the node.
    pub fn apply(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId, EngineError> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let value = forward_value(&op, &values)?;
        if !value.all_finite() {
            return Err(EngineError::NonFinite { op: op.name() });
        }
        if self.track_kinks {
            match &op {
                OpKind::Relu | OpKind::Pinball(_) => {
                    let signs = values[0].data().iter().map(|&v| {
                        if v > 0.0 {
                            1
                        } else if v < 0.0 {
                            -1
                        } else {
                            0
                        }
                    });
                    self.kinks.extend(signs);
                }
                _ => {}
            }
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(NodeKind::Op(op), inputs.to_vec(), value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Hadamard, &[a, b])
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId, EngineError> {
        self.apply(OpKind::ScalarMul(c), &[a])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Concat { axis }, inputs)
    }

    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Slice { axis, start, len }, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn conv1d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Conv1d, &[input, kernel])
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Conv2d, &[input, kernel])
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::ReduceMean, &[a])
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::ReduceSum, &[a])
    }

    pub fn reverse_time(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::ReverseTime, &[a])
    }

    pub fn pinball(&mut self, residual: NodeId, levels: &[f64]) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Pinball(levels.to_vec()), &[residual])
    }

    /// Reverse sweep from a scalar node. Consumes the graph.
    pub fn backward(self, loss: NodeId) -> Result<Gradients, EngineError> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(EngineError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_vec(loss_value.shape(), vec![1.0])?);

        for idx in (self.n_params..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let NodeKind::Op(op) = &node.kind else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = backward_op(op, &inputs, &node.value, &upstream)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let grads = (0..self.n_params)
            .map(|i| {
                grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .map_or_else(|| Tensor::zeros(self.nodes[i].value.shape()), Ok)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Gradients { grads })
    }
}

fn shape_err(op: &OpKind, lhs: &[usize], rhs: &[usize]) -> EngineError {
    EngineError::Shape {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn expect_arity(op: &OpKind, inputs: &[&Tensor], n: usize) -> Result<(), EngineError> {
    if inputs.len() != n {
        return Err(EngineError::Arity {
            op: op.name(),
            expected: n,
            got: inputs.len(),
        });
    }
    Ok(())
}

/// `c[n, m] (+)= a[n, k] * b[k, m]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= n * m);
    // SAFETY: the strides describe in-bounds row-major / transposed views of
    // `a` ([n, k]) and `b` ([k, m]); `c` holds n*m contiguous outputs.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Leading-axis broadcast factor when `rhs` shape is a suffix of `lhs` shape.
fn broadcast_factor(op: &OpKind, lhs: &Tensor, rhs: &Tensor) -> Result<usize, EngineError> {
    let (ls, rs) = (lhs.shape(), rhs.shape());
    if ls == rs {
        return Ok(1);
    }
    if rs.len() < ls.len() && ls.ends_with(rs) {
        return Ok(lhs.len() / rhs.len());
    }
    Err(shape_err(op, ls, rs))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward_value(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor, EngineError> {
    match op {
        OpKind::MatMul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(op, a.shape(), b.shape()));
            }
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, a.data(), (k as isize, 1), b.data(), (m as isize, 1), &mut out);
            Tensor::from_vec(&[n, m], out)
        }
        OpKind::Add | OpKind::Sub | OpKind::Hadamard => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            broadcast_factor(op, a, b)?;
            let bl = b.len();
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[i % bl];
                    match op {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            Tensor::from_vec(a.shape(), data)
        }
        OpKind::ScalarMul(c) => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(|x| c * x))
        }
        OpKind::Concat { axis } => {
            let first = inputs.first().ok_or(EngineError::Arity {
                op: op.name(),
                expected: 1,
                got: 0,
            })?;
            let axis = *axis;
            if axis >= first.rank() {
                return Err(shape_err(op, first.shape(), &[axis]));
            }
            let mut total = 0;
            for t in inputs {
                let same_rank = t.rank() == first.rank();
                let same_other = same_rank
                    && t
                        .shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !same_other {
                    return Err(shape_err(op, first.shape(), t.shape()));
                }
                total += t.shape()[axis];
            }
            let (outer, _, inner) = axis_split(first.shape(), axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = total;
            Tensor::from_vec(&shape, data)
        }
        OpKind::Slice { axis, start, len } => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            let (axis, start, len) = (*axis, *start, *len);
            if axis >= a.rank() || len == 0 || start + len > a.shape()[axis] {
                return Err(shape_err(op, a.shape(), &[axis, start, len]));
            }
            let (outer, extent, inner) = axis_split(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Tensor::from_vec(&shape, data)
        }
        OpKind::Reshape(shape) => {
            expect_arity(op, inputs, 1)?;
            inputs[0].clone().reshaped(shape)
        }
        OpKind::Transpose => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(shape_err(op, a.shape(), &[2]));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::from_vec(&[c, r], data)
        }
        OpKind::Sigmoid => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(sigmoid))
        }
        OpKind::Tanh => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(f64::tanh))
        }
        OpKind::Relu => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(|x| if x > 0.0 { x } else { 0.0 }))
        }
        OpKind::Conv1d => {
            expect_arity(op, inputs, 2)?;
            let (x, w) = (inputs[0], inputs[1]);
            let dims = conv1d_dims(op, x, w)?;
            let mut out = vec![0.0; dims.batch * dims.out_len * dims.c_out];
            conv1d_forward(&dims, x.data(), w.data(), &mut out);
            Tensor::from_vec(&[dims.batch, dims.out_len, dims.c_out], out)
        }
        OpKind::Conv2d => {
            expect_arity(op, inputs, 2)?;
            let (x, w) = (inputs[0], inputs[1]);
            let dims = conv2d_dims(op, x, w)?;
            let mut out = vec![0.0; dims.batch * dims.out_h * dims.out_w * dims.c_out];
            conv2d_accumulate(&dims, x.data(), w.data(), &mut out, Conv2dPass::Forward);
            Tensor::from_vec(&[dims.batch, dims.out_h, dims.out_w, dims.c_out], out)
        }
        OpKind::ReduceMean => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            Ok(Tensor::scalar(a.sum() / a.len() as f64))
        }
        OpKind::ReduceSum => {
            expect_arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].sum()))
        }
        OpKind::ReverseTime => {
            expect_arity(op, inputs, 1)?;
            Ok(reverse_time(inputs[0]))
        }
        OpKind::Pinball(levels) => {
            expect_arity(op, inputs, 1)?;
            let u = inputs[0];
            let k = levels.len();
            if k == 0 || u.shape().last() != Some(&k) {
                return Err(shape_err(op, u.shape(), &[k]));
            }
            let data = u
                .data()
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    let q = levels[i % k];
                    if r >= 0.0 {
                        q * r
                    } else {
                        (q - 1.0) * r
                    }
                })
                .collect();
            Tensor::from_vec(u.shape(), data)
        }
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

fn reverse_time(a: &Tensor) -> Tensor {
    let axis = if a.rank() >= 2 { 1 } else { 0 };
    let (outer, extent, inner) = axis_split(a.shape(), axis);
    let mut data = Vec::with_capacity(a.len());
    for o in 0..outer {
        for t in (0..extent).rev() {
            let base = (o * extent + t) * inner;
            data.extend_from_slice(&a.data()[base..base + inner]);
        }
    }
    Tensor::from_vec(a.shape(), data).expect("reverse preserves shape")
}

struct Conv1dDims {
    batch: usize,
    len: usize,
    c_in: usize,
    kernel: usize,
    c_out: usize,
    out_len: usize,
}

fn conv1d_dims(op: &OpKind, x: &Tensor, w: &Tensor) -> Result<Conv1dDims, EngineError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] || ws[0] > xs[1] {
        return Err(shape_err(op, xs, ws));
    }
    Ok(Conv1dDims {
        batch: xs[0],
        len: xs[1],
        c_in: xs[2],
        kernel: ws[0],
        c_out: ws[2],
        out_len: xs[1] - ws[0] + 1,
    })
}

fn conv1d_forward(d: &Conv1dDims, x: &[f64], w: &[f64], out: &mut [f64]) {
    for b in 0..d.batch {
        for t in 0..d.out_len {
            let o_row = &mut out[(b * d.out_len + t) * d.c_out..][..d.c_out];
            for k in 0..d.kernel {
                for c in 0..d.c_in {
                    let xv = x[(b * d.len + t + k) * d.c_in + c];
                    let w_row = &w[(k * d.c_in + c) * d.c_out..][..d.c_out];
                    for (o, wv) in o_row.iter_mut().zip(w_row) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
}

struct Conv2dDims {
    batch: usize,
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    out_h: usize,
    out_w: usize,
}

fn conv2d_dims(op: &OpKind, x: &Tensor, k: &Tensor) -> Result<Conv2dDims, EngineError> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] || ks[0] > xs[1] || ks[1] > xs[2] {
        return Err(shape_err(op, xs, ks));
    }
    Ok(Conv2dDims {
        batch: xs[0],
        h: xs[1],
        w: xs[2],
        c_in: xs[3],
        kh: ks[0],
        kw: ks[1],
        c_out: ks[3],
        out_h: xs[1] - ks[0] + 1,
        out_w: xs[2] - ks[1] + 1,
    })
}

enum Conv2dPass<'a> {
    Forward,
    /// Accumulate input gradient from the given upstream.
    InputGrad(&'a [f64]),
    /// Accumulate kernel gradient from the given upstream.
    KernelGrad(&'a [f64]),
}

/// One loop nest serves all three conv2d passes; `target` is the output
/// buffer, the input gradient or the kernel gradient respectively.
fn conv2d_accumulate(d: &Conv2dDims, x: &[f64], k: &[f64], target: &mut [f64], pass: Conv2dPass) {
    for b in 0..d.batch {
        for i in 0..d.out_h {
            for j in 0..d.out_w {
                let o_base = ((b * d.out_h + i) * d.out_w + j) * d.c_out;
                for p in 0..d.kh {
                    for q in 0..d.kw {
                        for c in 0..d.c_in {
                            let x_idx = ((b * d.h + i + p) * d.w + j + q) * d.c_in + c;
                            let k_base = ((p * d.kw + q) * d.c_in + c) * d.c_out;
                            for o in 0..d.c_out {
                                match pass {
                                    Conv2dPass::Forward => {
                                        target[o_base + o] += x[x_idx] * k[k_base + o]
                                    }
                                    Conv2dPass::InputGrad(up) => {
                                        target[x_idx] += up[o_base + o] * k[k_base + o]
                                    }
                                    Conv2dPass::KernelGrad(up) => {
                                        target[k_base + o] += up[o_base + o] * x[x_idx]
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Reduce a full-shape gradient onto a (possibly broadcast) operand shape.
fn unbroadcast(full: Vec<f64>, target: &Tensor) -> Result<Tensor, EngineError> {
    let n = target.len();
    if full.len() == n {
        return Tensor::from_vec(target.shape(), full);
    }
    let mut acc = vec![0.0; n];
    for (i, v) in full.into_iter().enumerate() {
        acc[i % n] += v;
    }
    Tensor::from_vec(target.shape(), acc)
}

fn backward_op(
    op: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    up: &Tensor,
) -> Result<Vec<Option<Tensor>>, EngineError> {
    let g = up.data();
    Ok(match op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            // dA = dC * B^T : [n, m] x [m, k]
            let mut da = vec![0.0; n * k];
            gemm(n, m, k, g, (m as isize, 1), b.data(), (1, m as isize), &mut da);
            // dB = A^T * dC : [k, n] x [n, m]
            let mut db = vec![0.0; k * m];
            gemm(k, n, m, a.data(), (1, k as isize), g, (m as isize, 1), &mut db);
            vec![
                Some(Tensor::from_vec(a.shape(), da)?),
                Some(Tensor::from_vec(b.shape(), db)?),
            ]
        }
        OpKind::Add => vec![
            Some(up.clone()),
            Some(unbroadcast(g.to_vec(), inputs[1])?),
        ],
        OpKind::Sub => vec![
            Some(up.clone()),
            Some(unbroadcast(g.iter().map(|v| -v).collect(), inputs[1])?),
        ],
        OpKind::Hadamard => {
            let (a, b) = (inputs[0], inputs[1]);
            let bl = b.len();
            let ga = g
                .iter()
                .enumerate()
                .map(|(i, v)| v * b.data()[i % bl])
                .collect();
            let gb = g.iter().zip(a.data()).map(|(v, x)| v * x).collect();
            vec![
                Some(Tensor::from_vec(a.shape(), ga)?),
                Some(unbroadcast(gb, b)?),
            ]
        }
        OpKind::ScalarMul(c) => vec![Some(up.map(|v| c * v))],
        OpKind::Concat { axis } => {
            let axis = *axis;
            let (outer, total, inner) = axis_split(output.shape(), axis);
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for t in inputs {
                let len = t.shape()[axis];
                let mut data = Vec::with_capacity(t.len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    data.extend_from_slice(&g[base..base + len * inner]);
                }
                offset += len;
                out.push(Some(Tensor::from_vec(t.shape(), data)?));
            }
            out
        }
        OpKind::Slice { axis, start, len } => {
            let a = inputs[0];
            let (outer, extent, inner) = axis_split(a.shape(), *axis);
            let mut data = vec![0.0; a.len()];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(Tensor::from_vec(a.shape(), data)?)]
        }
        OpKind::Reshape(_) => vec![Some(up.clone().reshaped(inputs[0].shape())?)],
        OpKind::Transpose => {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(Tensor::from_vec(&[r, c], data)?)]
        }
        OpKind::Sigmoid => {
            let data = g
                .iter()
                .zip(output.data())
                .map(|(v, s)| v * s * (1.0 - s))
                .collect();
            vec![Some(Tensor::from_vec(output.shape(), data)?)]
        }
        OpKind::Tanh => {
            let data = g
                .iter()
                .zip(output.data())
                .map(|(v, t)| v * (1.0 - t * t))
                .collect();
            vec![Some(Tensor::from_vec(output.shape(), data)?)]
        }
        OpKind::Relu => {
            let data = g
                .iter()
                .zip(inputs[0].data())
                .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_vec(output.shape(), data)?)]
        }
        OpKind::Conv1d => {
            let (x, w) = (inputs[0], inputs[1]);
            let d = conv1d_dims(op, x, w)?;
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            for b in 0..d.batch {
                for t in 0..d.out_len {
                    let g_row = &g[(b * d.out_len + t) * d.c_out..][..d.c_out];
                    for k in 0..d.kernel {
                        for c in 0..d.c_in {
                            let xi = (b * d.len + t + k) * d.c_in + c;
                            let wi = (k * d.c_in + c) * d.c_out;
                            let mut acc = 0.0;
                            for (o, gv) in g_row.iter().enumerate() {
                                acc += gv * w.data()[wi + o];
                                gw[wi + o] += gv * x.data()[xi];
                            }
                            gx[xi] += acc;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(x.shape(), gx)?),
                Some(Tensor::from_vec(w.shape(), gw)?),
            ]
        }
        OpKind::Conv2d => {
            let (x, k) = (inputs[0], inputs[1]);
            let d = conv2d_dims(op, x, k)?;
            let mut gx = vec![0.0; x.len()];
            let mut gk = vec![0.0; k.len()];
            conv2d_accumulate(&d, x.data(), k.data(), &mut gx, Conv2dPass::InputGrad(g));
            conv2d_accumulate(&d, x.data(), k.data(), &mut gk, Conv2dPass::KernelGrad(g));
            vec![
                Some(Tensor::from_vec(x.shape(), gx)?),
                Some(Tensor::from_vec(k.shape(), gk)?),
            ]
        }
        OpKind::ReduceMean => {
            let a = inputs[0];
            let v = g[0] / a.len() as f64;
            vec![Some(Tensor::from_vec(a.shape(), vec![v; a.len()])?)]
        }
        OpKind::ReduceSum => {
            let a = inputs[0];
            vec![Some(Tensor::from_vec(a.shape(), vec![g[0]; a.len()])?)]
        }
        OpKind::ReverseTime => vec![Some(reverse_time(up))],
        OpKind::Pinball(levels) => {
            let k = levels.len();
            let data = g
                .iter()
                .zip(inputs[0].data())
                .enumerate()
                .map(|(i, (v, &r))| {
                    let q = levels[i % k];
                    if r >= 0.0 {
                        v * q
                    } else {
                        v * (q - 1.0)
                    }
                })
                .collect();
            vec![Some(Tensor::from_vec(output.shape(), data)?)]
        }
    })
}
