use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{invalid, GradStore, ParamStore, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives understood by [`Graph::apply`].
#[derive(Clone, Debug)]
pub enum Primitive {
    /// `a (m x k) * b (k x n)`
    MatMul,
    /// `a (m x k) * b^T` with `b` stored as `n x k`.
    MatMulNT,
    Transpose,
    /// Elementwise with broadcasting of the second operand (scalar, row or `[rows, 1]` column).
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    /// Softmax over the last axis.
    Softmax,
    LogSoftmax,
    /// Inputs: `x`, gain, bias. Normalises over the last axis.
    LayerNorm {
        eps: f64,
    },
    /// Multiplies by a supplied mask (already scaled by `1 / keep`).
    Dropout(Arc<Vec<f64>>),
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Row gather over the matrix view of the input.
    Gather(Arc<Vec<usize>>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Vec<usize>),
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulNT => "matmul_nt",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Dropout(_) => "dropout",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Gather(_) => "gather",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape(_) => "reshape",
            Primitive::SumAll => "sum",
            Primitive::MeanAll => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::MatMulNT | Primitive::Add | Primitive::Sub | Primitive::Mul => Some(2),
            Primitive::LayerNorm { .. } => Some(3),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
        }
    }

    fn resolve(primitive: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast, TensorError> {
        if a.shape() == b.shape() {
            Ok(Bcast::Same)
        } else if b.len() == 1 {
            Ok(Bcast::Scalar)
        } else if b.len() == a.cols() && (b.rank() == 1 || b.rows() == 1) && a.rank() >= 1 {
            Ok(Bcast::Row)
        } else if a.rank() == 2 && b.shape() == [a.rows(), 1] {
            Ok(Bcast::Col)
        } else {
            Err(TensorError::ShapeMismatch {
                primitive,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    }
}

enum Op {
    Leaf,
    Prim(Primitive, Bcast),
    /// Scalar-valued function whose gradient was computed alongside its value.
    ScalarFn(Arc<Tensor>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// A tape of primitive applications. Nodes are appended in evaluation order,
/// which is a valid topological order; backward walks it in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    frozen: Vec<String>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            frozen: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Parameters whose name starts with one of `prefixes` enter the graph as
    /// constants.
    pub fn freeze_prefixes<I, S>(&mut self, prefixes: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.frozen.extend(prefixes.into_iter().map(Into::into));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Arc::new(value), Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor>) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    /// Binds a named parameter from `store`, reusing the leaf on repeat calls.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .get_arc(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Op::Leaf, Vec::new(), trainable);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters bound so far, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn value_arc(&self, var: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[var.0].value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Applies `kind` to `inputs` and records the result.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(invalid(
                    kind.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(invalid(kind.name(), "expected at least one input"));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
        let (out, bcast) = forward(&kind, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Arc::new(out), Op::Prim(kind, bcast), inputs.to_vec(), requires_grad))
    }

    /// Records a scalar function of `input` whose value and gradient were
    /// computed by the caller (used for fused losses such as CTC).
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Tensor) -> Result<Var, TensorError> {
        let in_shape = self.value(input).shape().to_vec();
        if local_grad.shape() != in_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                primitive: "scalar_fn",
                lhs: in_shape,
                rhs: local_grad.shape().to_vec(),
            });
        }
        let requires_grad = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Arc::new(Tensor::scalar(value)),
            Op::ScalarFn(Arc::new(local_grad)),
            vec![input],
            requires_grad,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMulNT, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::AddScalar(s), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }
    pub fn dropout(&mut self, a: Var, mask: Arc<Vec<f64>>) -> Result<Var, TensorError> {
        self.apply(Primitive::Dropout(mask), &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, TensorError> {
        self.apply(Primitive::Gather(Arc::new(idx)), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        self.apply(Primitive::Reshape(shape), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::SumAll, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MeanAll, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::MeanAxis(axis), &[a])
    }

    /// Reverse pass from a scalar `root`. Nodes are visited in exact reverse
    /// recording order and contributions are summed in that order.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Adds `scale * dL/dp` for every trainable bound parameter into `into`.
    /// Parameters not reached by the backward pass contribute zeros.
    pub fn accumulate_param_grads(&self, grads: &Gradients, into: &mut GradStore, scale: f64) {
        for (name, var) in &self.params {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            let len = self.nodes[var.0].value.len();
            let acc = into.entry(name, len);
            if let Some(g) = grads.get(*var) {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += scale * x;
                }
            }
        }
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ins = &node.inputs;
        let y = node.value.as_ref();
        let val = |k: usize| self.nodes[ins[k].0].value.as_ref();
        let needs = |k: usize| self.nodes[ins[k].0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::ScalarFn(local) => {
                if needs(0) {
                    let ga = slot(grads, ins[0], local.len());
                    for (g, &l) in ga.iter_mut().zip(local.data()) {
                        *g += gout[0] * l;
                    }
                }
            }
            Op::Prim(prim, bc) => match prim {
                Primitive::MatMul => {
                    let (a, b) = (val(0), val(1));
                    let (m, k, n) = (a.rows(), a.cols(), b.cols());
                    if needs(0) {
                        gemm_nt(gout, b.data(), slot(grads, ins[0], m * k), m, n, k);
                    }
                    if needs(1) {
                        gemm_tn(a.data(), gout, slot(grads, ins[1], k * n), m, k, n);
                    }
                }
                Primitive::MatMulNT => {
                    let (a, b) = (val(0), val(1));
                    let (m, k, n) = (a.rows(), a.cols(), b.rows());
                    if needs(0) {
                        gemm_nn(gout, b.data(), slot(grads, ins[0], m * k), m, n, k);
                    }
                    if needs(1) {
                        gemm_tn(gout, a.data(), slot(grads, ins[1], n * k), m, n, k);
                    }
                }
                Primitive::Transpose => {
                    if needs(0) {
                        let a = val(0);
                        let (r, c) = (a.rows(), a.cols());
                        let ga = slot(grads, ins[0], r * c);
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += gout[j * r + i];
                            }
                        }
                    }
                }
                Primitive::Add | Primitive::Sub => {
                    let sign = if matches!(prim, Primitive::Sub) { -1.0 } else { 1.0 };
                    if needs(0) {
                        let ga = slot(grads, ins[0], gout.len());
                        for (g, &x) in ga.iter_mut().zip(gout) {
                            *g += x;
                        }
                    }
                    if needs(1) {
                        let cols = val(0).cols();
                        let gb = slot(grads, ins[1], val(1).len());
                        for (i, &x) in gout.iter().enumerate() {
                            gb[bc.index(i, cols)] += sign * x;
                        }
                    }
                }
                Primitive::Mul => {
                    let (a, b) = (val(0), val(1));
                    let cols = a.cols();
                    if needs(0) {
                        let ga = slot(grads, ins[0], a.len());
                        for (i, g) in ga.iter_mut().enumerate() {
                            *g += gout[i] * b.data()[bc.index(i, cols)];
                        }
                    }
                    if needs(1) {
                        let gb = slot(grads, ins[1], b.len());
                        for (i, &x) in gout.iter().enumerate() {
                            gb[bc.index(i, cols)] += x * a.data()[i];
                        }
                    }
                }
                Primitive::Scale(s) => {
                    if needs(0) {
                        let ga = slot(grads, ins[0], gout.len());
                        for (g, &x) in ga.iter_mut().zip(gout) {
                            *g += s * x;
                        }
                    }
                }
                Primitive::AddScalar(_) | Primitive::Reshape(_) => {
                    if needs(0) {
                        let ga = slot(grads, ins[0], gout.len());
                        for (g, &x) in ga.iter_mut().zip(gout) {
                            *g += x;
                        }
                    }
                }
                Primitive::Exp => unary(grads, ins[0], needs(0), gout, |i| y.data()[i]),
                Primitive::Log => {
                    let a = val(0);
                    unary(grads, ins[0], needs(0), gout, |i| 1.0 / a.data()[i])
                }
                Primitive::Sigmoid => unary(grads, ins[0], needs(0), gout, |i| {
                    let s = y.data()[i];
                    s * (1.0 - s)
                }),
                Primitive::Tanh => unary(grads, ins[0], needs(0), gout, |i| {
                    let t = y.data()[i];
                    1.0 - t * t
                }),
                Primitive::Relu => {
                    let a = val(0);
                    unary(
                        grads,
                        ins[0],
                        needs(0),
                        gout,
                        |i| if a.data()[i] > 0.0 { 1.0 } else { 0.0 },
                    )
                }
                Primitive::Clamp { lo, hi } => {
                    let a = val(0);
                    unary(grads, ins[0], needs(0), gout, |i| {
                        let x = a.data()[i];
                        if x >= *lo && x <= *hi {
                            1.0
                        } else {
                            0.0
                        }
                    })
                }
                Primitive::Dropout(mask) => unary(grads, ins[0], needs(0), gout, |i| mask[i]),
                Primitive::Softmax => {
                    if needs(0) {
                        let cols = y.cols();
                        let ga = slot(grads, ins[0], y.len());
                        for r in 0..y.rows() {
                            let yr = &y.data()[r * cols..(r + 1) * cols];
                            let gr = &gout[r * cols..(r + 1) * cols];
                            let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                ga[r * cols + c] += yr[c] * (gr[c] - dotp);
                            }
                        }
                    }
                }
                Primitive::LogSoftmax => {
                    if needs(0) {
                        let cols = y.cols();
                        let ga = slot(grads, ins[0], y.len());
                        for r in 0..y.rows() {
                            let yr = &y.data()[r * cols..(r + 1) * cols];
                            let gr = &gout[r * cols..(r + 1) * cols];
                            let gsum: f64 = gr.iter().sum();
                            for c in 0..cols {
                                ga[r * cols + c] += gr[c] - yr[c].exp() * gsum;
                            }
                        }
                    }
                }
                Primitive::LayerNorm { eps } => {
                    let (x, gain) = (val(0), val(1));
                    let cols = x.cols();
                    let rows = x.rows();
                    let mut gx = vec![0.0; x.len()];
                    let mut ggain = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let xr = x.row(r);
                        let (mean, rstd) = moments(xr, *eps);
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            xhat[c] = (xr[c] - mean) * rstd;
                            dxhat[c] = gr[c] * gain.data()[c];
                            ggain[c] += gr[c] * xhat[c];
                            gbias[c] += gr[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xhat[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                    for (k, g) in [(0usize, gx), (1, ggain), (2, gbias)] {
                        if needs(k) {
                            let dst = slot(grads, ins[k], g.len());
                            for (d, v) in dst.iter_mut().zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
                Primitive::Gather(idx) => {
                    if needs(0) {
                        let a = val(0);
                        let cols = a.cols();
                        let ga = slot(grads, ins[0], a.len());
                        for (r, &src) in idx.iter().enumerate() {
                            for c in 0..cols {
                                ga[src * cols + c] += gout[r * cols + c];
                            }
                        }
                    }
                }
                Primitive::Concat { axis } => {
                    let (outer, _, inner) = split_axis(y.shape(), *axis);
                    let total = y.shape()[*axis];
                    let mut offset = 0;
                    for (k, v) in ins.iter().enumerate() {
                        let part = val(k);
                        let dim = part.shape()[*axis];
                        if needs(k) {
                            let gp = slot(grads, *v, part.len());
                            for o in 0..outer {
                                let src = &gout[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                                let dst = &mut gp[o * dim * inner..(o + 1) * dim * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        offset += dim;
                    }
                }
                Primitive::Slice { axis, start, len } => {
                    if needs(0) {
                        let a = val(0);
                        let (outer, dim, inner) = split_axis(a.shape(), *axis);
                        let ga = slot(grads, ins[0], a.len());
                        for o in 0..outer {
                            let dst = &mut ga[(o * dim + start) * inner..(o * dim + start + len) * inner];
                            let src = &gout[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                Primitive::SumAll | Primitive::MeanAll => {
                    if needs(0) {
                        let n = val(0).len();
                        let g = if matches!(prim, Primitive::MeanAll) {
                            gout[0] / n as f64
                        } else {
                            gout[0]
                        };
                        for x in slot(grads, ins[0], n).iter_mut() {
                            *x += g;
                        }
                    }
                }
                Primitive::SumAxis(axis) | Primitive::MeanAxis(axis) => {
                    if needs(0) {
                        let a = val(0);
                        let (outer, dim, inner) = split_axis(a.shape(), *axis);
                        let scale = if matches!(prim, Primitive::MeanAxis(_)) {
                            1.0 / dim as f64
                        } else {
                            1.0
                        };
                        let ga = slot(grads, ins[0], a.len());
                        for o in 0..outer {
                            for d in 0..dim {
                                for i in 0..inner {
                                    ga[(o * dim + d) * inner + i] += scale * gout[o * inner + i];
                                }
                            }
                        }
                    }
                }
            },
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn unary(grads: &mut [Option<Vec<f64>>], v: Var, needed: bool, gout: &[f64], local: impl Fn(usize) -> f64) {
    if !needed {
        return;
    }
    let ga = slot(grads, v, gout.len());
    for (i, g) in ga.iter_mut().enumerate() {
        *g += gout[i] * local(i);
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().map(|&x| f(x)).collect(),
    }
}

fn mismatch(primitive: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        primitive,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

fn forward(kind: &Primitive, v: &[&Tensor]) -> Result<(Tensor, Bcast), TensorError> {
    let name = kind.name();
    let out = match kind {
        Primitive::MatMul => {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(mismatch(name, a, b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut out, m, k, n);
            Tensor::matrix(m, n, out)?
        }
        Primitive::MatMulNT => {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                return Err(mismatch(name, a, b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let mut out = vec![0.0; m * n];
            gemm_nt(a.data(), b.data(), &mut out, m, k, n);
            Tensor::matrix(m, n, out)?
        }
        Primitive::Transpose => {
            let a = v[0];
            if a.rank() != 2 {
                return Err(invalid(name, format!("expected a matrix, got shape {:?}", a.shape())));
            }
            let (r, c) = (a.rows(), a.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, out)?
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (v[0], v[1]);
            let bc = Bcast::resolve(name, a, b)?;
            let cols = a.cols();
            let bd = b.data();
            let data: Vec<f64> = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[bc.index(i, cols)];
                    match kind {
                        Primitive::Add => x + y,
                        Primitive::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            return Ok((Tensor::new(a.shape().to_vec(), data)?, bc));
        }
        Primitive::Scale(s) => map(v[0], |x| x * s),
        Primitive::AddScalar(s) => map(v[0], |x| x + s),
        Primitive::Exp => map(v[0], f64::exp),
        Primitive::Log => map(v[0], f64::ln),
        Primitive::Sigmoid => map(v[0], sigmoid),
        Primitive::Tanh => map(v[0], f64::tanh),
        Primitive::Relu => map(v[0], |x| x.max(0.0)),
        Primitive::Clamp { lo, hi } => {
            if lo > hi {
                return Err(invalid(name, format!("empty interval [{lo}, {hi}]")));
            }
            map(v[0], |x| x.clamp(*lo, *hi))
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            let a = v[0];
            let cols = a.cols();
            if cols == 0 {
                return Err(invalid(name, "last axis is empty"));
            }
            let mut out = vec![0.0; a.len()];
            for r in 0..a.rows() {
                let row = a.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let dst = &mut out[r * cols..(r + 1) * cols];
                let mut z = 0.0;
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d = (x - m).exp();
                    z += *d;
                }
                if matches!(kind, Primitive::Softmax) {
                    for d in dst.iter_mut() {
                        *d /= z;
                    }
                } else {
                    let lz = m + z.ln();
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = x - lz;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), out)?
        }
        Primitive::LayerNorm { eps } => {
            let (x, gain, bias) = (v[0], v[1], v[2]);
            let cols = x.cols();
            if gain.len() != cols {
                return Err(mismatch(name, x, gain));
            }
            if bias.len() != cols {
                return Err(mismatch(name, x, bias));
            }
            let mut out = vec![0.0; x.len()];
            for r in 0..x.rows() {
                let xr = x.row(r);
                let (mean, rstd) = moments(xr, *eps);
                for c in 0..cols {
                    out[r * cols + c] = (xr[c] - mean) * rstd * gain.data()[c] + bias.data()[c];
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        }
        Primitive::Dropout(mask) => {
            let a = v[0];
            if mask.len() != a.len() {
                return Err(TensorError::ShapeMismatch {
                    primitive: name,
                    lhs: a.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
            )?
        }
        Primitive::Gather(idx) => {
            let a = v[0];
            let rows = if a.rank() <= 1 { a.len() } else { a.rows() };
            let table = if a.rank() <= 1 {
                a.reshape(vec![rows, 1])?
            } else {
                a.clone()
            };
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(invalid(name, format!("row index {bad} out of range for {rows} rows")));
            }
            let out = table.select_rows(idx);
            if a.rank() <= 1 {
                out.reshape(vec![idx.len()])?
            } else {
                out
            }
        }
        Primitive::Concat { axis } => {
            let first = v[0];
            if *axis >= first.rank() {
                return Err(invalid(
                    name,
                    format!("axis {axis} out of range for shape {:?}", first.shape()),
                ));
            }
            let mut total = 0;
            for t in v {
                let same_rank = t.rank() == first.rank();
                let same_other = same_rank
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(k, (a, b))| k == *axis || a == b);
                if !same_other {
                    return Err(mismatch(name, first, t));
                }
                total += t.shape()[*axis];
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in v {
                    let dim = t.shape()[*axis];
                    data.extend_from_slice(&t.data()[o * dim * inner..(o + 1) * dim * inner]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Tensor::new(shape, data)?
        }
        Primitive::Slice { axis, start, len } => {
            let a = v[0];
            if *axis >= a.rank() || start + len > a.shape()[*axis] {
                return Err(invalid(
                    name,
                    format!("range {start}..{} on axis {axis} of shape {:?}", start + len, a.shape()),
                ));
            }
            let (outer, dim, inner) = split_axis(a.shape(), *axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data()[(o * dim + start) * inner..(o * dim + start + len) * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, data)?
        }
        Primitive::Reshape(shape) => {
            let a = v[0];
            let want: usize = shape.iter().product();
            if want != a.len() {
                return Err(TensorError::ShapeMismatch {
                    primitive: name,
                    lhs: a.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            a.reshape(shape.clone())?
        }
        Primitive::SumAll => Tensor::scalar(v[0].data().iter().sum()),
        Primitive::MeanAll => {
            let a = v[0];
            if a.is_empty() {
                return Err(invalid(name, "mean of an empty tensor"));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Primitive::SumAxis(axis) | Primitive::MeanAxis(axis) => {
            let a = v[0];
            if *axis >= a.rank() {
                return Err(invalid(
                    name,
                    format!("axis {axis} out of range for shape {:?}", a.shape()),
                ));
            }
            let (outer, dim, inner) = split_axis(a.shape(), *axis);
            let scale = if matches!(kind, Primitive::MeanAxis(_)) {
                if dim == 0 {
                    return Err(invalid(name, "mean over an empty axis"));
                }
                1.0 / dim as f64
            } else {
                1.0
            };
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for d in 0..dim {
                    for i in 0..inner {
                        out[o * inner + i] += a.data()[(o * dim + d) * inner + i];
                    }
                }
            }
            for x in out.iter_mut() {
                *x *= scale;
            }
            let mut shape = a.shape().to_vec();
            shape.remove(*axis);
            Tensor::new(shape, out)?
        }
    };
    Ok((out, Bcast::Same))
}
