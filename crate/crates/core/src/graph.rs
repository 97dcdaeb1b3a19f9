//! Computation graphs over a closed set of tensor primitives.
//!
//! A [`Graph`] is an append-only list of [`Op`] nodes; each node may only
//! reference earlier nodes, so graphs are acyclic by construction. Running
//! [`Graph::forward`] produces an [`Execution`] that caches every primal value.
//! The same execution then serves any number of forward-mode tangent passes
//! ([`Execution::jvp`]) and reverse-mode passes ([`Execution::vjp`]) without
//! recomputing the primal, which is what makes repeated curvature-vector
//! products cheap.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc, ConvGeom, Tensor};

pub type NodeId = usize;

/// Primitive operations. The set is closed: every differentiation path in the
/// crate is written against exactly these variants.
#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(usize),
    Const(Tensor),
    /// `[m,k] x [k,n]`.
    MatMul(NodeId, NodeId),
    /// NCHW input, OIHW kernel, zero padding.
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, padding: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Adds a `[C]` bias along axis 1.
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    /// Training-mode batch normalization over every axis except axis 1.
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Batch normalization with externally supplied statistics (treated as constants).
    BatchNormStats { input: NodeId, gamma: NodeId, beta: NodeId, mean: NodeId, var: NodeId, eps: f64 },
    /// Row-wise softmax of a matrix.
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// `[N,C,H,W] -> [N,C]`.
    SpatialMean(NodeId),
    Reshape(NodeId, Vec<usize>),
    /// Collapses every axis after the first.
    Flatten(NodeId),
    Concat(Vec<NodeId>, usize),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input(_) | Param(_) | Const(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) => vec![*a, *b],
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Scale(a, _) | Tanh(a) | Sigmoid(a) | Softplus(a) | Relu(a) | Softmax(a)
            | LogSoftmax(a) | Sum(a) | Mean(a) | SpatialMean(a) | Reshape(a, _) | Flatten(a) => {
                vec![*a]
            }
            BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            BatchNormStats { input, gamma, beta, mean, var, .. } => {
                vec![*input, *gamma, *beta, *mean, *var]
            }
            Concat(xs, _) => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Input(_) => "input",
            Param(_) => "param",
            Const(_) => "const",
            MatMul(..) => "matmul",
            Conv2d { .. } => "conv2d",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddBias(..) => "add_bias",
            Tanh(_) => "tanh",
            Sigmoid(_) => "sigmoid",
            Softplus(_) => "softplus",
            Relu(_) => "relu",
            BatchNorm { .. } => "batchnorm",
            BatchNormStats { .. } => "batchnorm_stats",
            Softmax(_) => "softmax",
            LogSoftmax(_) => "log_softmax",
            Sum(_) => "sum",
            Mean(_) => "mean",
            SpatialMean(_) => "spatial_mean",
            Reshape(..) => "reshape",
            Flatten(_) => "flatten",
            Concat(..) => "concat",
        }
    }
}

/// Primal value paired with a tangent of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl Dual {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        primal.expect_same_shape(&tangent)?;
        Ok(Self { primal, tangent })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    outputs: Vec<(String, NodeId)>,
    num_params: usize,
}

/// Reverse-mode result: one gradient per parameter slot, and per named input
/// when requested.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub inputs: HashMap<String, Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for o in op.operands() {
            assert!(o < self.nodes.len(), "operand {o} does not precede the new node");
        }
        if let Op::Param(i) = op {
            self.num_params = self.num_params.max(i + 1);
        }
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }
    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(Op::Param(index))
    }
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv2d { input, kernel, stride, padding })
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(a, k))
    }
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(x, bias))
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn batchnorm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.push(Op::BatchNorm { input, gamma, beta, eps })
    }
    pub fn batchnorm_stats(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
    ) -> NodeId {
        self.push(Op::BatchNormStats { input, gamma, beta, mean, var, eps })
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    pub fn spatial_mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SpatialMean(a))
    }
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }
    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Flatten(a))
    }
    pub fn concat(&mut self, xs: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(Op::Concat(xs, axis))
    }

    /// Designates `node` as a named output. Outputs are returned in the order
    /// they were designated.
    pub fn output(&mut self, name: &str, node: NodeId) {
        assert!(node < self.nodes.len());
        self.outputs.push((name.to_string(), node));
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.outputs.iter().position(|(n, _)| n == name)
    }

    /// Runs the primal pass and keeps every intermediate value.
    pub fn forward(&self, params: &[Tensor], inputs: &[(&str, &Tensor)]) -> Result<Execution<'_>> {
        Execution::run(self, params, inputs)
    }

    /// Values of every designated output.
    pub fn evaluate(&self, params: &[Tensor], inputs: &[(&str, &Tensor)]) -> Result<Vec<(String, Tensor)>> {
        let exec = self.forward(params, inputs)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), exec.value(*id).clone()))
            .collect())
    }

    /// Reverse-mode derivative of the single scalar output with respect to every parameter.
    pub fn gradient(&self, params: &[Tensor], inputs: &[(&str, &Tensor)]) -> Result<Vec<Tensor>> {
        let exec = self.forward(params, inputs)?;
        exec.gradient()
    }

    /// Forward-mode product `(d outputs / d params) * tangents`.
    pub fn jvp(
        &self,
        params: &[Tensor],
        tangents: &[Tensor],
        inputs: &[(&str, &Tensor)],
    ) -> Result<Vec<Dual>> {
        let exec = self.forward(params, inputs)?;
        let t = exec.jvp(tangents)?;
        self.outputs
            .iter()
            .zip(t)
            .map(|((_, id), tan)| Dual::new(exec.value(*id).clone(), tan))
            .collect()
    }

    /// Reverse-mode product `(d outputs / d params)^T * cotangents`.
    pub fn vjp(
        &self,
        params: &[Tensor],
        cotangents: &[Tensor],
        inputs: &[(&str, &Tensor)],
    ) -> Result<Vec<Tensor>> {
        let exec = self.forward(params, inputs)?;
        exec.vjp(cotangents)
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Conv { geom: ConvGeom, cols: Vec<f64> },
    Norm { xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
}

/// A completed primal pass: parameters, inputs and every intermediate value.
#[derive(Debug, Clone)]
pub struct Execution<'g> {
    graph: &'g Graph,
    params: Vec<Tensor>,
    values: Vec<Tensor>,
    aux: Vec<Aux>,
    depends_on_param: Vec<bool>,
}

/// Splits a `[N, C, ...]` layout into (outer = N, channels = C, inner = prod(rest)).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("expected at least 2 axes, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn per_channel_sum(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, inner) = channel_layout(shape).expect("validated in forward");
    let mut out = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            out[ch] += data[base..base + inner].iter().sum::<f64>();
        }
    }
    out
}

fn broadcast_channels(vals: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, inner) = channel_layout(shape).expect("validated in forward");
    let mut out = Vec::with_capacity(n * c * inner);
    for _ in 0..n {
        for &v in vals.iter().take(c) {
            out.extend(std::iter::repeat(v).take(inner));
        }
    }
    out
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        None => *slot = Some(t),
    }
}

fn concat_layout(shapes: &[&[usize]], axis: usize) -> Result<(Vec<usize>, usize)> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    if axis >= first.len() {
        return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        if s.len() != first.len()
            || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
        {
            return Err(Error::Shape(format!("concat shapes differ: {first:?} vs {s:?}")));
        }
        out[axis] += s[axis];
    }
    let outer = first[..axis].iter().product();
    Ok((out, outer))
}

impl<'g> Execution<'g> {
    fn run(graph: &'g Graph, params: &[Tensor], inputs: &[(&str, &Tensor)]) -> Result<Self> {
        if params.len() < graph.num_params {
            return Err(Error::InvalidArgument(format!(
                "graph uses {} parameter slots, {} supplied",
                graph.num_params,
                params.len()
            )));
        }
        let mut exec = Execution {
            graph,
            params: params.to_vec(),
            values: Vec::with_capacity(graph.nodes.len()),
            aux: Vec::with_capacity(graph.nodes.len()),
            depends_on_param: Vec::with_capacity(graph.nodes.len()),
        };
        for (id, op) in graph.nodes.iter().enumerate() {
            let (value, aux) = exec.forward_op(op, inputs)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("node {id} ({})", op.name())));
            }
            let dep = matches!(op, Op::Param(_))
                || op.operands().iter().any(|&o| exec.depends_on_param[o]);
            exec.values.push(value);
            exec.aux.push(aux);
            exec.depends_on_param.push(dep);
        }
        Ok(exec)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.graph.nodes[id] {
            Op::Param(i) => &self.params[i],
            _ => &self.values[id],
        }
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.graph
            .outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| self.value(*id))
    }

    pub fn outputs(&self) -> Vec<&Tensor> {
        self.graph.outputs.iter().map(|(_, id)| self.value(*id)).collect()
    }

    /// Per-channel batch mean and (biased) variance of every training-mode
    /// batchnorm node, in graph order.
    pub fn batchnorm_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.aux
            .iter()
            .zip(&self.graph.nodes)
            .filter_map(|(a, op)| match (a, op) {
                (Aux::Norm { mean, var, .. }, Op::BatchNorm { .. }) => Some((mean.clone(), var.clone())),
                _ => None,
            })
            .collect()
    }

    fn forward_op(&self, op: &Op, inputs: &[(&str, &Tensor)]) -> Result<(Tensor, Aux)> {
        use Op::*;
        let v = |id: &NodeId| self.value(*id);
        let out = match op {
            Input(name) => {
                let t = inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| (*t).clone())
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                return Ok((t, Aux::None));
            }
            Param(_) => return Ok((Tensor::zeros(&[0]), Aux::None)),
            Const(t) => t.clone(),
            MatMul(a, b) => tensor::matmul(v(a), v(b))?,
            Conv2d { input, kernel, stride, padding } => {
                let (x, k) = (v(input), v(kernel));
                let geom = ConvGeom::new(x.shape(), k.shape(), *stride, *padding)?;
                let cols = geom.im2col(x.data());
                let out = Tensor::new(geom.out_shape(), geom.forward_cols(&cols, k.data()))?;
                return Ok((out, Aux::Conv { geom, cols }));
            }
            Add(a, b) => v(a).zip_map(v(b), |x, y| x + y)?,
            Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y)?,
            Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y)?,
            Scale(a, k) => v(a).scale(*k),
            AddBias(x, b) => {
                let (x, b) = (v(x), v(b));
                let (_, c, _) = channel_layout(x.shape())?;
                if b.shape() != [c] {
                    return Err(Error::Shape(format!(
                        "bias shape {:?} does not match {c} channels",
                        b.shape()
                    )));
                }
                let bb = broadcast_channels(b.data(), x.shape());
                let data = x.data().iter().zip(&bb).map(|(a, b)| a + b).collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            Tanh(a) => v(a).map(f64::tanh),
            Sigmoid(a) => v(a).map(tensor::sigmoid),
            Softplus(a) => v(a).map(tensor::softplus),
            Relu(a) => v(a).map(|x| x.max(0.0)),
            BatchNorm { input, gamma, beta, eps } => {
                let (x, g, b) = (v(input), v(gamma), v(beta));
                let (n, c, inner) = channel_layout(x.shape())?;
                if g.shape() != [c] || b.shape() != [c] {
                    return Err(Error::Shape(format!("batchnorm affine params must be [{c}]")));
                }
                let m = (n * inner) as f64;
                let mean: Vec<f64> = per_channel_sum(x.data(), x.shape()).iter().map(|s| s / m).collect();
                let mut var = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for &xv in &x.data()[base..base + inner] {
                            var[ch] += (xv - mean[ch]).powi(2);
                        }
                    }
                }
                var.iter_mut().for_each(|s| *s /= m);
                let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
                let mut xhat = vec![0.0; x.len()];
                let mut y = vec![0.0; x.len()];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for i in base..base + inner {
                            xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                            y[i] = g.data()[ch] * xhat[i] + b.data()[ch];
                        }
                    }
                }
                let out = Tensor::new(x.shape().to_vec(), y)?;
                return Ok((out, Aux::Norm { xhat, inv_std, mean, var }));
            }
            BatchNormStats { input, gamma, beta, mean, var, eps } => {
                let (x, g, b, mu, var) = (v(input), v(gamma), v(beta), v(mean), v(var));
                let (n, c, inner) = channel_layout(x.shape())?;
                for t in [g, b, mu, var] {
                    if t.shape() != [c] {
                        return Err(Error::Shape(format!("batchnorm statistics must be [{c}]")));
                    }
                }
                let inv_std: Vec<f64> = var.data().iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
                let mut xhat = vec![0.0; x.len()];
                let mut y = vec![0.0; x.len()];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for i in base..base + inner {
                            xhat[i] = (x.data()[i] - mu.data()[ch]) * inv_std[ch];
                            y[i] = g.data()[ch] * xhat[i] + b.data()[ch];
                        }
                    }
                }
                let out = Tensor::new(x.shape().to_vec(), y)?;
                let aux = Aux::Norm { xhat, inv_std, mean: mu.data().to_vec(), var: var.data().to_vec() };
                return Ok((out, aux));
            }
            Softmax(a) => {
                let x = v(a);
                let (m, k) = x.dims2()?;
                let mut y = x.data().to_vec();
                for r in 0..m {
                    let row = &mut y[r * k..(r + 1) * k];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - mx).exp();
                        s += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= s);
                }
                Tensor::new(vec![m, k], y)?
            }
            LogSoftmax(a) => {
                let x = v(a);
                let (m, k) = x.dims2()?;
                let mut y = x.data().to_vec();
                for r in 0..m {
                    let row = &mut y[r * k..(r + 1) * k];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|e| (e - mx).exp()).sum::<f64>().ln();
                    row.iter_mut().for_each(|e| *e -= lse);
                }
                Tensor::new(vec![m, k], y)?
            }
            Sum(a) => Tensor::scalar(v(a).sum()),
            Mean(a) => {
                let x = v(a);
                if x.is_empty() {
                    return Err(Error::Shape("mean of an empty tensor".into()));
                }
                Tensor::scalar(x.sum() / x.len() as f64)
            }
            SpatialMean(a) => {
                let x = v(a);
                let (n, c, h, w) = x.dims4()?;
                let hw = (h * w) as f64;
                let data = x.data().chunks(h * w).map(|s| s.iter().sum::<f64>() / hw).collect();
                Tensor::new(vec![n, c], data)?
            }
            Reshape(a, shape) => v(a).clone().reshaped(shape.clone())?,
            Flatten(a) => {
                let x = v(a);
                if x.ndim() == 0 {
                    return Err(Error::Shape("cannot flatten a scalar".into()));
                }
                let n = x.shape()[0];
                let rest = if n == 0 { 0 } else { x.len() / n };
                x.clone().reshaped(vec![n, rest])?
            }
            Concat(xs, axis) => {
                let shapes: Vec<&[usize]> = xs.iter().map(|id| v(id).shape()).collect();
                let (out_shape, outer) = concat_layout(&shapes, *axis)?;
                let mut data = Vec::with_capacity(out_shape.iter().product());
                for o in 0..outer {
                    for id in xs {
                        let t = v(id);
                        let chunk = t.len() / outer.max(1);
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::new(out_shape, data)?
            }
        };
        Ok((out, Aux::None))
    }

    /// Reverse-mode derivative of the graph's single scalar output.
    pub fn gradient(&self) -> Result<Vec<Tensor>> {
        let (_, id) = self
            .graph
            .outputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("graph has no outputs".into()))?;
        let out = self.value(*id);
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let seed = Tensor::full(out.shape(), 1.0);
        Ok(self.backward(&[(*id, seed)], false)?.params)
    }

    /// `J^T c` with one cotangent per designated output, returning parameter gradients.
    pub fn vjp(&self, cotangents: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(self.vjp_full(cotangents)?.params)
    }

    /// Like [`vjp`](Self::vjp) but also returns cotangents for every named input.
    pub fn vjp_full(&self, cotangents: &[Tensor]) -> Result<Gradients> {
        if cotangents.len() != self.graph.outputs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} cotangents for {} outputs",
                cotangents.len(),
                self.graph.outputs.len()
            )));
        }
        let seeds: Vec<(NodeId, Tensor)> = self
            .graph
            .outputs
            .iter()
            .zip(cotangents)
            .map(|((_, id), c)| (*id, c.clone()))
            .collect();
        self.backward(&seeds, true)
    }

    fn backward(&self, seeds: &[(NodeId, Tensor)], want_inputs: bool) -> Result<Gradients> {
        use Op::*;
        let nodes = &self.graph.nodes;
        let needs: Vec<bool> = if want_inputs {
            let mut m = vec![false; nodes.len()];
            for (id, op) in nodes.iter().enumerate() {
                m[id] = matches!(op, Param(_) | Input(_)) || op.operands().iter().any(|&o| m[o]);
            }
            m
        } else {
            self.depends_on_param.clone()
        };

        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (id, seed) in seeds {
            self.value(*id).expect_same_shape(seed)?;
            add_into(&mut adj[*id], seed.clone());
        }

        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut input_grads = HashMap::new();

        for id in (0..nodes.len()).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !needs[id] {
                continue;
            }
            let op = &nodes[id];
            let y = self.value(id);
            let send = |to: NodeId, t: Tensor, adj: &mut Vec<Option<Tensor>>| {
                if needs[to] {
                    add_into(&mut adj[to], t);
                }
            };
            match op {
                Input(name) => {
                    if want_inputs {
                        input_grads.insert(name.clone(), g);
                    }
                }
                Param(i) => add_into(&mut param_grads[*i], g),
                Const(_) => {}
                MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2()?;
                    let (_, n) = bv.dims2()?;
                    if needs[*a] {
                        let mut da = vec![0.0; m * k];
                        gemm_nt_acc(g.data(), bv.data(), &mut da, m, n, k);
                        send(*a, Tensor::new(vec![m, k], da)?, &mut adj);
                    }
                    if needs[*b] {
                        let mut db = vec![0.0; k * n];
                        gemm_tn_acc(av.data(), g.data(), &mut db, m, k, n);
                        send(*b, Tensor::new(vec![k, n], db)?, &mut adj);
                    }
                }
                Conv2d { input, kernel, .. } => {
                    let Aux::Conv { geom, cols } = &self.aux[id] else { unreachable!() };
                    if needs[*kernel] {
                        let dk = geom.kernel_grad(cols, g.data());
                        send(*kernel, Tensor::new(self.value(*kernel).shape().to_vec(), dk)?, &mut adj);
                    }
                    if needs[*input] {
                        let dx = geom.input_grad(self.value(*kernel).data(), g.data());
                        send(*input, Tensor::new(self.value(*input).shape().to_vec(), dx)?, &mut adj);
                    }
                }
                Add(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Sub(a, b) => {
                    send(*b, g.scale(-1.0), &mut adj);
                    send(*a, g, &mut adj);
                }
                Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if needs[*a] {
                        send(*a, g.zip_map(bv, |x, y| x * y)?, &mut adj);
                    }
                    if needs[*b] {
                        send(*b, g.zip_map(av, |x, y| x * y)?, &mut adj);
                    }
                }
                Scale(a, k) => send(*a, g.scale(*k), &mut adj),
                AddBias(x, b) => {
                    if needs[*b] {
                        let db = per_channel_sum(g.data(), g.shape());
                        send(*b, Tensor::vector(db), &mut adj);
                    }
                    send(*x, g, &mut adj);
                }
                Tanh(a) => send(*a, g.zip_map(y, |g, y| g * (1.0 - y * y))?, &mut adj),
                Sigmoid(a) => send(*a, g.zip_map(y, |g, y| g * y * (1.0 - y))?, &mut adj),
                Softplus(a) => {
                    let x = self.value(*a);
                    send(*a, g.zip_map(x, |g, x| g * tensor::sigmoid(x))?, &mut adj)
                }
                Relu(a) => {
                    let x = self.value(*a);
                    send(*a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 })?, &mut adj)
                }
                BatchNorm { input, gamma, beta, .. } => {
                    let Aux::Norm { xhat, inv_std, .. } = &self.aux[id] else { unreachable!() };
                    let shape = g.shape().to_vec();
                    let (n, c, inner) = channel_layout(&shape)?;
                    let gd = g.data();
                    let gx: Vec<f64> = gd.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    let sum_g = per_channel_sum(gd, &shape);
                    let sum_gx = per_channel_sum(&gx, &shape);
                    if needs[*gamma] {
                        send(*gamma, Tensor::vector(sum_gx.clone()), &mut adj);
                    }
                    if needs[*beta] {
                        send(*beta, Tensor::vector(sum_g.clone()), &mut adj);
                    }
                    if needs[*input] {
                        let gam = self.value(*gamma).data();
                        let m = (n * inner) as f64;
                        let mut dx = vec![0.0; gd.len()];
                        for bi in 0..n {
                            for ch in 0..c {
                                let k = gam[ch] * inv_std[ch] / m;
                                let base = (bi * c + ch) * inner;
                                for i in base..base + inner {
                                    dx[i] = k * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                                }
                            }
                        }
                        send(*input, Tensor::new(shape, dx)?, &mut adj);
                    }
                }
                BatchNormStats { input, gamma, beta, .. } => {
                    let Aux::Norm { xhat, inv_std, .. } = &self.aux[id] else { unreachable!() };
                    let shape = g.shape().to_vec();
                    let gd = g.data();
                    if needs[*gamma] {
                        let gx: Vec<f64> = gd.iter().zip(xhat).map(|(a, b)| a * b).collect();
                        send(*gamma, Tensor::vector(per_channel_sum(&gx, &shape)), &mut adj);
                    }
                    if needs[*beta] {
                        send(*beta, Tensor::vector(per_channel_sum(gd, &shape)), &mut adj);
                    }
                    if needs[*input] {
                        let gam = self.value(*gamma).data();
                        let k: Vec<f64> = gam.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                        let kb = broadcast_channels(&k, &shape);
                        let dx = gd.iter().zip(&kb).map(|(a, b)| a * b).collect();
                        send(*input, Tensor::new(shape, dx)?, &mut adj);
                    }
                }
                Softmax(a) => {
                    let (m, k) = y.dims2()?;
                    let (yd, gd) = (y.data(), g.data());
                    let mut dx = vec![0.0; m * k];
                    for r in 0..m {
                        let s: f64 = (0..k).map(|j| gd[r * k + j] * yd[r * k + j]).sum();
                        for j in 0..k {
                            dx[r * k + j] = yd[r * k + j] * (gd[r * k + j] - s);
                        }
                    }
                    send(*a, Tensor::new(vec![m, k], dx)?, &mut adj);
                }
                LogSoftmax(a) => {
                    let (m, k) = y.dims2()?;
                    let (yd, gd) = (y.data(), g.data());
                    let mut dx = vec![0.0; m * k];
                    for r in 0..m {
                        let s: f64 = gd[r * k..(r + 1) * k].iter().sum();
                        for j in 0..k {
                            dx[r * k + j] = gd[r * k + j] - yd[r * k + j].exp() * s;
                        }
                    }
                    send(*a, Tensor::new(vec![m, k], dx)?, &mut adj);
                }
                Sum(a) => {
                    let x = self.value(*a);
                    send(*a, Tensor::full(x.shape(), g.item()), &mut adj);
                }
                Mean(a) => {
                    let x = self.value(*a);
                    send(*a, Tensor::full(x.shape(), g.item() / x.len() as f64), &mut adj);
                }
                SpatialMean(a) => {
                    let x = self.value(*a);
                    let (_, _, h, w) = x.dims4()?;
                    let hw = h * w;
                    let mut dx = Vec::with_capacity(x.len());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat(gv / hw as f64).take(hw));
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), dx)?, &mut adj);
                }
                Reshape(a, _) | Flatten(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    send(*a, g.reshaped(shape)?, &mut adj);
                }
                Concat(xs, axis) => {
                    let shapes: Vec<&[usize]> = xs.iter().map(|id| self.value(*id).shape()).collect();
                    let (_, outer) = concat_layout(&shapes, *axis)?;
                    let chunks: Vec<usize> = xs.iter().map(|id| self.value(*id).len() / outer.max(1)).collect();
                    let mut parts: Vec<Vec<f64>> = chunks.iter().map(|c| Vec::with_capacity(c * outer)).collect();
                    let mut off = 0;
                    for _ in 0..outer {
                        for (p, &c) in parts.iter_mut().zip(&chunks) {
                            p.extend_from_slice(&g.data()[off..off + c]);
                            off += c;
                        }
                    }
                    for ((id, p), shape) in xs.iter().zip(parts).zip(shapes) {
                        send(*id, Tensor::new(shape.to_vec(), p)?, &mut adj);
                    }
                }
            }
        }

        let params = param_grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect::<Vec<_>>();
        for (i, p) in params.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        Ok(Gradients { params, inputs: input_grads })
    }

    /// Forward-mode tangent propagation with respect to the parameters, reusing
    /// the cached primal values. Returns one tangent per designated output.
    pub fn jvp(&self, param_tangents: &[Tensor]) -> Result<Vec<Tensor>> {
        use Op::*;
        if param_tangents.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} tangents for {} parameters",
                param_tangents.len(),
                self.params.len()
            )));
        }
        for (t, p) in param_tangents.iter().zip(&self.params) {
            t.expect_same_shape(p)?;
        }
        let nodes = &self.graph.nodes;
        let mut tan: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (id, op) in nodes.iter().enumerate() {
            if !self.depends_on_param[id] {
                continue;
            }
            let zero = |n: NodeId| Tensor::zeros(self.value(n).shape());
            let t = |n: &NodeId, tan: &Vec<Option<Tensor>>| tan[*n].clone().unwrap_or_else(|| zero(*n));
            let y = self.value(id);
            let out = match op {
                Input(_) | Const(_) => continue,
                Param(i) => param_tangents[*i].clone(),
                MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2()?;
                    let (_, n) = bv.dims2()?;
                    let mut out = vec![0.0; m * n];
                    if let Some(ta) = &tan[*a] {
                        gemm_acc(ta.data(), bv.data(), &mut out, m, k, n);
                    }
                    if let Some(tb) = &tan[*b] {
                        gemm_acc(av.data(), tb.data(), &mut out, m, k, n);
                    }
                    Tensor::new(vec![m, n], out)?
                }
                Conv2d { input, kernel, .. } => {
                    let Aux::Conv { geom, cols } = &self.aux[id] else { unreachable!() };
                    let mut out = vec![0.0; y.len()];
                    if let Some(tk) = &tan[*kernel] {
                        out = geom.forward_cols(cols, tk.data());
                    }
                    if let Some(tx) = &tan[*input] {
                        let c2 = geom.im2col(tx.data());
                        let part = geom.forward_cols(&c2, self.value(*kernel).data());
                        out.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    }
                    Tensor::new(y.shape().to_vec(), out)?
                }
                Add(a, b) => t(a, &tan).zip_map(&t(b, &tan), |x, y| x + y)?,
                Sub(a, b) => t(a, &tan).zip_map(&t(b, &tan), |x, y| x - y)?,
                Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut out = Tensor::zeros(y.shape());
                    if let Some(ta) = &tan[*a] {
                        out.add_assign(&ta.zip_map(bv, |x, y| x * y)?)?;
                    }
                    if let Some(tb) = &tan[*b] {
                        out.add_assign(&tb.zip_map(av, |x, y| x * y)?)?;
                    }
                    out
                }
                Scale(a, k) => t(a, &tan).scale(*k),
                AddBias(x, b) => {
                    let mut out = t(x, &tan);
                    if let Some(tb) = &tan[*b] {
                        let bb = broadcast_channels(tb.data(), y.shape());
                        out.data_mut().iter_mut().zip(bb).for_each(|(a, b)| *a += b);
                    }
                    out
                }
                Tanh(a) => t(a, &tan).zip_map(y, |t, y| t * (1.0 - y * y))?,
                Sigmoid(a) => t(a, &tan).zip_map(y, |t, y| t * y * (1.0 - y))?,
                Softplus(a) => t(a, &tan).zip_map(self.value(*a), |t, x| t * tensor::sigmoid(x))?,
                Relu(a) => t(a, &tan).zip_map(self.value(*a), |t, x| if x > 0.0 { t } else { 0.0 })?,
                BatchNorm { input, gamma, beta, .. } => {
                    let Aux::Norm { xhat, inv_std, .. } = &self.aux[id] else { unreachable!() };
                    let shape = y.shape().to_vec();
                    let (n, c, inner) = channel_layout(&shape)?;
                    let m = (n * inner) as f64;
                    let gam = self.value(*gamma).data();
                    let mut out = vec![0.0; y.len()];
                    if let Some(tx) = &tan[*input] {
                        let txd = tx.data();
                        let mean_t: Vec<f64> = per_channel_sum(txd, &shape).iter().map(|s| s / m).collect();
                        let tx_xhat: Vec<f64> = txd.iter().zip(xhat).map(|(a, b)| a * b).collect();
                        let mean_txh: Vec<f64> = per_channel_sum(&tx_xhat, &shape).iter().map(|s| s / m).collect();
                        for bi in 0..n {
                            for ch in 0..c {
                                let base = (bi * c + ch) * inner;
                                for i in base..base + inner {
                                    let txh = (txd[i] - mean_t[ch] - xhat[i] * mean_txh[ch]) * inv_std[ch];
                                    out[i] = gam[ch] * txh;
                                }
                            }
                        }
                    }
                    self.affine_tangent(&mut out, &shape, xhat, &tan[*gamma], &tan[*beta]);
                    Tensor::new(shape, out)?
                }
                BatchNormStats { input, gamma, beta, .. } => {
                    let Aux::Norm { xhat, inv_std, .. } = &self.aux[id] else { unreachable!() };
                    let shape = y.shape().to_vec();
                    let mut out = vec![0.0; y.len()];
                    if let Some(tx) = &tan[*input] {
                        let gam = self.value(*gamma).data();
                        let k: Vec<f64> = gam.iter().zip(inv_std).map(|(a, b)| a * b).collect();
                        let kb = broadcast_channels(&k, &shape);
                        out.iter_mut().zip(tx.data().iter().zip(&kb)).for_each(|(o, (a, b))| *o = a * b);
                    }
                    self.affine_tangent(&mut out, &shape, xhat, &tan[*gamma], &tan[*beta]);
                    Tensor::new(shape, out)?
                }
                Softmax(a) => {
                    let tx = t(a, &tan);
                    let (m, k) = y.dims2()?;
                    let (yd, td) = (y.data(), tx.data());
                    let mut out = vec![0.0; m * k];
                    for r in 0..m {
                        let s: f64 = (0..k).map(|j| yd[r * k + j] * td[r * k + j]).sum();
                        for j in 0..k {
                            out[r * k + j] = yd[r * k + j] * (td[r * k + j] - s);
                        }
                    }
                    Tensor::new(vec![m, k], out)?
                }
                LogSoftmax(a) => {
                    let tx = t(a, &tan);
                    let (m, k) = y.dims2()?;
                    let (yd, td) = (y.data(), tx.data());
                    let mut out = vec![0.0; m * k];
                    for r in 0..m {
                        let s: f64 = (0..k).map(|j| yd[r * k + j].exp() * td[r * k + j]).sum();
                        for j in 0..k {
                            out[r * k + j] = td[r * k + j] - s;
                        }
                    }
                    Tensor::new(vec![m, k], out)?
                }
                Sum(a) => Tensor::scalar(t(a, &tan).sum()),
                Mean(a) => {
                    let ta = t(a, &tan);
                    Tensor::scalar(ta.sum() / ta.len() as f64)
                }
                SpatialMean(a) => {
                    let ta = t(a, &tan);
                    let (n, c, h, w) = ta.dims4()?;
                    let data = ta.data().chunks(h * w).map(|s| s.iter().sum::<f64>() / (h * w) as f64).collect();
                    Tensor::new(vec![n, c], data)?
                }
                Reshape(a, _) | Flatten(a) => t(a, &tan).reshaped(y.shape().to_vec())?,
                Concat(xs, axis) => {
                    let parts: Vec<Tensor> = xs.iter().map(|n| t(n, &tan)).collect();
                    let shapes: Vec<&[usize]> = parts.iter().map(|p| p.shape()).collect();
                    let (out_shape, outer) = concat_layout(&shapes, *axis)?;
                    let mut data = Vec::with_capacity(y.len());
                    for o in 0..outer {
                        for p in &parts {
                            let chunk = p.len() / outer.max(1);
                            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
                        }
                    }
                    Tensor::new(out_shape, data)?
                }
            };
            tan[id] = Some(out);
        }
        let outs: Vec<Tensor> = self
            .graph
            .outputs
            .iter()
            .map(|(_, id)| tan[*id].clone().unwrap_or_else(|| Tensor::zeros(self.value(*id).shape())))
            .collect();
        if outs.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("tangent propagation".into()));
        }
        Ok(outs)
    }

    fn affine_tangent(
        &self,
        out: &mut [f64],
        shape: &[usize],
        xhat: &[f64],
        tgamma: &Option<Tensor>,
        tbeta: &Option<Tensor>,
    ) {
        if let Some(tg) = tgamma {
            let b = broadcast_channels(tg.data(), shape);
            out.iter_mut().zip(b.iter().zip(xhat)).for_each(|(o, (g, x))| *o += g * x);
        }
        if let Some(tb) = tbeta {
            let b = broadcast_channels(tb.data(), shape);
            out.iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.output("y", x);
        let x0 = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let out = g.evaluate(&[], &[("x", &x0)]).unwrap();
        assert_eq!(out[0].1.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn tanh_and_softplus_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x");
        let a = g.tanh(x);
        let b = g.softplus(x);
        g.output("tanh", a);
        g.output("softplus", b);
        let out = g.evaluate(&[], &[("x", &Tensor::scalar(0.0))]).unwrap();
        assert_eq!(out[0].1.item(), 0.0);
        assert!((out[1].1.item() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.output("y", x);
        assert!(matches!(g.evaluate(&[], &[]), Err(Error::UnboundInput(_))));
    }

    #[test]
    fn non_finite_surfaces_as_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.scale(x, f64::INFINITY);
        g.output("y", y);
        assert!(matches!(g.evaluate(&[], &[("x", &Tensor::scalar(1.0))]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn square_gradient() {
        // y = w * w at w = 3
        let mut g = Graph::new();
        let w = g.param(0);
        let y = g.mul(w, w);
        g.output("y", y);
        let grad = g.gradient(&[Tensor::scalar(3.0)], &[]).unwrap();
        assert_eq!(grad[0].item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut g = Graph::new();
        let _w = g.param(0);
        let c = g.constant(Tensor::scalar(5.0));
        g.output("y", c);
        let grad = g.gradient(&[Tensor::scalar(3.0)], &[]).unwrap();
        assert_eq!(grad[0].item(), 0.0);
    }

    #[test]
    fn gradient_requires_scalar_output() {
        let mut g = Graph::new();
        let w = g.param(0);
        g.output("y", w);
        let err = g.gradient(&[Tensor::vector(vec![1.0, 2.0])], &[]).unwrap_err();
        assert!(matches!(err, Error::NotScalar(_)));
    }

    fn linear() -> Graph {
        let mut g = Graph::new();
        let w = g.param(0);
        let x = g.input("x");
        let z = g.mul(w, x);
        g.output("z", z);
        g
    }

    #[test]
    fn jvp_and_vjp_of_linear_map() {
        let g = linear();
        let w = [Tensor::scalar(1.5)];
        let x = Tensor::scalar(2.0);
        let d = g.jvp(&w, &[Tensor::scalar(3.0)], &[("x", &x)]).unwrap();
        assert_eq!(d[0].tangent.item(), 6.0);
        let d0 = g.jvp(&w, &[Tensor::scalar(0.0)], &[("x", &x)]).unwrap();
        assert_eq!(d0[0].tangent.item(), 0.0);
        let v = g.vjp(&w, &[Tensor::scalar(5.0)], &[("x", &x)]).unwrap();
        assert_eq!(v[0].item(), 10.0);
        let v0 = g.vjp(&w, &[Tensor::scalar(0.0)], &[("x", &x)]).unwrap();
        assert_eq!(v0[0].item(), 0.0);
    }

    #[test]
    fn jvp_rejects_mismatched_tangent() {
        let g = linear();
        let x = Tensor::scalar(2.0);
        let err = g.jvp(&[Tensor::scalar(1.0)], &[Tensor::vector(vec![1.0, 2.0])], &[("x", &x)]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn concat_and_split_round_trip() {
        let mut g = Graph::new();
        let a = g.param(0);
        let b = g.param(1);
        let c = g.concat(vec![a, b], 1);
        let s = g.sum(c);
        g.output("s", s);
        let pa = t(&[2, 1], &[1.0, 2.0]);
        let pb = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let exec = g.forward(&[pa.clone(), pb.clone()], &[]).unwrap();
        assert_eq!(exec.outputs()[0].item(), 21.0);
        let grads = exec.gradient().unwrap();
        assert_eq!(grads[0].data(), &[1.0, 1.0]);
        assert_eq!(grads[1].data(), &[1.0; 4]);
    }

    #[test]
    fn evaluation_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param(0);
        let h = g.matmul(x, w);
        let s = g.softmax(h);
        g.output("s", s);
        let x0 = t(&[2, 3], &[0.1, -0.4, 2.0, 1.0, 0.3, -0.7]);
        let w0 = t(&[3, 2], &[0.5, -1.0, 0.25, 0.75, -0.3, 0.9]);
        let a = g.evaluate(&[w0.clone()], &[("x", &x0)]).unwrap();
        let b = g.evaluate(&[w0], &[("x", &x0)]).unwrap();
        assert_eq!(a[0].1.data(), b[0].1.data());
    }
}
