//! Tape-style reverse-mode differentiation over small vector graphs.
//!
//! A [`Graph`] is an immutable list of operations in topological order plus
//! per-node buffers holding the values of the most recent forward pass.
//! Weights are shared through `Arc`, so cloning a graph for another worker
//! only copies the node list and buffers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{norm_inf, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given the pre-activation `x` and the activation `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_twice_differentiable(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant(Arc<Tensor>),
    /// `weight · x + bias` with `weight` of shape `[out, in]`.
    Affine {
        weight: Arc<Tensor>,
        bias: Arc<Tensor>,
        x: NodeId,
    },
    MatVec {
        matrix: Arc<Tensor>,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Activation(Activation, NodeId),
    Index(NodeId, usize),
    Sum(NodeId),
    Scale(NodeId, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    len: usize,
}

/// Which scalar of the output a backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSelector {
    /// The output itself, which must hold exactly one element.
    Scalar,
    Index(usize),
    /// `output[a] - output[b]`.
    Difference(usize, usize),
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input: Option<(NodeId, Vec<usize>)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        self.nodes.push(Node { op, len });
        NodeId(self.nodes.len() - 1)
    }

    fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].len
    }

    fn same_len(&self, a: NodeId, b: NodeId) -> Result<usize> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        if la != lb {
            return Err(Error::ShapeMismatch {
                expected: vec![la],
                actual: vec![lb],
            });
        }
        Ok(la)
    }

    /// Declares the graph input. A graph has exactly one.
    pub fn input(&mut self, shape: Vec<usize>) -> Result<NodeId> {
        if self.input.is_some() {
            return Err(Error::InvalidParameter("graph already has an input".into()));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!("bad input shape {shape:?}")));
        }
        let id = self.push(Op::Input, shape.iter().product());
        self.input = Some((id, shape));
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let len = value.len();
        self.push(Op::Constant(Arc::new(value)), len)
    }

    pub fn affine(&mut self, weight: Arc<Tensor>, bias: Arc<Tensor>, x: NodeId) -> Result<NodeId> {
        if weight.shape().len() != 2 || weight.cols() != self.len_of(x) {
            return Err(Error::ShapeMismatch {
                expected: vec![weight.rows(), self.len_of(x)],
                actual: weight.shape().to_vec(),
            });
        }
        if bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch {
                expected: vec![weight.rows()],
                actual: bias.shape().to_vec(),
            });
        }
        let out = weight.rows();
        Ok(self.push(Op::Affine { weight, bias, x }, out))
    }

    pub fn matvec(&mut self, matrix: Arc<Tensor>, x: NodeId) -> Result<NodeId> {
        if matrix.shape().len() != 2 || matrix.cols() != self.len_of(x) {
            return Err(Error::ShapeMismatch {
                expected: vec![matrix.rows(), self.len_of(x)],
                actual: matrix.shape().to_vec(),
            });
        }
        let out = matrix.rows();
        Ok(self.push(Op::MatVec { matrix, x }, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let len = self.same_len(a, b)?;
        Ok(self.push(Op::Add(a, b), len))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let len = self.same_len(a, b)?;
        Ok(self.push(Op::Sub(a, b), len))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let len = self.same_len(a, b)?;
        Ok(self.push(Op::Mul(a, b), len))
    }

    pub fn activation(&mut self, kind: Activation, x: NodeId) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Activation(kind, x), len)
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        if i >= self.len_of(x) {
            return Err(Error::InvalidParameter(format!(
                "index {i} out of range for node of length {}",
                self.len_of(x)
            )));
        }
        Ok(self.push(Op::Index(x, i), 1))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), 1)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let len = self.len_of(x);
        self.push(Op::Scale(x, factor), len)
    }

    pub fn build(self, output: NodeId) -> Result<Graph> {
        let (input, input_shape) = self
            .input
            .ok_or_else(|| Error::InvalidParameter("graph has no input".into()))?;
        if input.0 > output.0 {
            return Err(Error::InvalidParameter(
                "output node does not depend on the input".into(),
            ));
        }
        let nodes: Vec<Node> = self.nodes.into_iter().take(output.0 + 1).collect();
        let values = nodes.iter().map(|n| vec![0.0; n.len]).collect();
        let adjoints = nodes.iter().map(|n| vec![0.0; n.len]).collect();
        Ok(Graph {
            nodes: nodes.into(),
            input,
            input_shape,
            output,
            values,
            adjoints,
            has_forward: false,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Arc<[Node]>,
    input: NodeId,
    input_shape: Vec<usize>,
    output: NodeId,
    values: Vec<Vec<f64>>,
    adjoints: Vec<Vec<f64>>,
    has_forward: bool,
}

impl Graph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.nodes[self.input.0].len
    }

    pub fn output_len(&self) -> usize {
        self.nodes[self.output.0].len
    }

    pub fn activations(&self) -> impl Iterator<Item = Activation> + '_ {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Activation(kind, _) => Some(kind),
            _ => None,
        })
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        self.forward_slice(input.data());
        Ok(Tensor::from_raw(
            vec![self.output_len()],
            self.values[self.output.0].clone(),
        ))
    }

    /// Forward pass on a flat input; the caller guarantees the length.
    pub(crate) fn forward_slice(&mut self, input: &[f64]) -> &[f64] {
        debug_assert_eq!(input.len(), self.input_len());
        for i in 0..self.nodes.len() {
            let (done, rest) = self.values.split_at_mut(i);
            let out = &mut rest[0];
            match &self.nodes[i].op {
                Op::Input => out.copy_from_slice(input),
                Op::Constant(t) => out.copy_from_slice(t.data()),
                Op::Affine { weight, bias, x } => {
                    let xv = &done[x.0];
                    for (r, o) in out.iter_mut().enumerate() {
                        *o = bias.data()[r] + dot_row(weight.row(r), xv);
                    }
                }
                Op::MatVec { matrix, x } => {
                    let xv = &done[x.0];
                    for (r, o) in out.iter_mut().enumerate() {
                        *o = dot_row(matrix.row(r), xv);
                    }
                }
                Op::Add(a, b) => zip_into(out, &done[a.0], &done[b.0], |p, q| p + q),
                Op::Sub(a, b) => zip_into(out, &done[a.0], &done[b.0], |p, q| p - q),
                Op::Mul(a, b) => zip_into(out, &done[a.0], &done[b.0], |p, q| p * q),
                Op::Activation(kind, x) => {
                    for (o, &v) in out.iter_mut().zip(&done[x.0]) {
                        *o = kind.apply(v);
                    }
                }
                Op::Index(x, k) => out[0] = done[x.0][*k],
                Op::Sum(x) => out[0] = done[x.0].iter().sum(),
                Op::Scale(x, f) => {
                    for (o, &v) in out.iter_mut().zip(&done[x.0]) {
                        *o = f * v;
                    }
                }
            }
        }
        self.has_forward = true;
        &self.values[self.output.0]
    }

    /// Output values cached by the most recent forward pass.
    pub fn cached_output(&self) -> Option<&[f64]> {
        self.has_forward
            .then(|| self.values[self.output.0].as_slice())
    }

    /// Vector-Jacobian product of the cached forward pass with `seed`.
    pub fn backward_seeded(&mut self, seed: &[f64]) -> Result<Tensor> {
        if !self.has_forward {
            return Err(Error::NoForwardPass);
        }
        if seed.len() != self.output_len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.output_len()],
                actual: vec![seed.len()],
            });
        }
        for adj in &mut self.adjoints {
            adj.iter_mut().for_each(|a| *a = 0.0);
        }
        self.adjoints[self.output.0].copy_from_slice(seed);
        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.adjoints.split_at_mut(i);
            let g = &rest[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input | Op::Constant(_) => {}
                Op::Affine { weight, x, .. } | Op::MatVec { matrix: weight, x } => {
                    let gx = &mut before[x.0];
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            for (acc, &w) in gx.iter_mut().zip(weight.row(r)) {
                                *acc += gr * w;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut before[a.0], g, 1.0);
                    accumulate(&mut before[b.0], g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut before[a.0], g, 1.0);
                    accumulate(&mut before[b.0], g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    for k in 0..g.len() {
                        before[a.0][k] += g[k] * vb[k];
                    }
                    for k in 0..g.len() {
                        before[b.0][k] += g[k] * va[k];
                    }
                }
                Op::Activation(kind, x) => {
                    let (xv, yv) = (&self.values[x.0], &self.values[i]);
                    let gx = &mut before[x.0];
                    for k in 0..g.len() {
                        gx[k] += g[k] * kind.derivative(xv[k], yv[k]);
                    }
                }
                Op::Index(x, k) => before[x.0][*k] += g[0],
                Op::Sum(x) => before[x.0].iter_mut().for_each(|a| *a += g[0]),
                Op::Scale(x, f) => accumulate(&mut before[x.0], g, *f),
            }
        }
        Ok(Tensor::from_raw(
            self.input_shape.clone(),
            self.adjoints[self.input.0].clone(),
        ))
    }

    /// Backward pass from the selected scalar of the cached forward output.
    pub fn backward(&mut self, selector: OutputSelector) -> Result<Tensor> {
        if !self.has_forward {
            return Err(Error::NoForwardPass);
        }
        let n = self.output_len();
        let mut seed = vec![0.0; n];
        let check = |i: usize| {
            if i < n {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "output index {i} out of range for {n} outputs"
                )))
            }
        };
        match selector {
            OutputSelector::Scalar => {
                if n != 1 {
                    return Err(Error::NonScalarOutput { len: n });
                }
                seed[0] = 1.0;
            }
            OutputSelector::Index(i) => {
                check(i)?;
                seed[i] = 1.0;
            }
            OutputSelector::Difference(a, b) => {
                check(a)?;
                check(b)?;
                seed[a] += 1.0;
                seed[b] -= 1.0;
            }
        }
        self.backward_seeded(&seed)
    }

    /// Forward then backward: the gradient of the selected output with
    /// respect to the input.
    pub fn gradient(&mut self, input: &Tensor, selector: OutputSelector) -> Result<Tensor> {
        self.forward(input)?;
        self.backward(selector)
    }

    /// Hessian-vector product of the scalar output, by central differences
    /// of reverse-mode gradients.
    pub fn hvp(&mut self, input: &Tensor, v: &Tensor, step: f64) -> Result<Tensor> {
        if v.shape() != input.shape() {
            return Err(Error::ShapeMismatch {
                expected: input.shape().to_vec(),
                actual: v.shape().to_vec(),
            });
        }
        let shape = input.shape().to_vec();
        let hv = central_difference_hvp(input.data(), v.data(), step, |x| {
            let t = Tensor::from_raw(shape.clone(), x.to_vec());
            Ok(self.gradient(&t, OutputSelector::Scalar)?.into_data())
        })?;
        Ok(Tensor::from_raw(input.shape().to_vec(), hv))
    }
}

fn dot_row(row: &[f64], x: &[f64]) -> f64 {
    row.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn zip_into(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, &p), &q) in out.iter_mut().zip(a).zip(b) {
        *o = f(p, q);
    }
}

fn accumulate(acc: &mut [f64], g: &[f64], factor: f64) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += factor * v;
    }
}

/// Default finite-difference step for Hessian-vector products at `x`.
pub fn default_hvp_step(x: &[f64]) -> f64 {
    1e-4 * (1.0 + norm_inf(x))
}

/// `(∇f(x + h·v) − ∇f(x − h·v)) / 2h`.
pub fn central_difference_hvp<F>(x: &[f64], v: &[f64], step: f64, mut grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "hvp step must be positive, got {step}"
        )));
    }
    let shifted =
        |sign: f64| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + sign * step * b).collect() };
    let plus = grad(&shifted(1.0))?;
    let minus = grad(&shifted(-1.0))?;
    let hv: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * step))
        .collect();
    if hv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite gradient in Hessian-vector product".into(),
        ));
    }
    Ok(hv)
}

/// A scalar function of a flat input with a reverse-mode gradient.
///
/// Implementations own mutable evaluation state, so each worker holds its
/// own clone.
pub trait ScalarField: Clone + Send {
    fn dim(&self) -> usize;

    fn value(&mut self, x: &[f64]) -> Result<f64>;

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>>;

    fn hvp(&mut self, x: &[f64], v: &[f64], step: f64) -> Result<Vec<f64>> {
        central_difference_hvp(x, v, step, |p| self.gradient(p))
    }

    fn is_twice_differentiable(&self) -> bool {
        true
    }
}

/// A graph with a single scalar output viewed as a [`ScalarField`].
#[derive(Debug, Clone)]
pub struct ScalarGraph {
    graph: Graph,
}

impl ScalarGraph {
    pub fn new(graph: Graph) -> Result<Self> {
        if graph.output_len() != 1 {
            return Err(Error::NonScalarOutput {
                len: graph.output_len(),
            });
        }
        Ok(Self { graph })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.graph.input_len() {
            return Err(Error::ShapeMismatch {
                expected: self.graph.input_shape.clone(),
                actual: vec![x.len()],
            });
        }
        Ok(())
    }
}

impl ScalarField for ScalarGraph {
    fn dim(&self) -> usize {
        self.graph.input_len()
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.graph.forward_slice(x)[0])
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.graph.forward_slice(x);
        Ok(self.graph.backward_seeded(&[1.0])?.into_data())
    }

    fn is_twice_differentiable(&self) -> bool {
        self.graph
            .activations()
            .all(Activation::is_twice_differentiable)
    }
}
