use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;

use crate::error::{arg_err, Error, Result};
use crate::kernels::{Conv2dGeom, Interp};
use crate::op::{self, Algebra, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether gradients may themselves be differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    FirstOrder,
    BuildGradGraph,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Caller-scoped record of every operation, in creation (= topological) order.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    mode: GradMode,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self { by_node: HashMap::new() }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id)
    }

    /// Gradient of `v`, or zeros when no path from the root reaches it.
    pub fn get_or_zeros(&self, v: &Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_mode(GradMode::FirstOrder)
    }

    pub fn with_mode(mode: GradMode) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            mode,
            consumed: Cell::new(false),
        }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value,
            op: Op::Constant,
            parents: Vec::new(),
            requires_grad: false,
        })
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::of(v)))
    }

    pub(crate) fn apply(&self, op: Op, inputs: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let (values, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<Tensor<T>> = inputs.iter().map(|v| nodes[v.id].value.clone()).collect();
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (values, rg)
        };
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let value = op::forward(&op, &refs)?;
        let parents = if requires_grad {
            inputs.iter().map(|v| v.id).collect()
        } else {
            Vec::new()
        };
        Ok(self.push_node(Node {
            value,
            op,
            parents,
            requires_grad,
        }))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        self.apply(Op::Concat(axis), parts)
    }

    fn check_root(&self, root: &Var<'_, T>) -> Result<()> {
        let shape = root.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        Ok(())
    }

    fn node_info(&self, id: usize) -> (Op, Vec<usize>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        (n.op.clone(), n.parents.clone(), n.requires_grad)
    }

    /// Reverse accumulation from a scalar `root` into every reachable leaf.
    /// Terminal: a second call on the same tape is rejected.
    pub fn backward(&self, root: &Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::BackwardConsumed);
        }
        self.check_root(root)?;
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(root.shape()));
        let mut out = Gradients::default();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (op, parents, requires_grad) = self.node_info(id);
            if !requires_grad {
                continue;
            }
            if op == Op::Leaf {
                out.by_node.insert(id, g);
                continue;
            }
            let (inputs, value, parent_rg) = {
                let nodes = self.nodes.borrow();
                let inputs: Vec<Tensor<T>> = parents.iter().map(|&p| nodes[p].value.clone()).collect();
                let rg: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
                (inputs, nodes[id].value.clone(), rg)
            };
            let pg = op::vjp(&op, &inputs, &value, &g, &parent_rg)?;
            for ((p, pg), rg) in parents.iter().zip(pg).zip(parent_rg) {
                let (Some(pg), true) = (pg, rg) else { continue };
                grads[*p] = Some(match grads[*p].take() {
                    None => pg,
                    Some(acc) => op::forward(&Op::Add, &[&acc, &pg])?,
                });
            }
        }
        Ok(out)
    }

    /// Gradients of `root` with respect to `wrt`, recorded as new differentiable nodes.
    pub fn grad_graph<'t>(&'t self, root: &Var<'t, T>, wrt: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if self.mode != GradMode::BuildGradGraph {
            return Err(Error::NotGradGraphMode);
        }
        self.check_root(root)?;
        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; root.id + 1];
        grads[root.id] = Some(self.constant(Tensor::ones(root.shape())));
        let mut found: HashMap<usize, Var<'t, T>> = HashMap::new();
        let first = wrt.iter().map(|w| w.id).min().unwrap_or(0);
        for id in (first..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if wrt.iter().any(|w| w.id == id) {
                found.insert(id, g);
            }
            let (op, parents, requires_grad) = self.node_info(id);
            if !requires_grad || parents.is_empty() {
                continue;
            }
            let inputs: Vec<Var<'t, T>> = parents.iter().map(|&p| Var { tape: self, id: p }).collect();
            let needs: Vec<bool> = parents.iter().map(|&p| p >= first && self.nodes.borrow()[p].requires_grad).collect();
            let pg = op::vjp(&op, &inputs, &Var { tape: self, id }, &g, &needs)?;
            for (p, pg) in parents.iter().zip(pg) {
                let Some(pg) = pg else { continue };
                if !self.nodes.borrow()[*p].requires_grad {
                    continue;
                }
                grads[*p] = Some(match grads[*p].take() {
                    None => pg,
                    Some(acc) => acc.add(&pg)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                found
                    .remove(&w.id)
                    .unwrap_or_else(|| self.constant(Tensor::zeros(w.shape())))
            })
            .collect())
    }

    /// Differentiable gradient of scalar `d_out` with respect to `input`.
    pub fn input_gradient<'t>(&'t self, d_out: &Var<'t, T>, input: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.grad_graph(d_out, std::slice::from_ref(input))?.remove(0))
    }
}

impl<'t, T: Scalar> Algebra<T> for Var<'t, T> {
    const EAGER: bool = false;

    fn apply(op: Op, inputs: &[&Self]) -> Result<Self> {
        let tape = inputs[0].tape;
        let vars: Vec<Var<'t, T>> = inputs.iter().map(|v| **v).collect();
        tape.apply(op, &vars)
    }

    fn constant_like(&self, value: Tensor<T>) -> Self {
        self.tape.constant(value)
    }

    fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    fn shape_vec(&self) -> Vec<usize> {
        self.shape()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        Algebra::value(self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    fn un(&self, op: Op) -> Result<Self> {
        self.tape.apply(op, &[*self])
    }

    fn bin(&self, op: Op, other: &Self) -> Result<Self> {
        self.tape.apply(op, &[*self, *other])
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        self.bin(Op::Add, o)
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.bin(Op::Sub, o)
    }

    pub fn mul(&self, o: &Self) -> Result<Self> {
        self.bin(Op::Mul, o)
    }

    pub fn div(&self, o: &Self) -> Result<Self> {
        self.bin(Op::Div, o)
    }

    pub fn neg(&self) -> Result<Self> {
        self.un(Op::Neg)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.un(Op::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Self> {
        self.un(Op::AddScalar(c))
    }

    pub fn sin(&self) -> Result<Self> {
        self.un(Op::Sin)
    }

    pub fn cos(&self) -> Result<Self> {
        self.un(Op::Cos)
    }

    pub fn exp(&self) -> Result<Self> {
        self.un(Op::Exp)
    }

    pub fn ln(&self) -> Result<Self> {
        self.un(Op::Ln)
    }

    pub fn softplus(&self) -> Result<Self> {
        self.un(Op::Softplus)
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.un(Op::Sigmoid)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Self> {
        self.un(Op::LeakyRelu(slope))
    }

    pub fn square(&self) -> Result<Self> {
        self.un(Op::Square)
    }

    pub fn matmul(&self, o: &Self) -> Result<Self> {
        self.bin(Op::Matmul { ta: false, tb: false }, o)
    }

    /// `self @ o^T`, the layout used for `[out, in]` weight matrices.
    pub fn matmul_t(&self, o: &Self) -> Result<Self> {
        self.bin(Op::Matmul { ta: false, tb: true }, o)
    }

    pub fn matmul_general(&self, o: &Self, ta: bool, tb: bool) -> Result<Self> {
        self.bin(Op::Matmul { ta, tb }, o)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        self.un(Op::BroadcastTo(shape.to_vec()))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        self.un(Op::SumTo(shape.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.un(Op::Reshape(shape.to_vec()))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        self.un(Op::Permute(axes.to_vec()))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.un(Op::Slice { axis, start, len })
    }

    pub fn sum(&self) -> Result<Self> {
        self.un(Op::Sum)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        self.un(Op::SumAxis { axis, keepdim })
    }

    pub fn mean(&self) -> Result<Self> {
        let n = self.value().numel();
        if n == 0 {
            return arg_err("mean", "empty tensor");
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn conv2d(&self, kernel: &Self, stride: usize, pad: usize) -> Result<Self> {
        self.bin(Op::Conv2d(Conv2dGeom { stride, pad }), kernel)
    }

    pub fn avg_pool2d(&self, k: usize) -> Result<Self> {
        self.un(Op::AvgPool2d(k))
    }

    /// Samples this `[GX,GY,GZ,F]` grid at normalized points `[P,3]`.
    pub fn grid_sample_3d(&self, points: &Self, mode: Interp) -> Result<Self> {
        self.bin(Op::GridSample3d(mode), points)
    }

    pub fn cumprod(&self, exclusive: bool) -> Result<Self> {
        self.un(Op::CumProd { exclusive })
    }

    /// Same value, cut off from the graph.
    /// Fused `sin(gamma * (self + bias) + beta)`; see [`Op::FilmSine`]. First order only.
    pub fn film_sine(&self, bias: &Self, gamma: &Self, beta: &Self) -> Result<Self> {
        self.tape.apply(Op::FilmSine, &[*self, *bias, *gamma, *beta])
    }

    pub fn detach(&self) -> Self {
        self.tape.constant(self.value())
    }
}
