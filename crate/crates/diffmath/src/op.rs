//! Primitive table: forward evaluation and vector-Jacobian products.
//!
//! Every VJP is written against [`Algebra`], so the same rule runs eagerly on
//! tensors (first-order backward) or records new nodes on a tape
//! (gradient-of-gradient).

use crate::error::{arg_err, Error, Result};
use crate::kernels::{self, Conv2dGeom, Interp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Sin,
    Cos,
    Exp,
    Ln,
    Softplus,
    Sigmoid,
    LeakyRelu(f64),
    Square,
    Matmul { ta: bool, tb: bool },
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Pad { axis: usize, start: usize, total: usize },
    Sum,
    SumAxis { axis: usize, keepdim: bool },
    Conv2d(Conv2dGeom),
    Conv2dInputGrad(Conv2dGeom, (usize, usize)),
    Conv2dWeightGrad(Conv2dGeom, (usize, usize)),
    AvgPool2d(usize),
    AvgPool2dGrad(usize),
    GridSample3d(Interp),
    GridSample3dGradGrid(Interp, Vec<usize>),
    GridSample3dGradPoints(Interp),
    CumProd { exclusive: bool },
    CumProdGrad { exclusive: bool },
    /// `sin(gamma * (x + bias) + beta)` for `x [B, P, N]`, `bias [N]`, `gamma, beta [B, 1, N]`.
    FilmSine,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sin => "sine",
            Op::Cos => "cosine",
            Op::Exp => "exponential",
            Op::Ln => "logarithm",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Square => "square",
            Op::Matmul { .. } => "matmul",
            Op::BroadcastTo(_) => "broadcast",
            Op::SumTo(_) => "sum_to",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Sum => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dInputGrad(..) => "conv2d_input_grad",
            Op::Conv2dWeightGrad(..) => "conv2d_weight_grad",
            Op::AvgPool2d(_) => "avg_pool2d",
            Op::AvgPool2dGrad(_) => "avg_pool2d_grad",
            Op::GridSample3d(_) => "grid_sample_3d",
            Op::GridSample3dGradGrid(..) => "grid_sample_3d_grad_grid",
            Op::GridSample3dGradPoints(_) => "grid_sample_3d_grad_points",
            Op::CumProd { .. } => "cumprod",
            Op::CumProdGrad { .. } => "cumprod_grad",
            Op::FilmSine => "film_sine",
        }
    }

    fn arity(&self) -> Option<usize> {
        Some(match self {
            Op::Leaf | Op::Constant => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Matmul { .. } => 2,
            Op::Conv2d(_) | Op::Conv2dInputGrad(..) | Op::Conv2dWeightGrad(..) => 2,
            Op::GridSample3d(_) | Op::GridSample3dGradGrid(..) | Op::CumProdGrad { .. } => 2,
            Op::GridSample3dGradPoints(_) => 3,
            Op::FilmSine => 4,
            Op::Concat(_) => return None,
            _ => 1,
        })
    }
}

/// Evaluates `op` on concrete tensors.
pub fn forward<T: Scalar>(op: &Op, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if let Some(n) = op.arity() {
        if x.len() != n {
            return arg_err(op.name(), format!("expected {n} inputs, got {}", x.len()));
        }
    }
    let name = op.name();
    Ok(match op {
        Op::Leaf | Op::Constant => return arg_err(name, "not an operation"),
        Op::Add => kernels::binary(name, x[0], x[1], |a, b| a + b)?,
        Op::Sub => kernels::binary(name, x[0], x[1], |a, b| a - b)?,
        Op::Mul => kernels::binary(name, x[0], x[1], |a, b| a * b)?,
        Op::Div => kernels::binary(name, x[0], x[1], |a, b| a / b)?,
        Op::Neg => x[0].map(|v| -v),
        Op::Scale(c) => {
            let c = T::of(*c);
            x[0].map(|v| v * c)
        }
        Op::AddScalar(c) => {
            let c = T::of(*c);
            x[0].map(|v| v + c)
        }
        Op::Sin => kernels::sin(x[0]),
        Op::Cos => kernels::cos(x[0]),
        Op::Exp => x[0].map(|v| v.exp()),
        Op::Ln => x[0].map(|v| v.ln()),
        Op::Softplus => x[0].map(kernels::softplus_scalar),
        Op::Sigmoid => x[0].map(kernels::sigmoid_scalar),
        Op::LeakyRelu(s) => {
            let s = T::of(*s);
            x[0].map(|v| if v >= T::zero() { v } else { v * s })
        }
        Op::Square => x[0].map(|v| v * v),
        Op::Matmul { ta, tb } => kernels::matmul(x[0], x[1], *ta, *tb)?,
        Op::BroadcastTo(s) => kernels::broadcast_to(x[0], s)?,
        Op::SumTo(s) => kernels::sum_to(x[0], s)?,
        Op::Reshape(s) => x[0].reshape(s.clone())?,
        Op::Permute(axes) => kernels::permute(x[0], axes)?,
        Op::Concat(axis) => kernels::concat(x, *axis)?,
        Op::Slice { axis, start, len } => kernels::slice(x[0], *axis, *start, *len)?,
        Op::Pad { axis, start, total } => kernels::pad_axis(x[0], *axis, *start, *total)?,
        Op::Sum => Tensor::scalar(x[0].sum_all()),
        Op::SumAxis { axis, keepdim } => kernels::sum_axis(x[0], *axis, *keepdim)?,
        Op::Conv2d(g) => kernels::conv2d(x[0], x[1], *g)?,
        Op::Conv2dInputGrad(g, hw) => kernels::conv2d_input_grad(x[0], x[1], *g, *hw)?,
        Op::Conv2dWeightGrad(g, khw) => kernels::conv2d_weight_grad(x[0], x[1], *g, *khw)?,
        Op::AvgPool2d(k) => kernels::avg_pool2d(x[0], *k)?,
        Op::AvgPool2dGrad(k) => kernels::avg_pool2d_grad(x[0], *k)?,
        Op::GridSample3d(m) => kernels::grid_sample_3d(x[0], x[1], *m)?,
        Op::GridSample3dGradGrid(m, s) => kernels::grid_sample_3d_grad_grid(x[0], x[1], s, *m)?,
        Op::GridSample3dGradPoints(m) => kernels::grid_sample_3d_grad_points(x[0], x[1], x[2], *m)?,
        Op::CumProd { exclusive } => kernels::cumprod(x[0], *exclusive)?,
        Op::CumProdGrad { exclusive } => kernels::cumprod_grad(x[0], x[1], *exclusive)?,
        Op::FilmSine => kernels::film_sine(x[0], x[1], x[2], x[3])?,
    })
}

fn opt<X>(want: bool, f: impl FnOnce() -> Result<X>) -> Result<Option<X>> {
    if want {
        f().map(Some)
    } else {
        Ok(None)
    }
}

/// Something VJP rules can be written against: concrete tensors or tape variables.
pub trait Algebra<T: Scalar>: Clone + Sized {
    /// Whether values are concrete tensors, so fused first-order kernels may be used.
    const EAGER: bool;
    fn apply(op: Op, inputs: &[&Self]) -> Result<Self>;
    /// A non-differentiable value living alongside `self`.
    fn constant_like(&self, value: Tensor<T>) -> Self;
    fn value(&self) -> Tensor<T>;
    fn shape_vec(&self) -> Vec<usize>;
}

impl<T: Scalar> Algebra<T> for Tensor<T> {
    const EAGER: bool = true;

    fn apply(op: Op, inputs: &[&Self]) -> Result<Self> {
        forward(&op, inputs)
    }

    fn constant_like(&self, value: Tensor<T>) -> Self {
        value
    }

    fn value(&self) -> Tensor<T> {
        self.clone()
    }

    fn shape_vec(&self) -> Vec<usize> {
        self.shape().to_vec()
    }
}

fn un<T: Scalar, X: Algebra<T>>(op: Op, a: &X) -> Result<X> {
    X::apply(op, &[a])
}

fn bin<T: Scalar, X: Algebra<T>>(op: Op, a: &X, b: &X) -> Result<X> {
    X::apply(op, &[a, b])
}

fn reduce_to<T: Scalar, X: Algebra<T>>(g: X, shape: &[usize]) -> Result<X> {
    if g.shape_vec() == shape {
        Ok(g)
    } else {
        un(Op::SumTo(shape.to_vec()), &g)
    }
}

/// Gradients of `op`'s inputs given the output cotangent `g`.
/// `needs[i]` marks inputs whose gradient is wanted; others may come back as `None`.
pub fn vjp<T: Scalar, X: Algebra<T>>(op: &Op, x: &[X], out: &X, g: &X, needs: &[bool]) -> Result<Vec<Option<X>>> {
    let one = |v: X| Ok(vec![Some(v)]);
    let need = |i: usize| needs.get(i).copied().unwrap_or(true);
    match op {
        Op::Leaf | Op::Constant => Ok(vec![]),
        Op::Add => Ok(vec![
            opt(need(0), || reduce_to(g.clone(), &x[0].shape_vec()))?,
            opt(need(1), || reduce_to(g.clone(), &x[1].shape_vec()))?,
        ]),
        Op::Sub => Ok(vec![
            opt(need(0), || reduce_to(g.clone(), &x[0].shape_vec()))?,
            opt(need(1), || reduce_to(un(Op::Neg, g)?, &x[1].shape_vec()))?,
        ]),
        Op::Mul => Ok(vec![
            opt(need(0), || reduce_to(bin(Op::Mul, g, &x[1])?, &x[0].shape_vec()))?,
            opt(need(1), || reduce_to(bin(Op::Mul, g, &x[0])?, &x[1].shape_vec()))?,
        ]),
        Op::Div => {
            let ga = bin(Op::Div, g, &x[1])?;
            let gb = opt(need(1), || reduce_to(un(Op::Neg, &bin(Op::Mul, &ga, out)?)?, &x[1].shape_vec()))?;
            Ok(vec![opt(need(0), || reduce_to(ga.clone(), &x[0].shape_vec()))?, gb])
        }
        Op::Neg => one(un(Op::Neg, g)?),
        Op::Scale(c) => one(un(Op::Scale(*c), g)?),
        Op::AddScalar(_) => one(g.clone()),
        Op::Sin => one(bin(Op::Mul, g, &un(Op::Cos, &x[0])?)?),
        Op::Cos => one(un(Op::Neg, &bin(Op::Mul, g, &un(Op::Sin, &x[0])?)?)?),
        Op::Exp => one(bin(Op::Mul, g, out)?),
        Op::Ln => one(bin(Op::Div, g, &x[0])?),
        Op::Softplus => one(bin(Op::Mul, g, &un(Op::Sigmoid, &x[0])?)?),
        Op::Sigmoid => {
            let one_minus = un(Op::AddScalar(1.0), &un(Op::Neg, out)?)?;
            one(bin(Op::Mul, g, &bin(Op::Mul, out, &one_minus)?)?)
        }
        Op::LeakyRelu(s) => {
            // Piecewise-linear: the mask is a constant, so the second derivative is 0.
            let s = T::of(*s);
            let mask = x[0].value().map(|v| if v >= T::zero() { T::one() } else { s });
            one(bin(Op::Mul, g, &g.constant_like(mask))?)
        }
        Op::Square => one(un(Op::Scale(2.0), &bin(Op::Mul, g, &x[0])?)?),
        Op::Matmul { ta, tb } => {
            let (a, b) = (&x[0], &x[1]);
            let mm = |p: &X, q: &X, ta: bool, tb: bool| bin(Op::Matmul { ta, tb }, p, q);
            let ga = opt(need(0), || match (ta, tb) {
                (false, false) => mm(g, b, false, true),
                (true, false) => mm(b, g, false, true),
                (false, true) => mm(g, b, false, false),
                (true, true) => mm(b, g, true, true),
            })?;
            let gb = opt(need(1), || match (ta, tb) {
                (false, false) => mm(a, g, true, false),
                (true, false) => mm(a, g, false, false),
                (false, true) => mm(g, a, true, false),
                (true, true) => mm(g, a, true, true),
            })?;
            Ok(vec![ga, gb])
        }
        Op::BroadcastTo(_) => one(reduce_to(g.clone(), &x[0].shape_vec())?),
        Op::SumTo(_) | Op::Sum => one(un(Op::BroadcastTo(x[0].shape_vec()), g)?),
        Op::Reshape(_) => one(un(Op::Reshape(x[0].shape_vec()), g)?),
        Op::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            one(un(Op::Permute(inv), g)?)
        }
        Op::Concat(axis) => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(x.len());
            for part in x {
                let len = part.shape_vec()[*axis];
                grads.push(opt(need(grads.len()), || un(Op::Slice { axis: *axis, start, len }, g))?);
                start += len;
            }
            Ok(grads)
        }
        Op::Slice { axis, start, .. } => {
            let total = x[0].shape_vec()[*axis];
            one(un(Op::Pad { axis: *axis, start: *start, total }, g)?)
        }
        Op::Pad { axis, start, .. } => {
            let len = x[0].shape_vec()[*axis];
            one(un(Op::Slice { axis: *axis, start: *start, len }, g)?)
        }
        Op::SumAxis { axis, .. } => {
            let mut kept = x[0].shape_vec();
            kept[*axis] = 1;
            let g = un(Op::Reshape(kept), g)?;
            one(un(Op::BroadcastTo(x[0].shape_vec()), &g)?)
        }
        Op::Conv2d(geom) => {
            let xs = x[0].shape_vec();
            let ws = x[1].shape_vec();
            Ok(vec![
                opt(need(0), || bin(Op::Conv2dInputGrad(*geom, (xs[2], xs[3])), g, &x[1]))?,
                opt(need(1), || bin(Op::Conv2dWeightGrad(*geom, (ws[2], ws[3])), &x[0], g))?,
            ])
        }
        Op::Conv2dInputGrad(geom, _) => {
            // out = A_w^T g0: adjoint pair (conv, conv-transpose) in both arguments.
            let ws = x[1].shape_vec();
            Ok(vec![
                opt(need(0), || bin(Op::Conv2d(*geom), g, &x[1]))?,
                opt(need(1), || bin(Op::Conv2dWeightGrad(*geom, (ws[2], ws[3])), g, &x[0]))?,
            ])
        }
        Op::Conv2dWeightGrad(geom, _) => {
            let xs = x[0].shape_vec();
            Ok(vec![
                opt(need(0), || bin(Op::Conv2dInputGrad(*geom, (xs[2], xs[3])), &x[1], g))?,
                opt(need(1), || bin(Op::Conv2d(*geom), &x[0], g))?,
            ])
        }
        Op::AvgPool2d(k) => one(un(Op::AvgPool2dGrad(*k), g)?),
        Op::AvgPool2dGrad(k) => one(un(Op::AvgPool2d(*k), g)?),
        Op::GridSample3d(mode) => Ok(vec![
            opt(need(0), || bin(Op::GridSample3dGradGrid(*mode, x[0].shape_vec()), &x[1], g))?,
            opt(need(1), || X::apply(Op::GridSample3dGradPoints(*mode), &[&x[0], &x[1], g]))?,
        ]),
        Op::CumProd { exclusive } => one(bin(Op::CumProdGrad { exclusive: *exclusive }, &x[0], g)?),
        Op::FilmSine => {
            if !X::EAGER {
                return Err(Error::NoSecondOrder(op.name()));
            }
            let v: Vec<Tensor<T>> = x.iter().map(|a| a.value()).collect();
            let grads = kernels::film_sine_grads(&v[0], &v[1], &v[2], &v[3], &g.value())?;
            Ok(grads.into_iter().map(|t| Some(g.constant_like(t))).collect())
        }
        Op::GridSample3dGradGrid(..) | Op::GridSample3dGradPoints(_) | Op::CumProdGrad { .. } => {
            Err(Error::NoSecondOrder(op.name()))
        }
    }
}

