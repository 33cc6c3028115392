use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Broadcast bookkeeping for a binary op: `None` means the operand already
/// has the output shape.
#[derive(Debug)]
struct Bcast {
    lhs: Option<Vec<usize>>,
    rhs: Option<Vec<usize>>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Clamp(usize, T, T),
    MatMul(usize, usize, [usize; 3]),
    Conv {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Upsample(usize),
    InstanceNorm {
        input: usize,
        inv_std: Vec<T>,
    },
    Softmax(usize),
    SumAxes {
        input: usize,
        /// output slot of each input element
        slot: Vec<usize>,
    },
    MaxAxes {
        input: usize,
        argmax: Vec<usize>,
    },
    Concat(Vec<usize>),
    Reshape(usize),
    Mse(usize, usize),
    StopGrad,
}

#[derive(Debug)]
struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node index is already a topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, grad)
    }

    pub fn param(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].grad
    }

    pub fn concat(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?
            .value();
        let tail = &first.shape()[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.rank() != first.rank() || &v.shape()[1..] != tail {
                return Err(Error::shape("concat", first.shape(), v.shape()));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let grad = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(ids), grad))
    }

    /// Reverse sweep from a scalar `loss`. Every call returns fresh gradients;
    /// nothing is accumulated across calls.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        let mut out: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        if root.grad {
            grads[loss.id] = Some(vec![T::one()]);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.grad {
                continue;
            }
            out[id] = Some(Tensor::new(node.value.shape(), g.clone())?);
            let needs = |i: usize| nodes[i].grad;
            let send = |grads: &mut Vec<Option<Vec<T>>>, i: usize, contrib: Vec<T>| {
                match grads[i].as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = *a + c;
                        }
                    }
                    None => grads[i] = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if needs(*a) {
                        let ga = reduce(&g, bc.lhs.as_deref(), val(*a).len());
                        send(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let mut gb = reduce(&g, bc.rhs.as_deref(), val(*b).len());
                        if neg {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        send(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b, bc) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    let at = |v: &[T], idx: &Option<Vec<usize>>, k: usize| match idx {
                        Some(ix) => v[ix[k]],
                        None => v[k],
                    };
                    if needs(*a) {
                        let prod: Vec<T> =
                            g.iter().enumerate().map(|(k, &gv)| gv * at(vb, &bc.rhs, k)).collect();
                        send(&mut grads, *a, reduce(&prod, bc.lhs.as_deref(), va.len()));
                    }
                    if needs(*b) {
                        let prod: Vec<T> =
                            g.iter().enumerate().map(|(k, &gv)| gv * at(va, &bc.lhs, k)).collect();
                        send(&mut grads, *b, reduce(&prod, bc.rhs.as_deref(), vb.len()));
                    }
                }
                Op::Scale(a, c) => {
                    send(&mut grads, *a, g.iter().map(|&v| v * *c).collect());
                }
                Op::AddScalar(a) => send(&mut grads, *a, g),
                Op::Relu(a) => {
                    let x = val(*a).data();
                    let gi = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(&mut grads, *a, gi);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let gi = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                    send(&mut grads, *a, gi);
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    send(&mut grads, *a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a).data();
                    let gi = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                        .collect();
                    send(&mut grads, *a, gi);
                }
                Op::MatMul(a, b, [m, k, n]) => {
                    if needs(*a) {
                        let bt = kernels::transpose(val(*b).data(), *k, *n);
                        send(&mut grads, *a, kernels::matmul(&g, &bt, *m, *n, *k));
                    }
                    if needs(*b) {
                        let at = kernels::transpose(val(*a).data(), *m, *k);
                        send(&mut grads, *b, kernels::matmul(&at, &g, *k, *m, *n));
                    }
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (gi, gw, gb) = kernels::conv2d_backward(
                        geom,
                        val(*input).data(),
                        val(*weight).data(),
                        &g,
                        needs(*input),
                        needs(*weight),
                    );
                    if let Some(gi) = gi {
                        send(&mut grads, *input, gi);
                    }
                    if let Some(gw) = gw {
                        send(&mut grads, *weight, gw);
                    }
                    if let Some(b) = bias {
                        if needs(*b) {
                            send(&mut grads, *b, gb);
                        }
                    }
                }
                Op::Upsample(a) => {
                    let s = val(*a).shape().to_vec();
                    send(&mut grads, *a, kernels::upsample2x_backward(&g, s[0], s[1], s[2]));
                }
                Op::InstanceNorm { input, inv_std } => {
                    let gi = kernels::instance_norm_backward(node.value.data(), inv_std, &g);
                    send(&mut grads, *input, gi);
                }
                Op::Softmax(a) => {
                    let s = node.value.shape();
                    let plane = s[1] * s[2];
                    let gi = kernels::spatial_softmax_backward(node.value.data(), &g, plane);
                    send(&mut grads, *a, gi);
                }
                Op::SumAxes { input, slot } => {
                    send(&mut grads, *input, slot.iter().map(|&o| g[o]).collect());
                }
                Op::MaxAxes { input, argmax } => {
                    let mut gi = vec![T::zero(); val(*input).len()];
                    for (&i, &gv) in argmax.iter().zip(&g) {
                        gi[i] = gi[i] + gv;
                    }
                    send(&mut grads, *input, gi);
                }
                Op::Concat(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let n = val(i).len();
                        if needs(i) {
                            send(&mut grads, i, g[off..off + n].to_vec());
                        }
                        off += n;
                    }
                }
                Op::Reshape(a) => send(&mut grads, *a, g),
                Op::Mse(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    let k = T::of(2.0) * g[0] / T::of(va.len() as f64);
                    let diff: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| k * (x - y)).collect();
                    if needs(*b) {
                        send(&mut grads, *b, diff.iter().map(|&d| -d).collect());
                    }
                    if needs(*a) {
                        send(&mut grads, *a, diff);
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn reduce<T: Scalar>(g: &[T], index: Option<&[usize]>, len: usize) -> Vec<T> {
    match index {
        None => g.to_vec(),
        Some(ix) => kernels::reduce_broadcast(g, ix, len),
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.grad_of(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize, Bcast) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (value, bc) = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            (
                Tensor::new(a.shape(), data)?,
                Bcast {
                    lhs: None,
                    rhs: None,
                },
            )
        } else {
            let shape = kernels::broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
            let ia = kernels::broadcast_index(a.shape(), &shape);
            let ib = kernels::broadcast_index(b.shape(), &shape);
            let (da, db) = (a.data(), b.data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            let lhs = (a.shape() != shape.as_slice()).then_some(ia);
            let rhs = (b.shape() != shape.as_slice()).then_some(ib);
            (Tensor::new(&shape, data)?, Bcast { lhs, rhs })
        };
        let grad = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(value, op(self.id, other.id, bc), grad))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn square(&self) -> Result<Var<'g, T>> {
        self.mul(*self)
    }

    pub fn scale(&self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Var<'g, T> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// `1 - x`, computed as `1 + (-x)` so that `x = 0` and `x = 1` are exact.
    pub fn one_minus(&self) -> Var<'g, T> {
        self.scale(-T::one()).add_scalar(T::one())
    }

    pub fn relu(&self) -> Var<'g, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let v = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'g, T> {
        let v = self.value().map(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Var<'g, T> {
        let v = self.value().map(|x| x.max(lo).min(hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    /// Returns the value unchanged and blocks backpropagation.
    pub fn stop_gradient(&self) -> Var<'g, T> {
        let v = (*self.value()).clone();
        self.graph.push(v, Op::StopGrad, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// `(m×k)·(k×n)` matrix product.
    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let grad = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            Tensor::new(&[m, n], data)?,
            Op::MatMul(self.id, other.id, [m, k, n]),
            grad,
        ))
    }

    /// 2-D convolution of a `C×H×W` map with an `O×C×kh×kw` kernel and zero
    /// padding.
    pub fn conv2d(
        &self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 3 || w.rank() != 4 || x.shape()[0] != w.shape()[1] {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let geom = ConvGeom {
            in_c: x.shape()[0],
            in_h: x.shape()[1],
            in_w: x.shape()[2],
            out_c: w.shape()[0],
            k_h: w.shape()[2],
            k_w: w.shape()[3],
            stride,
            pad,
        };
        if geom.in_h + 2 * pad < geom.k_h || geom.in_w + 2 * pad < geom.k_w {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let bias_val = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [geom.out_c] {
                    return Err(Error::shape("conv2d bias", bv.shape(), &[geom.out_c]));
                }
                Some(bv)
            }
            None => None,
        };
        let data = kernels::conv2d_forward(&geom, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()));
        let grad = self.requires_grad()
            || weight.requires_grad()
            || bias.map_or(false, |b| b.requires_grad());
        let value = Tensor::new(&[geom.out_c, geom.out_h(), geom.out_w()], data)?;
        Ok(self.graph.push(
            value,
            Op::Conv {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            grad,
        ))
    }

    /// Nearest-neighbour 2× upsampling of a `C×H×W` map.
    pub fn upsample2x(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(Error::shape("upsample2x", x.shape(), &[0, 0, 0]));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let v = Tensor::new(&[c, 2 * h, 2 * w], kernels::upsample2x(x.data(), c, h, w))?;
        Ok(self.unary(v, Op::Upsample(self.id)))
    }

    /// Per-channel normalization over the spatial plane (no affine terms).
    pub fn instance_norm(&self, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(Error::shape("instance_norm", x.shape(), &[0, 0, 0]));
        }
        let (data, inv_std) = kernels::instance_norm(x.data(), x.shape()[0], eps);
        let v = Tensor::new(x.shape(), data)?;
        Ok(self.unary(
            v,
            Op::InstanceNorm {
                input: self.id,
                inv_std,
            },
        ))
    }

    /// Softmax over the `H×W` plane of each channel of a `C×H×W` map.
    pub fn spatial_softmax(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(Error::shape("spatial_softmax", x.shape(), &[0, 0, 0]));
        }
        let plane = x.shape()[1] * x.shape()[2];
        let v = Tensor::new(x.shape(), kernels::spatial_softmax(x.data(), plane))?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    fn reduced_shape(&self, axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::invalid(format!(
                    "reduce: axis {a} out of range for shape {:?}",
                    x.shape()
                )));
            }
            shape[a] = 1;
        }
        let slot = kernels::broadcast_index(&shape, x.shape());
        Ok((shape, slot))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let (shape, slot) = self.reduced_shape(axes)?;
        let x = self.value();
        let mut data = vec![T::zero(); shape.iter().product()];
        for (&v, &o) in x.data().iter().zip(&slot) {
            data[o] = data[o] + v;
        }
        Ok(self.unary(
            Tensor::new(&shape, data)?,
            Op::SumAxes {
                input: self.id,
                slot,
            },
        ))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes)?.scale(T::one() / T::of(n as f64)))
    }

    /// Max over `axes`, keeping them as size-1 dimensions. Gradient flows to
    /// the first maximal element.
    pub fn max_axes(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let (shape, slot) = self.reduced_shape(axes)?;
        let x = self.value();
        let n = shape.iter().product();
        let mut data = vec![T::neg_infinity(); n];
        let mut argmax = vec![0usize; n];
        for (i, (&v, &o)) in x.data().iter().zip(&slot).enumerate() {
            if v > data[o] {
                data[o] = v;
                argmax[o] = i;
            }
        }
        Ok(self.unary(
            Tensor::new(&shape, data)?,
            Op::MaxAxes {
                input: self.id,
                argmax,
            },
        ))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'g, T>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum_axes(&axes)?.reshape(&[])
    }

    /// Mean squared error against `target`, as a rank-0 tensor.
    pub fn mse(&self, target: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("mse", a.shape(), b.shape()));
        }
        let n = T::of(a.len() as f64);
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let grad = self.requires_grad() || target.requires_grad();
        Ok(self
            .graph
            .push(Tensor::scalar(s / n), Op::Mse(self.id, target.id), grad))
    }
}
