//! Record-and-replay reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. A tape belongs to
//! one episode on one thread; nothing in here is shared.

use super::ops::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{dim_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Concat0(Vec<Var>),
    Slice0 {
        x: Var,
        start: usize,
    },
    BroadcastTo(Var),
    Resize(Var),
    Sum(Var),
    /// Mean two-class cross-entropy; the logit adjoint is computed on the forward pass.
    CrossEntropy {
        logits: Var,
        dlogits: Tensor<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    branches: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], kept for parameter leaves only.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            branches: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Hash of every piecewise branch taken so far (ReLU signs, loss
    /// clamping). Two evaluations with equal signatures lie on one smooth
    /// piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn note_branches(&mut self, taken: impl IntoIterator<Item = u8>) {
        for b in taken {
            self.branches =
                (self.branches.rotate_left(5) ^ u64::from(b)).wrapping_mul(0x517c_c1b7_2722_0a95);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Param, true)
    }

    /// All differentiable leaves recorded so far, in insertion order.
    pub fn params(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = ops::transpose(self.value(a))?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = ops::relu(self.value(a));
        let signs: Vec<u8> = self
            .value(a)
            .data()
            .iter()
            .map(|&v| (v > T::zero()) as u8)
            .collect();
        self.note_branches(signs);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = ops::sigmoid(self.value(a));
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), g)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = ops::softmax_lastdim(self.value(a))?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a), g))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        let value = ops::conv2d(self.value(x), self.value(k), stride, padding)?;
        let g = self.any_grad(&[x, k]);
        Ok(self.push(value, Op::Conv2d { x, k, geom }, g))
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let value = {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            ops::concat0(&refs)?
        };
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::Concat0(parts.to_vec()), g))
    }

    pub fn slice0(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = ops::slice0(self.value(x), start, end)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Slice0 { x, start }, g))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = ops::broadcast_to(self.value(x), shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::BroadcastTo(x), g))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Resize(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let g = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Mean of `vars` (all of one shape).
    pub fn average(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = match vars.split_first() {
            Some(x) => x,
            None => return dim_err("average of an empty list"),
        };
        let mut acc = first;
        for &v in rest {
            if self.shape(v) != self.shape(first) {
                return dim_err(format!(
                    "average over differing shapes {:?} and {:?}",
                    self.shape(first),
                    self.shape(v)
                ));
            }
            acc = self.add(acc, v)?;
        }
        if vars.len() == 1 {
            return Ok(acc);
        }
        Ok(self.scale(acc, T::one() / T::from_f64(vars.len() as f64)))
    }

    /// Mean per-pixel negative log-likelihood of a `2×H×W` logit map against a
    /// binary `H×W` target, with probabilities clamped to `[clamp, 1 − clamp]`.
    pub fn cross_entropy2(&mut self, logits: Var, target: &[bool], clamp: f64) -> Result<Var> {
        let lv = self.value(logits);
        let (h, w) = match lv.shape() {
            [2, h, w] => (*h, *w),
            s => return dim_err(format!("cross-entropy logits must be 2×H×W, got {s:?}")),
        };
        let n = h * w;
        if target.len() != n {
            return dim_err(format!(
                "cross-entropy target has {} pixels, logits {h}×{w}",
                target.len()
            ));
        }
        let (l0, l1) = lv.data().split_at(n);
        let lo = clamp;
        let hi = 1.0 - clamp;
        let inv_n = 1.0 / n as f64;
        let mut terms = Vec::with_capacity(n);
        let mut taken = Vec::with_capacity(n);
        let mut d = vec![T::zero(); 2 * n];
        for i in 0..n {
            let (a, b) = (l0[i].to_f64(), l1[i].to_f64());
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let z = ea + eb;
            let p = [ea / z, eb / z];
            let t = target[i] as usize;
            let pt = p[t];
            taken.push(if pt <= lo {
                1
            } else if pt >= hi {
                2
            } else {
                0
            });
            terms.push(if pt <= lo {
                -lo.ln()
            } else if pt >= hi {
                -hi.ln()
            } else {
                m - [a, b][t] + (-(a - b).abs()).exp().ln_1p()
            });
            if pt > lo && pt < hi {
                for c in 0..2 {
                    let onehot = if c == t { 1.0 } else { 0.0 };
                    d[c * n + i] = T::from_f64((p[c] - onehot) * inv_n);
                }
            }
        }
        self.note_branches(taken);
        let value = Tensor::scalar(T::from_f64(super::tensor::compensated_sum(terms) * inv_n));
        let g = self.any_grad(&[logits]);
        let dlogits = Tensor::from_parts(vec![2, h, w], d);
        Ok(self.push(value, Op::CrossEntropy { logits, dlogits }, g))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return dim_err(format!(
                "backward root must be a scalar, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.shape(root).to_vec();
        grads[root.0] = Some(Tensor::ones(root_shape));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Param | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Param) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "adjoint shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    ops::mm_a_bt_acc(g.data(), bv.data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    ops::mm_at_b_acc(av.data(), g.data(), m, k, n, &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, ops::transpose(&g)?);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(shape)?);
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, ops::sum_to_shape(&g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, ops::sum_to_shape(&g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, ops::sum_to_shape(&g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let neg = g.map(|v| -v);
                    self.accumulate(grads, *b, ops::sum_to_shape(&neg, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = ops::broadcast_binary(&g, self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, ops::sum_to_shape(&ga, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let gb = ops::broadcast_binary(&g, self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, ops::sum_to_shape(&gb, self.shape(*b)));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), data));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().expect("rank ≥ 1");
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let inner = ops::dot(yr, gr);
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Conv2d { x, k, geom } => {
                let p = geom.positions();
                let kk = geom.patch_len();
                let xv = self.value(*x);
                if self.requires_grad(*k) {
                    let cols = ops::im2col(xv.data(), geom);
                    let mut dk = vec![T::zero(); geom.c_out * kk];
                    ops::mm_a_bt_acc(g.data(), &cols, geom.c_out, p, kk, &mut dk);
                    self.accumulate(grads, *k, Tensor::from_parts(self.shape(*k).to_vec(), dk));
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); kk * p];
                    ops::mm_at_b_acc(
                        self.value(*k).data(),
                        g.data(),
                        geom.c_out,
                        kk,
                        p,
                        &mut dcols,
                    );
                    let dx = ops::col2im(&dcols, geom);
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
            }
            Op::Concat0(parts) => {
                let inner: usize = g.shape()[1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let lead = self.shape(p)[0];
                    if self.requires_grad(p) {
                        let data = g.data()[offset * inner..(offset + lead) * inner].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), data));
                    }
                    offset += lead;
                }
            }
            Op::Slice0 { x, start } => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut full = Tensor::zeros(shape);
                let off = start * inner;
                full.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, full);
            }
            Op::BroadcastTo(x) => {
                self.accumulate(grads, *x, ops::sum_to_shape(&g, self.shape(*x)));
            }
            Op::Resize(x) => {
                self.accumulate(grads, *x, ops::bilinear_resize_adjoint(&g, self.shape(*x)));
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), s));
            }
            Op::CrossEntropy { logits, dlogits } => {
                let s = g.item();
                self.accumulate(grads, *logits, dlogits.map(|v| v * s));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param(Tensor::scalar(5.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().item(), 2.0);
        assert_eq!(tape.params(), vec![x]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64s([2], &[1.0, -2.0]).unwrap());
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn equal_logits_give_ln_two() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros([2, 3, 3]));
        let target = vec![true, false, true, false, false, true, true, true, false];
        let loss = tape.cross_entropy2(l, &target, 1e-7).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
