//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] runs once per tape
//! and accumulates gradients into the leaf nodes. A tape and its tensors are
//! confined to a single worker; independent tapes may run in parallel.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::element::Element;
use crate::error::{DrnError, Result};
use crate::ops;
use crate::tensor::Tensor;

static TAPE_IDS: AtomicU32 = AtomicU32::new(0);

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: u32,
    tape: u32,
}

enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    PixelShuffle {
        input: Var,
        r: usize,
    },
    LeakyRelu {
        input: Var,
        slope: E,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulBroadcast {
        a: Var,
        scale: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    L1Loss {
        pred: Var,
        target: Var,
    },
    MulConst {
        input: Var,
        c: E,
    },
    DotConst {
        input: Var,
        weights: Tensor<E>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op<E>,
}

pub struct Tape<E: Element = f32> {
    id: u32,
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    backward_done: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor; it is tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Registers a constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var {
            idx,
            tape: self.id,
        }
    }

    #[inline]
    fn node(&self, v: Var) -> &Node<E> {
        assert_eq!(v.tape, self.id, "Var used on a different tape");
        &self.nodes[v.idx as usize]
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if the node received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        assert_eq!(v.tape, self.id, "Var used on a different tape");
        self.grads[v.idx as usize].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        assert_eq!(v.tape, self.id, "Var used on a different tape");
        self.grads[v.idx as usize].take()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d_forward(
            &self.node(input).value,
            &self.node(weight).value,
            bias.map(|b| &self.node(b).value),
            stride,
            padding,
        )?;
        let rg = self.node(input).requires_grad
            || self.node(weight).requires_grad
            || bias.is_some_and(|b| self.node(b).requires_grad);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(&self.node(input).value, r)?;
        let rg = self.node(input).requires_grad;
        Ok(self.push(out, rg, Op::PixelShuffle { input, r }))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: E) -> Var {
        let out = ops::leaky_relu(&self.node(input).value, slope);
        let rg = self.node(input).requires_grad;
        self.push(out, rg, Op::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(&self.node(input).value);
        let rg = self.node(input).requires_grad;
        self.push(out, rg, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(&self.node(input).value);
        let rg = self.node(input).requires_grad;
        self.push(out, rg, Op::Sigmoid { input })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(&self.node(input).value)?;
        let rg = self.node(input).requires_grad;
        Ok(self.push(out, rg, Op::GlobalAvgPool { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(&self.node(a).value, &self.node(b).value)?;
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn mul_broadcast(&mut self, a: Var, scale: Var) -> Result<Var> {
        let out = ops::mul_broadcast(&self.node(a).value, &self.node(scale).value)?;
        let rg = self.node(a).requires_grad || self.node(scale).requires_grad;
        Ok(self.push(out, rg, Op::MulBroadcast { a, scale }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(&self.node(a).value, &self.node(b).value)?;
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(out, rg, Op::ConcatChannels { a, b }))
    }

    /// Mean absolute error as a scalar `(1, 1, 1, 1)` node.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let v = ops::l1_loss(&self.node(pred).value, &self.node(target).value)?;
        let out = Tensor::new([1, 1, 1, 1], vec![v]).expect("scalar");
        let rg = self.node(pred).requires_grad || self.node(target).requires_grad;
        Ok(self.push(out, rg, Op::L1Loss { pred, target }))
    }

    pub fn mul_const(&mut self, input: Var, c: E) -> Var {
        let out = self.node(input).value.map(|v| v * c);
        let rg = self.node(input).requires_grad;
        self.push(out, rg, Op::MulConst { input, c })
    }

    /// Scalar projection `sum_i weights[i] * input[i]`, used by gradient audits.
    pub fn dot_const(&mut self, input: Var, weights: Tensor<E>) -> Result<Var> {
        ops::check_same_shape("dot_const", &self.node(input).value, &weights)?;
        let mut acc = E::zero();
        for (&x, &w) in self.node(input).value.data().iter().zip(weights.data()) {
            acc = acc + x * w;
        }
        let out = Tensor::new([1, 1, 1, 1], vec![acc]).expect("scalar");
        let rg = self.node(input).requires_grad;
        Ok(self.push(out, rg, Op::DotConst { input, weights }))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<E>) {
        let i = v.idx as usize;
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut self.grads[i] {
            Some(existing) => {
                for (e, &add) in existing.data_mut().iter_mut().zip(g.data().iter()) {
                    *e = *e + add;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar loss node. Runs at most once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        assert_eq!(loss.tape, self.id, "Var used on a different tape");
        if self.backward_done {
            return Err(DrnError::InvalidArgument(
                "backward already ran on this tape".into(),
            ));
        }
        if self.node(loss).value.numel() != 1 {
            return Err(DrnError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).value.shape()
            )));
        }
        self.backward_done = true;
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.idx as usize] = Some(Tensor::new([1, 1, 1, 1], vec![E::one()]).unwrap());

        for i in (0..=loss.idx as usize).rev() {
            if self.grads[i].is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (input, weight, bias, stride, padding) =
                        (*input, *weight, *bias, *stride, *padding);
                    let need_b = bias.is_some_and(|b| self.nodes[b.idx as usize].requires_grad);
                    let grads = ops::conv2d_backward(
                        &self.nodes[input.idx as usize].value,
                        &self.nodes[weight.idx as usize].value,
                        &g,
                        stride,
                        padding,
                        self.nodes[input.idx as usize].requires_grad,
                        self.nodes[weight.idx as usize].requires_grad,
                        need_b,
                    );
                    if let Some(di) = grads.input {
                        self.accumulate(input, di);
                    }
                    if let Some(dw) = grads.weight {
                        self.accumulate(weight, dw);
                    }
                    if let (Some(db), Some(b)) = (grads.bias, bias) {
                        let shaped =
                            Tensor::new(self.nodes[b.idx as usize].value.shape(), db.into_data())
                                .expect("bias grad shape");
                        self.accumulate(b, shaped);
                    }
                }
                Op::PixelShuffle { input, r } => {
                    let (input, r) = (*input, *r);
                    let di = ops::pixel_unshuffle(&g, r).expect("inverse permutation");
                    self.accumulate(input, di);
                }
                Op::LeakyRelu { input, slope } => {
                    let (input, slope) = (*input, *slope);
                    let di =
                        ops::leaky_relu_backward(&self.nodes[input.idx as usize].value, &g, slope);
                    self.accumulate(input, di);
                }
                Op::Relu { input } => {
                    let input = *input;
                    let di = ops::relu_backward(&self.nodes[input.idx as usize].value, &g);
                    self.accumulate(input, di);
                }
                Op::Sigmoid { input } => {
                    let input = *input;
                    let di = ops::sigmoid_backward(&self.nodes[i].value, &g);
                    self.accumulate(input, di);
                }
                Op::GlobalAvgPool { input } => {
                    let input = *input;
                    let [_, _, h, w] = self.nodes[input.idx as usize].value.shape();
                    let di = ops::global_avg_pool_backward(&g, h, w);
                    self.accumulate(input, di);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::MulBroadcast { a, scale } => {
                    let (a, scale) = (*a, *scale);
                    let (da, ds) = ops::mul_broadcast_backward(
                        &self.nodes[a.idx as usize].value,
                        &self.nodes[scale.idx as usize].value,
                        &g,
                        self.nodes[a.idx as usize].requires_grad,
                        self.nodes[scale.idx as usize].requires_grad,
                    );
                    if let Some(da) = da {
                        self.accumulate(a, da);
                    }
                    if let Some(ds) = ds {
                        self.accumulate(scale, ds);
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a.idx as usize].value.channels();
                    let cb = self.nodes[b.idx as usize].value.channels();
                    let (da, db) = ops::concat_channels_backward(&g, ca, cb);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::L1Loss { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let up = g.scalar();
                    let dp = ops::l1_loss_backward(
                        &self.nodes[pred.idx as usize].value,
                        &self.nodes[target.idx as usize].value,
                        up,
                    );
                    if self.nodes[target.idx as usize].requires_grad {
                        let dt = dp.map(|v| -v);
                        self.accumulate(target, dt);
                    }
                    self.accumulate(pred, dp);
                }
                Op::MulConst { input, c } => {
                    let (input, c) = (*input, *c);
                    self.accumulate(input, g.map(|v| v * c));
                }
                Op::DotConst { input, weights } => {
                    let input = *input;
                    let up = g.scalar();
                    let di = weights.map(|w| w * up);
                    self.accumulate(input, di);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn backward_runs_once() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t([1, 1, 1, 1], vec![1.0]).with_requires_grad());
        let y = tape.mul_const(x, 2.0);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t([1, 1, 1, 2], vec![1.0, 2.0]).with_requires_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn add_routes_gradients_to_both() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t([1, 1, 1, 2], vec![1.0, 2.0]).with_requires_grad());
        let b = tape.leaf(t([1, 1, 1, 2], vec![3.0, 4.0]).with_requires_grad());
        let s = tape.add(a, b).unwrap();
        let w = t([1, 1, 1, 2], vec![0.5, -1.5]);
        let loss = tape.dot_const(s, w.clone()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), w.data());
        assert_eq!(tape.grad(b).unwrap().data(), w.data());
    }

    #[test]
    fn untracked_leaf_gets_no_grad() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t([1, 1, 1, 1], vec![1.0]).with_requires_grad());
        let b = tape.constant(t([1, 1, 1, 1], vec![2.0]));
        let s = tape.add(a, b).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_some());
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn l1_subgradient_sign_zero_is_zero() {
        let mut tape = Tape::<f32>::new();
        let p = tape.leaf(t([1, 1, 1, 3], vec![1.0, -2.0, 5.0]).with_requires_grad());
        let tgt = tape.constant(t([1, 1, 1, 3], vec![0.0, 0.0, 5.0]));
        let loss = tape.l1_loss(p, tgt).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        let third = 1.0f32 / 3.0;
        assert_eq!(g.data(), &[third, -third, 0.0]);
    }

    #[test]
    fn leaky_relu_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t([1, 1, 1, 2], vec![-1.0, 3.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data(), &[-0.2, 3.0]);

        let s = tape.leaf(t([1, 1, 1, 1], vec![0.0]));
        let z = tape.sigmoid(s);
        assert_eq!(tape.value(z).data(), &[0.5]);
    }

    #[test]
    fn grads_accumulate_when_reused() {
        // y = x + x ==> dy/dx = 2
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t([1, 1, 1, 1], vec![3.0]).with_requires_grad());
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn works_in_f64_too() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::<f64>::new([1, 1, 1, 2], vec![0.25, -0.5])
                .unwrap()
                .with_requires_grad(),
        );
        let y = tape.mul_const(x, 4.0);
        let w = Tensor::<f64>::new([1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let loss = tape.dot_const(y, w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 4.0]);
    }
}
