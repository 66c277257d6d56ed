//! Reverse-mode differentiation by operation recording.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order. [`Tape::backward`] replays the recorded backward rules in reverse,
//! summing the contributions a variable receives from each of its consumers.
//!
//! Parameters are borrowed for the lifetime of the tape, so they cannot be
//! mutated between recording and the backward pass.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    Reshape { input: Var },
    Dropout { input: Var, mask: Vec<T> },
    SoftmaxCrossEntropy { logits: Var, probs: Tensor<T>, targets: Vec<usize> },
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Sum { input: Var },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an owned input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Records a borrowed input such as a model parameter.
    pub fn param(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Cow::Owned(out), Op::Conv2d { input, weight, bias }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(Cow::Owned(out), Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(Cow::Owned(out), Op::Relu { input }, rg)
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Cow::Owned(out), Op::Dense { input, weight, bias }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(Cow::Owned(out), Op::Reshape { input }, rg))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Inverted dropout with a mask drawn from `rng`. The same mask is
    /// applied in the backward pass.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        ops::check_rate(rate)?;
        let x = self.value(input);
        let mask = if rate == 0.0 {
            vec![T::one(); x.len()]
        } else {
            ops::dropout_mask(x.len(), rate, rng)?
        };
        let out = ops::apply_mask(x, &mask);
        let rg = self.any_grad(&[input]);
        Ok(self.push(Cow::Owned(out), Op::Dropout { input, mask }, rg))
    }

    /// Mean cross-entropy loss (a scalar variable) and the softmax
    /// probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Tensor<T>)> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), targets)?;
        let rg = self.any_grad(&[logits]);
        let var = self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                probs: probs.clone(),
                targets: targets.to_vec(),
            },
            rg,
        );
        Ok((var, probs))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let mut out = self.value(lhs).clone();
        out.add_assign(self.value(rhs))?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Cow::Owned(out), Op::Add { lhs, rhs }, rg))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.shape(), data)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Cow::Owned(out), Op::Mul { lhs, rhs }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(Cow::Owned(out), Op::Sum { input }, rg)
    }

    /// Propagates gradients from the scalar `loss` back to every
    /// gradient-requiring leaf recorded before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut contributions: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { input, weight, bias } => {
                    let need_input = self.requires_grad(*input);
                    let need_params = self.requires_grad(*weight) || self.requires_grad(*bias);
                    let (gx, gw, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        self.value(*bias),
                        &g,
                        need_input,
                        need_params,
                    )?;
                    contributions.extend(gx.map(|t| (*input, t)));
                    contributions.extend(gw.map(|t| (*weight, t)));
                    contributions.extend(gb.map(|t| (*bias, t)));
                }
                Op::MaxPool2d { input, argmax } => {
                    let gx = ops::maxpool2d_backward(self.value(*input).shape(), argmax, &g)?;
                    contributions.push((*input, gx));
                }
                Op::Relu { input } => {
                    contributions.push((*input, ops::relu_backward(self.value(*input), &g)));
                }
                Op::Dense { input, weight, bias } => {
                    let need_input = self.requires_grad(*input);
                    let need_params = self.requires_grad(*weight) || self.requires_grad(*bias);
                    let (gx, gw, gb) = ops::dense_backward(
                        self.value(*input),
                        self.value(*weight),
                        self.value(*bias),
                        &g,
                        need_input,
                        need_params,
                    )?;
                    contributions.extend(gx.map(|t| (*input, t)));
                    contributions.extend(gw.map(|t| (*weight, t)));
                    contributions.extend(gb.map(|t| (*bias, t)));
                }
                Op::Reshape { input } => {
                    contributions.push((*input, g.reshape(self.value(*input).shape())?));
                }
                Op::Dropout { input, mask } => {
                    contributions.push((*input, ops::apply_mask(&g, mask)));
                }
                Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                    let upstream = g.data()[0];
                    contributions.push((
                        *logits,
                        ops::softmax_cross_entropy_backward(probs, targets, upstream),
                    ));
                }
                Op::Add { lhs, rhs } => {
                    contributions.push((*lhs, g.clone()));
                    contributions.push((*rhs, g));
                }
                Op::Mul { lhs, rhs } => {
                    let (a, b) = (self.value(*lhs), self.value(*rhs));
                    let ga = b.data().iter().zip(g.data()).map(|(&y, &d)| y * d).collect();
                    let gb = a.data().iter().zip(g.data()).map(|(&x, &d)| x * d).collect();
                    contributions.push((*lhs, Tensor::new(a.shape(), ga)?));
                    contributions.push((*rhs, Tensor::new(b.shape(), gb)?));
                }
                Op::Sum { input } => {
                    let shape = self.value(*input).shape();
                    contributions.push((*input, Tensor::full(shape, g.data()[0])));
                }
            }
            for (var, contribution) in contributions {
                if !self.requires_grad(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Gradients of the loss with respect to recorded leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, if it is a gradient-requiring leaf reached by
    /// the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_accumulates_both_uses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn consumers_add_their_contributions() {
        // loss = sum(x) + sum(x + x) -> d/dx = 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[4]), true);
        let s1 = tape.sum(x);
        let xx = tape.add(x, x).unwrap();
        let s2 = tape.sum(xx);
        let loss = tape.add(s1, s2).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let c = tape.leaf(Tensor::full(&[2], 2.0), false);
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn maxpool_backward_conserves_gradient_mass() {
        let mut rng = Rng::stream(11, "pool");
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 5, 6], |_| rng.normal()), true);
        let p = tape.maxpool2d(x).unwrap();
        let w = tape.leaf(Tensor::from_fn(&[2, 3, 2, 3], |_| rng.normal()), false);
        let prod = tape.mul(p, w).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let mass_in = g.get(x).unwrap().sum();
        let mass_out = tape.value(w).sum();
        assert!((mass_in - mass_out).abs() < 1e-12);
    }

    #[test]
    fn dropout_backward_reuses_forward_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[64]), true);
        let d = tape.dropout(x, 0.5, &mut Rng::stream(9, "d")).unwrap();
        let out = tape.value(d).clone();
        let loss = tape.sum(d);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), out.data());
    }
}
