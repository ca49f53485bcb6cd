use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops::PoolKind;
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, ksize: usize, pad: usize, cols: Vec<T> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { input: Var },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    RegionPool { input: Var, grid: usize, kind: PoolKind, argmax: Vec<u32> },
    Linear { input: Var, weight: Var, bias: Var },
    Softmax { input: Var },
    Concat { inputs: Vec<Var> },
    Reshape { input: Var },
    ScaleChannels { input: Var, scale: Var },
    AddScalar { input: Var },
    MulScalar { input: Var, factor: T },
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Sum { input: Var },
    Mse { pred: Var, target: Var },
    CrossEntropy { probs: Var, classes: Vec<usize> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records a forward computation so gradients can be propagated back through it.
///
/// Parameters are bound by an external integer id through [`Tape::param`]; the same id
/// always resolves to the same leaf, so a parameter used twice accumulates both
/// contributions.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, Var)>,
    param_lookup: HashMap<usize, Var>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
            recording: true,
        }
    }

    /// A tape that never tracks gradients; forward-only evaluation skips the
    /// bookkeeping needed by `backward`.
    pub fn inference() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in differentiation when the tensor's
    /// `requires_grad` flag is set and the tape is recording.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = self.recording && tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor, Op::Leaf, false)
    }

    /// Records a trainable leaf keyed by `id`, reusing the existing leaf if `id` was
    /// already bound on this tape.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let mut t = value.clone();
        t.zero_grad();
        let rg = self.recording;
        let v = self.push_node(t, Op::Leaf, rg);
        self.bind_param(id, v);
        v
    }

    /// Makes later `param(id, ..)` calls resolve to `var`.
    pub fn bind_param(&mut self, id: usize, var: Var) {
        if self.param_lookup.insert(id, var).is_none() {
            self.params.push((id, var));
        }
    }

    pub fn param_vars(&self) -> &[(usize, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    fn push_node(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter, keyed by parameter id.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params.iter().filter_map(|&(id, v)| self.grad(v).map(|g| (id, g)))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        use crate::ops::{conv, dense, elementwise, norm, pool};
        let node = &self.nodes[i];
        let mut sink = GradSink { nodes: &self.nodes, grads };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, ksize, pad, cols } => {
                conv::backward(self, &mut sink, g, *input, *kernel, *bias, *ksize, *pad, cols)
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                norm::backward(self, &mut sink, g, *input, *gamma, *beta, xhat, inv_std, *train)
            }
            Op::Relu { input } => elementwise::relu_backward(&node.value, &mut sink, g, *input),
            Op::MaxPool2 { input, argmax } => pool::scatter_backward(&mut sink, g, *input, argmax),
            Op::RegionPool { input, grid, kind, argmax } => match kind {
                PoolKind::Max => pool::scatter_backward(&mut sink, g, *input, argmax),
                PoolKind::Avg => pool::region_avg_backward(self, &mut sink, g, *input, *grid),
            },
            Op::Linear { input, weight, bias } => {
                dense::linear_backward(self, &mut sink, g, *input, *weight, *bias)
            }
            Op::Softmax { input } => dense::softmax_backward(&node.value, &mut sink, g, *input),
            Op::Concat { inputs } => elementwise::concat_backward(self, &mut sink, g, inputs),
            Op::Reshape { input } => sink.add(*input, g),
            Op::ScaleChannels { input, scale } => {
                elementwise::scale_channels_backward(self, &mut sink, g, *input, *scale)
            }
            Op::AddScalar { input } => sink.add(*input, g),
            Op::MulScalar { input, factor } => sink.add_scaled(*input, g, *factor),
            Op::Add { lhs, rhs } => {
                sink.add(*lhs, g);
                sink.add(*rhs, g);
            }
            Op::Mul { lhs, rhs } => elementwise::mul_backward(self, &mut sink, g, *lhs, *rhs),
            Op::Sum { input } => {
                if let Some(buf) = sink.slot(*input) {
                    buf.iter_mut().for_each(|b| *b += g[0]);
                }
            }
            Op::Mse { pred, target } => dense::mse_backward(self, &mut sink, g, *pred, *target),
            Op::CrossEntropy { probs, classes } => {
                dense::cross_entropy_backward(self, &mut sink, g, *probs, classes)
            }
        }
    }
}

/// Accumulates input gradients during the reverse sweep.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer of `v`, or `None` when `v` does not require a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub(crate) fn add(&mut self, v: Var, g: &[T]) {
        if let Some(buf) = self.slot(v) {
            buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x);
        }
    }

    pub(crate) fn add_scaled(&mut self, v: Var, g: &[T], factor: T) {
        if let Some(buf) = self.slot(v) {
            buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x * factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64).with_requires_grad(true));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(p), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn reused_param_accumulates() {
        let w = Tensor::<f64>::full(&[3], 2.0);
        let mut tape = Tape::new();
        let a = tape.param(7, &w);
        let b = tape.param(7, &w);
        assert_eq!(a, b);
        let prod = tape.mul(a, b).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        // d/dw sum(w*w) = 2w
        let grads: Vec<_> = tape.param_grads().collect();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1, &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let w = Tensor::<f32>::full(&[2], 1.0);
        let mut tape = Tape::inference();
        let a = tape.param(0, &w);
        let s = tape.sum(a);
        assert!(!tape.requires_grad(s));
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
    }
}
