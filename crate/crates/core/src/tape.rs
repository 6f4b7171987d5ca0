//! Reverse-mode differentiation over a recorded sequence of operator calls.
//!
//! A [`Tape`] records every op applied during one forward evaluation together
//! with what its input-gradient rule needs. Intermediate values registered as
//! *taps* get their gradients returned by [`Tape::backward`]; parameters are
//! borrowed, never differentiated.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, Pair};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator family, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    MaxPool2d,
    AvgPool2d,
    GlobalAvgPool,
    Add,
    Linear,
    Flatten,
    ChannelMask,
    Softmax,
    LogSoftmax,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d => "max_pool",
            OpKind::AvgPool2d => "avg_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Add => "add",
            OpKind::Linear => "linear",
            OpKind::Flatten => "flatten",
            OpKind::ChannelMask => "channel_mask",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
        }
    }

    pub const ALL: [OpKind; 13] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::GlobalAvgPool,
        OpKind::Add,
        OpKind::Linear,
        OpKind::Flatten,
        OpKind::ChannelMask,
        OpKind::Softmax,
        OpKind::LogSoftmax,
    ];
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown op kind '{s}'")))
    }
}

enum Saved<'p, T: Scalar> {
    Leaf,
    Conv2d { input: Var, kernel: &'p Tensor<T>, stride: Pair, pad: Pair },
    BatchNorm { input: Var, scale: Vec<T> },
    Relu { input: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    AvgPool2d { input: Var, kernel: Pair, stride: Pair },
    GlobalAvgPool { input: Var },
    Add { lhs: Var, rhs: Var },
    Linear { input: Var, weight: &'p Tensor<T> },
    Flatten { input: Var },
    ChannelMask { input: Var, zeroed: Vec<bool> },
    Softmax { input: Var },
    LogSoftmax { input: Var },
}

impl<T: Scalar> Saved<'_, T> {
    fn kind(&self) -> OpKind {
        match self {
            Saved::Leaf => OpKind::Leaf,
            Saved::Conv2d { .. } => OpKind::Conv2d,
            Saved::BatchNorm { .. } => OpKind::BatchNorm,
            Saved::Relu { .. } => OpKind::Relu,
            Saved::MaxPool2d { .. } => OpKind::MaxPool2d,
            Saved::AvgPool2d { .. } => OpKind::AvgPool2d,
            Saved::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Saved::Add { .. } => OpKind::Add,
            Saved::Linear { .. } => OpKind::Linear,
            Saved::Flatten { .. } => OpKind::Flatten,
            Saved::ChannelMask { .. } => OpKind::ChannelMask,
            Saved::Softmax { .. } => OpKind::Softmax,
            Saved::LogSoftmax { .. } => OpKind::LogSoftmax,
        }
    }
}

struct Node<'p, T: Scalar> {
    value: Tensor<T>,
    saved: Saved<'p, T>,
}

/// Gradients captured at registered taps, keyed by tap id. Each gradient has
/// the shape of the tapped activation.
#[derive(Clone, Debug, PartialEq)]
pub struct TapGradients<T: Scalar = f32> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TapGradients<T> {
    pub fn get(&self, tap: &str) -> Option<&Tensor<T>> {
        self.grads.get(tap)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn tap_ids(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.grads
    }
}

/// One forward recording. Single-owner; `backward` runs at most once.
pub struct Tape<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
    taps: BTreeMap<String, Var>,
    consumed: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), taps: BTreeMap::new(), consumed: false, fault: None }
    }

    /// Flips the sign of one op family's backward rule. Exists so gradient
    /// checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, saved: Saved<'p, T>) -> Var {
        self.nodes.push(Node { value, saved });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Kind of the op that produced `v`.
    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].saved.kind()
    }

    /// Registers `v` under `id`; its gradient is returned by `backward`.
    pub fn tap(&mut self, id: impl Into<String>, v: Var) -> Result<()> {
        let id = id.into();
        if v.0 >= self.nodes.len() {
            return Err(Error::config(format!("tap '{id}' refers to an unrecorded value")));
        }
        if self.taps.contains_key(&id) {
            return Err(Error::config(format!("duplicate tap id '{id}'")));
        }
        self.taps.insert(id, v);
        Ok(())
    }

    pub fn tapped(&self, id: &str) -> Option<Var> {
        self.taps.get(id).copied()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Saved::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: &'p Tensor<T>,
        bias: Option<&'p Tensor<T>>,
        stride: Pair,
        pad: Pair,
    ) -> Result<Var> {
        let y = ops::conv2d(self.value(input), kernel, bias, stride, pad)?;
        Ok(self.push(y, Saved::Conv2d { input, kernel, stride, pad }))
    }

    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let y = ops::batchnorm(self.value(input), gamma, beta, mean, var, eps)?;
        let scale = ops::batchnorm_scale(gamma, var, eps)?;
        Ok(self.push(y, Saved::BatchNorm { input, scale }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(y, Saved::Relu { input })
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: Pair, stride: Pair) -> Result<Var> {
        let (y, argmax) = ops::max_pool2d(self.value(input), kernel, stride)?;
        Ok(self.push(y, Saved::MaxPool2d { input, argmax }))
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: Pair, stride: Pair) -> Result<Var> {
        let y = ops::avg_pool2d(self.value(input), kernel, stride)?;
        Ok(self.push(y, Saved::AvgPool2d { input, kernel, stride }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(y, Saved::GlobalAvgPool { input }))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let y = ops::residual_add(self.value(lhs), self.value(rhs))?;
        Ok(self.push(y, Saved::Add { lhs, rhs }))
    }

    pub fn linear(&mut self, input: Var, weight: &'p Tensor<T>, bias: Option<&'p Tensor<T>>) -> Result<Var> {
        let y = ops::linear(self.value(input), weight, bias)?;
        Ok(self.push(y, Saved::Linear { input, weight }))
    }

    pub fn flatten(&mut self, input: Var) -> Var {
        let y = ops::flatten(self.value(input));
        self.push(y, Saved::Flatten { input })
    }

    pub fn channel_mask(&mut self, input: Var, zeroed: Vec<bool>) -> Result<Var> {
        let y = ops::channel_mask(self.value(input), &zeroed)?;
        Ok(self.push(y, Saved::ChannelMask { input, zeroed }))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let y = ops::softmax(self.value(input))?;
        Ok(self.push(y, Saved::Softmax { input }))
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let y = ops::log_softmax(self.value(input))?;
        Ok(self.push(y, Saved::LogSoftmax { input }))
    }

    /// Propagates `seed` (the cotangent of `output`) back through the
    /// recording and returns the gradient of `sum(seed * output)` at every
    /// registered tap. Taps that `output` does not depend on get an all-zero
    /// gradient.
    pub fn backward(&mut self, output: Var, seed: &Tensor<T>) -> Result<TapGradients<T>> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::config("backward: output was not recorded on this tape"));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::config(format!(
                "backward: seed shape {:?} differs from output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let flip = self.fault == Some(node.saved.kind());
            let mut contributions: Vec<(Var, Tensor<T>)> = Vec::with_capacity(2);
            match &node.saved {
                Saved::Leaf => {}
                Saved::Conv2d { input, kernel, stride, pad } => {
                    let shape = self.value(*input).shape().to_vec();
                    contributions.push((*input, ops::conv2d_backward(&g, kernel, &shape, *stride, *pad)));
                }
                Saved::BatchNorm { input, scale } => {
                    contributions.push((*input, ops::batchnorm_backward(&g, scale)));
                }
                Saved::Relu { input } => {
                    contributions.push((*input, ops::relu_backward(self.value(*input), &g)));
                }
                Saved::MaxPool2d { input, argmax } => {
                    let shape = self.value(*input).shape().to_vec();
                    contributions.push((*input, ops::max_pool2d_backward(&g, argmax, &shape)));
                }
                Saved::AvgPool2d { input, kernel, stride } => {
                    let shape = self.value(*input).shape().to_vec();
                    contributions.push((*input, ops::avg_pool2d_backward(&g, &shape, *kernel, *stride)));
                }
                Saved::GlobalAvgPool { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    contributions.push((*input, ops::global_avg_pool_backward(&g, &shape)));
                }
                Saved::Add { lhs, rhs } => {
                    contributions.push((*lhs, g.clone()));
                    contributions.push((*rhs, g.clone()));
                }
                Saved::Linear { input, weight } => {
                    contributions.push((*input, ops::linear_backward(&g, weight)));
                }
                Saved::Flatten { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    contributions.push((*input, Tensor::from_parts(shape, g.data().to_vec())));
                }
                Saved::ChannelMask { input, zeroed } => {
                    contributions.push((*input, ops::channel_mask_backward(&g, zeroed)));
                }
                Saved::Softmax { input } => {
                    contributions.push((*input, ops::softmax_backward(&node.value, &g)));
                }
                Saved::LogSoftmax { input } => {
                    contributions.push((*input, ops::log_softmax_backward(&node.value, &g)));
                }
            }
            // Taps may sit on intermediate nodes; keep their gradient around.
            if self.taps.values().any(|v| v.0 == i) {
                grads[i] = Some(g);
            }
            for (target, mut d) in contributions {
                if flip {
                    d = d.map(|x| -x);
                }
                let slot = &mut grads[target.0];
                *slot = Some(match slot.take() {
                    None => d,
                    Some(acc) => ops::residual_add(&acc, &d)?,
                });
            }
        }

        let mut out = BTreeMap::new();
        for (id, v) in &self.taps {
            let g = match grads.get(v.0).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(*v).shape()),
            };
            g.ensure_finite(&format!("gradient at tap '{id}'"))?;
            out.insert(id.clone(), g);
        }
        Ok(TapGradients { grads: out })
    }
}
