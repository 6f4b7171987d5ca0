//! A graph bound to its parameters, and forward execution with or without
//! a differentiation tape.

use std::collections::HashMap;
use std::path::Path;

use crate::archive::{Archive, SampleBatch};
use crate::error::{Error, Result};
use crate::graph::{Layer, LayerOp, ModelGraph, Source};
use crate::ops;
use crate::tape::{OpKind, Tape, TapGradients, Var};
use crate::tensor::{Scalar, Tensor};

const HEAD_INPUT: &str = "last_feature_map";

/// Graph plus parameter tensors. Immutable and shareable across threads.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    graph: ModelGraph,
    params: HashMap<String, Tensor<T>>,
}

/// Adds `delta` to one element of a layer's output before anything reads it.
#[derive(Clone, Copy, Debug)]
pub struct Perturbation<T> {
    pub layer: usize,
    pub index: usize,
    pub delta: T,
}

impl Model<f32> {
    /// Binds weights to a graph. Every referenced name must be present with
    /// the shape the graph implies; all problems are listed at once.
    pub fn new(graph: ModelGraph, weights: &Archive) -> Result<Self> {
        let mut params = HashMap::new();
        let mut missing = Vec::new();
        let mut wrong = Vec::new();
        for (name, shape) in graph.weight_specs() {
            match weights.get(&name) {
                None => missing.push(name),
                Some(crate::archive::Entry::F32(t)) if t.shape() == shape.as_slice() => {
                    params.insert(name, t.clone());
                }
                Some(e) => wrong.push(format!("{name}: have {} {:?}, need f32 {shape:?}", e.dtype().name(), e.shape())),
            }
        }
        if !missing.is_empty() || !wrong.is_empty() {
            let mut msg = String::from("weights do not match graph");
            if !missing.is_empty() {
                msg += &format!("; missing: {}", missing.join(", "));
            }
            if !wrong.is_empty() {
                msg += &format!("; mismatched: {}", wrong.join("; "));
            }
            return Err(Error::Config(msg));
        }
        Ok(Model { graph, params })
    }

    pub fn from_files(graph: impl AsRef<Path>, weights: impl AsRef<Path>) -> Result<Self> {
        Self::new(ModelGraph::from_file(graph)?, &Archive::read(weights)?)
    }

    /// Same model evaluated in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            graph: self.graph.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }

    fn opt_param(&self, name: &Option<String>) -> Option<&Tensor<T>> {
        name.as_deref().map(|n| self.param(n))
    }

    /// Checks an N x C x H x W batch against the declared input.
    pub fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if [c, h, w] != self.graph.input_shape() {
            return Err(Error::config(format!(
                "input samples are {c}x{h}x{w}, graph expects {:?}",
                self.graph.input_shape()
            )));
        }
        Ok(())
    }

    /// Plain (untaped) forward pass returning logits.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_layers(images, None)?.pop().unwrap())
    }

    /// Plain forward pass returning every layer's output.
    pub fn forward_layers(&self, images: &Tensor<T>, perturb: Option<Perturbation<T>>) -> Result<Vec<Tensor<T>>> {
        self.check_input(images)?;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.graph.layers().len());
        for (i, layer) in self.graph.layers().iter().enumerate() {
            let inputs: Vec<&Tensor<T>> = layer
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => images,
                    Source::Layer(j) => &outs[*j],
                })
                .collect();
            let mut y = self.eval_plain(layer, &inputs)?;
            if let Some(p) = perturb.filter(|p| p.layer == i) {
                let d = y.data_mut();
                if p.index >= d.len() {
                    return Err(Error::config(format!("perturbation index {} out of range", p.index)));
                }
                d[p.index] = d[p.index] + p.delta;
            }
            y.ensure_finite(&format!("output of layer '{}'", layer.name))?;
            outs.push(y);
        }
        Ok(outs)
    }

    fn eval_plain(&self, layer: &Layer, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(match &layer.op {
            LayerOp::Conv2d { stride, pad, weight, bias, .. } => {
                ops::conv2d(x[0], self.param(weight), self.opt_param(bias), *stride, *pad)?
            }
            LayerOp::BatchNorm { gamma, beta, mean, var, eps } => ops::batchnorm(
                x[0],
                self.param(gamma),
                self.param(beta),
                self.param(mean),
                self.param(var),
                T::from_f32(*eps).unwrap(),
            )?,
            LayerOp::Relu => ops::relu(x[0]),
            LayerOp::MaxPool2d { kernel, stride } => ops::max_pool2d(x[0], *kernel, *stride)?.0,
            LayerOp::AvgPool2d { kernel, stride } => ops::avg_pool2d(x[0], *kernel, *stride)?,
            LayerOp::GlobalAvgPool => ops::global_avg_pool(x[0])?,
            LayerOp::Add => ops::residual_add(x[0], x[1])?,
            LayerOp::Linear { weight, bias, .. } => ops::linear(x[0], self.param(weight), self.opt_param(bias))?,
            LayerOp::Flatten => ops::flatten(x[0]),
            LayerOp::ChannelMask { zeroed } => ops::channel_mask(x[0], &self.mask(x[0], zeroed))?,
        })
    }

    fn mask(&self, x: &Tensor<T>, zeroed: &[usize]) -> Vec<bool> {
        let mut m = vec![false; x.shape()[1]];
        for &c in zeroed {
            m[c] = true;
        }
        m
    }

    fn eval_taped<'m>(&'m self, tape: &mut Tape<'m, T>, layer: &Layer, x: &[Var]) -> Result<Var> {
        match &layer.op {
            LayerOp::Conv2d { stride, pad, weight, bias, .. } => {
                tape.conv2d(x[0], self.param(weight), self.opt_param(bias), *stride, *pad)
            }
            LayerOp::BatchNorm { gamma, beta, mean, var, eps } => tape.batchnorm(
                x[0],
                self.param(gamma),
                self.param(beta),
                self.param(mean),
                self.param(var),
                T::from_f32(*eps).unwrap(),
            ),
            LayerOp::Relu => Ok(tape.relu(x[0])),
            LayerOp::MaxPool2d { kernel, stride } => tape.max_pool2d(x[0], *kernel, *stride),
            LayerOp::AvgPool2d { kernel, stride } => tape.avg_pool2d(x[0], *kernel, *stride),
            LayerOp::GlobalAvgPool => tape.global_avg_pool(x[0]),
            LayerOp::Add => tape.add(x[0], x[1]),
            LayerOp::Linear { weight, bias, .. } => tape.linear(x[0], self.param(weight), self.opt_param(bias)),
            LayerOp::Flatten => Ok(tape.flatten(x[0])),
            LayerOp::ChannelMask { zeroed } => {
                let m = self.mask(tape.value(x[0]), zeroed);
                tape.channel_mask(x[0], m)
            }
        }
    }

    /// Taped forward pass. `taps` are tap ids from the graph; they are
    /// validated before anything runs.
    pub fn record<S: AsRef<str>>(&self, images: &Tensor<T>, taps: &[S]) -> Result<ForwardPass<'_, T>> {
        let mut tap_layers = Vec::with_capacity(taps.len());
        for id in taps {
            let id = id.as_ref();
            let tp = self
                .graph
                .tap(id)
                .ok_or_else(|| Error::config(format!("unknown tap id '{id}'")))?;
            tap_layers.push((id.to_string(), tp.layer));
        }
        self.check_input(images)?;

        let split = self.graph.split();
        let layers = self.graph.layers();
        let mut features = Tape::new();
        let input = features.leaf(images.clone());
        let mut vars: Vec<Var> = Vec::with_capacity(layers.len());
        for layer in &layers[..=split] {
            let ins: Vec<Var> = layer
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => input,
                    Source::Layer(j) => vars[*j],
                })
                .collect();
            let v = self.eval_taped(&mut features, layer, &ins)?;
            features.value(v).ensure_finite(&format!("output of layer '{}'", layer.name))?;
            vars.push(v);
        }
        for (id, layer) in &tap_layers {
            features.tap(id.clone(), vars[*layer])?;
        }
        let feature_out = vars[split];

        let mut head = Tape::new();
        let head_in = head.leaf(features.value(feature_out).clone());
        head.tap(HEAD_INPUT, head_in)?;
        let mut head_vars: HashMap<usize, Var> = HashMap::from([(split, head_in)]);
        let mut last = head_in;
        for (i, layer) in layers.iter().enumerate().skip(split + 1) {
            let ins: Vec<Var> = layer
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Layer(j) => head_vars[j],
                    Source::Input => unreachable!("checked when the graph was built"),
                })
                .collect();
            last = self.eval_taped(&mut head, layer, &ins)?;
            head.value(last).ensure_finite(&format!("output of layer '{}'", layer.name))?;
            head_vars.insert(i, last);
        }
        Ok(ForwardPass { features, head, feature_out, logits: last, taps: tap_layers, vars })
    }

    /// Convenience: taped forward over a dataset batch.
    pub fn record_batch<S: AsRef<str>>(&self, batch: &SampleBatch, taps: &[S]) -> Result<ForwardPass<'_, T>> {
        let images: Tensor<T> = batch.images.cast();
        self.record(&images, taps)
    }
}

/// Result of a taped forward pass: logits plus two tapes, one over the
/// feature extractor and one over the classifier head, joined at the last
/// feature map. Each tape supports a single backward pass.
pub struct ForwardPass<'m, T: Scalar = f32> {
    features: Tape<'m, T>,
    head: Tape<'m, T>,
    feature_out: Var,
    logits: Var,
    taps: Vec<(String, usize)>,
    vars: Vec<Var>,
}

impl<T: Scalar> ForwardPass<'_, T> {
    /// Pre-softmax class scores, N x C.
    pub fn logits(&self) -> &Tensor<T> {
        self.head.value(self.logits)
    }

    /// Output of the split layer.
    pub fn last_feature_map(&self) -> &Tensor<T> {
        self.features.value(self.feature_out)
    }

    /// Activation recorded at a tap.
    pub fn activation(&self, tap: &str) -> Option<&Tensor<T>> {
        self.taps.iter().find(|(id, _)| id == tap).map(|(_, l)| self.features.value(self.vars[*l]))
    }

    pub fn tap_ids(&self) -> impl Iterator<Item = &str> {
        self.taps.iter().map(|(id, _)| id.as_str())
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.features.inject_fault(kind);
        self.head.inject_fault(kind);
    }

    /// Backward through the classifier head only: gradient of
    /// `sum(seed * logits)` at the last feature map.
    pub fn backward_head(&mut self, seed: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(self.logits, seed)?.into_map();
        Ok(g.remove(HEAD_INPUT).expect("head input is always tapped"))
    }

    /// Backward through the feature extractor only, seeded at the last
    /// feature map.
    pub fn backward_features(&mut self, seed: &Tensor<T>) -> Result<TapGradients<T>> {
        self.features.backward(self.feature_out, seed)
    }

    /// End-to-end backward from the logits to every tap.
    pub fn backward(mut self, seed: &Tensor<T>) -> Result<TapGradients<T>> {
        let g = self.backward_head(seed)?;
        self.backward_features(&g)
    }
}
