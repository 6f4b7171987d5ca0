//! Line-oriented model description.
//!
//! ```text
//! # comment
//! input 3 16 16
//! classes 4
//! stem: conv2d out=8 kernel=3 stride=1 pad=1 weight=stem.w bias=stem.b
//! stem_relu: relu
//! b1_add: add in=b1_bn2,stem_relu
//! gap: global_avg_pool
//! fc: linear out=4 weight=fc.w bias=fc.b
//! tap block1 b1_add block1
//! split stem_relu
//! ```
//!
//! Each layer consumes the previous layer unless it names its sources with
//! `in=`. The special source `input` is the network input. `split <layer>`
//! names the last layer of the feature extractor; its output is the last
//! feature map handed to the classifier head.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::ops::{window_extent, Pair};

/// Where a layer reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv2d { out_channels: usize, kernel: Pair, stride: Pair, pad: Pair, weight: String, bias: Option<String> },
    BatchNorm { gamma: String, beta: String, mean: String, var: String, eps: f32 },
    Relu,
    MaxPool2d { kernel: Pair, stride: Pair },
    AvgPool2d { kernel: Pair, stride: Pair },
    GlobalAvgPool,
    Add,
    Linear { out_features: usize, weight: String, bias: Option<String> },
    Flatten,
    ChannelMask { zeroed: Vec<usize> },
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::BatchNorm { .. } => "batchnorm",
            LayerOp::Relu => "relu",
            LayerOp::MaxPool2d { .. } => "max_pool",
            LayerOp::AvgPool2d { .. } => "avg_pool",
            LayerOp::GlobalAvgPool => "global_avg_pool",
            LayerOp::Add => "add",
            LayerOp::Linear { .. } => "linear",
            LayerOp::Flatten => "flatten",
            LayerOp::ChannelMask { .. } => "channel_mask",
        }
    }

    fn arity(&self) -> usize {
        if matches!(self, LayerOp::Add) {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<Source>,
}

/// Named gradient capture point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapPoint {
    pub id: String,
    pub layer: usize,
    pub block: String,
}

/// Shape-checked model description. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    input: [usize; 3],
    classes: usize,
    layers: Vec<Layer>,
    taps: Vec<TapPoint>,
    split: usize,
    /// Per-sample output shape of every layer (batch axis omitted).
    shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    /// Parses and statically checks a graph document.
    pub fn parse(doc: &str) -> Result<Self> {
        Parser::default().run(doc)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Builds from parts and runs the same checks as [`ModelGraph::parse`].
    pub fn new(
        input: [usize; 3],
        classes: usize,
        layers: Vec<Layer>,
        taps: Vec<TapPoint>,
        split: usize,
    ) -> Result<Self> {
        let shapes = check(input, classes, &layers, &taps, split)?;
        Ok(ModelGraph { input, classes, layers, taps, split, shapes })
    }

    /// `[C, H, W]` of one input sample.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    pub fn tap(&self, id: &str) -> Option<&TapPoint> {
        self.taps.iter().find(|t| t.id == id)
    }

    /// Index of the last feature-extractor layer.
    pub fn split(&self) -> usize {
        self.split
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Per-sample output shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-sample shape of the last feature map.
    pub fn feature_shape(&self) -> &[usize] {
        &self.shapes[self.split]
    }

    /// Channel count of a tapped activation.
    pub fn tap_channels(&self, tap: &TapPoint) -> usize {
        self.shapes[tap.layer].first().copied().unwrap_or(1)
    }

    /// Resolves tap selectors (tap ids or block labels) to tap ids, in graph
    /// order. A selector matching nothing is a configuration error.
    pub fn select_taps<S: AsRef<str>>(&self, selectors: &[S]) -> Result<Vec<String>> {
        let mut chosen = BTreeSet::new();
        for s in selectors {
            let s = s.as_ref();
            let hits: Vec<usize> = self
                .taps
                .iter()
                .enumerate()
                .filter(|(_, t)| t.id == s || t.block == s)
                .map(|(i, _)| i)
                .collect();
            if hits.is_empty() {
                let known: Vec<&str> = self.taps.iter().map(|t| t.id.as_str()).collect();
                return Err(Error::config(format!("no tap or block named '{s}' (taps: {})", known.join(", "))));
            }
            chosen.extend(hits);
        }
        Ok(chosen.into_iter().map(|i| self.taps[i].id.clone()).collect())
    }

    /// Every parameter tensor the graph reads, with its expected shape.
    pub fn weight_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = self.source_shape(layer.inputs[0]);
            match &layer.op {
                LayerOp::Conv2d { out_channels, kernel, weight, bias, .. } => {
                    out.push((weight.clone(), vec![*out_channels, in_shape[0], kernel.h, kernel.w]));
                    if let Some(b) = bias {
                        out.push((b.clone(), vec![*out_channels]));
                    }
                }
                LayerOp::BatchNorm { gamma, beta, mean, var, .. } => {
                    let c = self.shapes[i][0];
                    for n in [gamma, beta, mean, var] {
                        out.push((n.clone(), vec![c]));
                    }
                }
                LayerOp::Linear { out_features, weight, bias } => {
                    out.push((weight.clone(), vec![*out_features, in_shape[0]]));
                    if let Some(b) = bias {
                        out.push((b.clone(), vec![*out_features]));
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn source_shape(&self, s: Source) -> &[usize] {
        match s {
            Source::Input => &self.input,
            Source::Layer(j) => &self.shapes[j],
        }
    }

    /// Renders the graph back into document form.
    pub fn to_document(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ModelGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {} {} {}", self.input[0], self.input[1], self.input[2])?;
        writeln!(f, "classes {}", self.classes)?;
        let pair = |p: &Pair| if p.h == p.w { p.h.to_string() } else { format!("{}x{}", p.h, p.w) };
        for (i, l) in self.layers.iter().enumerate() {
            write!(f, "{}: {}", l.name, l.op.kind())?;
            let implicit = match l.inputs[..] {
                [Source::Input] => i == 0,
                [Source::Layer(j)] => j + 1 == i,
                _ => false,
            };
            if !implicit {
                let names: Vec<&str> = l
                    .inputs
                    .iter()
                    .map(|s| match s {
                        Source::Input => "input",
                        Source::Layer(j) => self.layers[*j].name.as_str(),
                    })
                    .collect();
                write!(f, " in={}", names.join(","))?;
            }
            match &l.op {
                LayerOp::Conv2d { out_channels, kernel, stride, pad, weight, bias } => {
                    write!(f, " out={out_channels} kernel={} stride={} pad={} weight={weight}", pair(kernel), pair(stride), pair(pad))?;
                    if let Some(b) = bias {
                        write!(f, " bias={b}")?;
                    }
                }
                LayerOp::BatchNorm { gamma, beta, mean, var, eps } => {
                    write!(f, " gamma={gamma} beta={beta} mean={mean} var={var} eps={eps}")?;
                }
                LayerOp::MaxPool2d { kernel, stride } | LayerOp::AvgPool2d { kernel, stride } => {
                    write!(f, " kernel={} stride={}", pair(kernel), pair(stride))?;
                }
                LayerOp::Linear { out_features, weight, bias } => {
                    write!(f, " out={out_features} weight={weight}")?;
                    if let Some(b) = bias {
                        write!(f, " bias={b}")?;
                    }
                }
                LayerOp::ChannelMask { zeroed } => {
                    let z: Vec<String> = zeroed.iter().map(usize::to_string).collect();
                    write!(f, " zero={}", z.join(","))?;
                }
                LayerOp::Relu | LayerOp::GlobalAvgPool | LayerOp::Add | LayerOp::Flatten => {}
            }
            writeln!(f)?;
        }
        for t in &self.taps {
            writeln!(f, "tap {} {} {}", t.id, self.layers[t.layer].name, t.block)?;
        }
        writeln!(f, "split {}", self.layers[self.split].name)
    }
}

/// Static shape propagation plus structural checks.
fn check(
    input: [usize; 3],
    classes: usize,
    layers: &[Layer],
    taps: &[TapPoint],
    split: usize,
) -> Result<Vec<Vec<usize>>> {
    if input.contains(&0) {
        return Err(Error::config(format!("input shape {input:?} has a zero extent")));
    }
    if classes == 0 {
        return Err(Error::config("class count must be positive"));
    }
    if layers.is_empty() {
        return Err(Error::config("graph has no layers"));
    }
    let mut names = HashMap::new();
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let ctx = |m: String| Error::config(format!("layer '{}' ({}): {m}", l.name, l.op.kind()));
        if names.insert(l.name.as_str(), i).is_some() || l.name == "input" {
            return Err(ctx("duplicate or reserved layer name".into()));
        }
        if l.inputs.len() != l.op.arity() {
            return Err(ctx(format!("expects {} input(s), got {}", l.op.arity(), l.inputs.len())));
        }
        let mut ins: Vec<Vec<usize>> = Vec::new();
        for s in &l.inputs {
            match *s {
                Source::Input => ins.push(input.to_vec()),
                Source::Layer(j) if j < i => ins.push(shapes[j].clone()),
                Source::Layer(_) => return Err(ctx("reads a layer that is not defined before it".into())),
            }
        }
        let x = &ins[0];
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match x[..] {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(ctx(format!("{what} needs a C x H x W input, got {x:?}"))),
            }
        };
        let out = match &l.op {
            LayerOp::Conv2d { out_channels, kernel, stride, pad, .. } => {
                let (_, h, w) = spatial("conv2d")?;
                let oh = window_extent(h, kernel.h, stride.h, pad.h);
                let ow = window_extent(w, kernel.w, stride.w, pad.w);
                match (oh, ow, *out_channels) {
                    (Some(oh), Some(ow), oc) if oc > 0 => vec![oc, oh, ow],
                    _ => return Err(ctx(format!("window does not fit input {x:?}"))),
                }
            }
            LayerOp::MaxPool2d { kernel, stride } | LayerOp::AvgPool2d { kernel, stride } => {
                let (c, h, w) = spatial("pooling")?;
                match (window_extent(h, kernel.h, stride.h, 0), window_extent(w, kernel.w, stride.w, 0)) {
                    (Some(oh), Some(ow)) => vec![c, oh, ow],
                    _ => return Err(ctx(format!("window does not fit input {x:?}"))),
                }
            }
            LayerOp::GlobalAvgPool => vec![spatial("global_avg_pool")?.0],
            LayerOp::BatchNorm { eps, .. } => {
                if !(*eps >= 0.0) {
                    return Err(ctx("eps must be non-negative".into()));
                }
                x.clone()
            }
            LayerOp::Relu => x.clone(),
            LayerOp::ChannelMask { zeroed } => {
                if let Some(&bad) = zeroed.iter().find(|&&c| c >= x[0]) {
                    return Err(ctx(format!("channel {bad} out of range for {} channels", x[0])));
                }
                x.clone()
            }
            LayerOp::Add => {
                if ins[0] != ins[1] {
                    return Err(ctx(format!("operand shapes {:?} and {:?} differ", ins[0], ins[1])));
                }
                x.clone()
            }
            LayerOp::Linear { out_features, .. } => {
                if x.len() != 1 {
                    return Err(ctx(format!("needs a flat input, got {x:?}; add flatten or global_avg_pool")));
                }
                if *out_features == 0 {
                    return Err(ctx("out must be positive".into()));
                }
                vec![*out_features]
            }
            LayerOp::Flatten => vec![x.iter().product()],
        };
        shapes.push(out);
    }

    let last = shapes.last().unwrap();
    if last[..] != [classes] {
        return Err(Error::config(format!(
            "final layer '{}' produces {last:?}, expected [{classes}] logits",
            layers.last().unwrap().name
        )));
    }
    if split >= layers.len() - 1 {
        return Err(Error::config("split must name a layer before the final one"));
    }
    for l in layers.iter().skip(split + 1) {
        for s in &l.inputs {
            let ok = matches!(s, Source::Layer(j) if *j >= split);
            if !ok {
                return Err(Error::config(format!(
                    "classifier layer '{}' reads from before the split at '{}'",
                    l.name, layers[split].name
                )));
            }
        }
    }

    let mut ids = BTreeSet::new();
    for t in taps {
        if !ids.insert(t.id.as_str()) {
            return Err(Error::config(format!("duplicate tap id '{}'", t.id)));
        }
        if t.block.is_empty() {
            return Err(Error::config(format!("tap '{}' has an empty block label", t.id)));
        }
        if t.layer >= layers.len() {
            return Err(Error::config(format!("tap '{}' points past the last layer", t.id)));
        }
        if t.layer > split {
            return Err(Error::config(format!(
                "tap '{}' on layer '{}' lies in the classifier head; taps must be at or before the split",
                t.id, layers[t.layer].name
            )));
        }
        if shapes[t.layer].len() != 3 {
            return Err(Error::config(format!(
                "tap '{}' on layer '{}' needs a C x H x W activation, got {:?}",
                t.id, layers[t.layer].name, shapes[t.layer]
            )));
        }
    }
    Ok(shapes)
}

#[derive(Default)]
struct Parser {
    input: Option<[usize; 3]>,
    classes: Option<usize>,
    layers: Vec<Layer>,
    names: HashMap<String, usize>,
    taps: Vec<(usize, String, String, String)>,
    split: Option<(usize, String)>,
}

impl Parser {
    fn run(mut self, doc: &str) -> Result<ModelGraph> {
        for (lineno, raw) in doc.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.line(line, lineno + 1).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        let input = self.input.ok_or_else(|| Error::config("missing 'input <C> <H> <W>' directive"))?;
        let classes = self.classes.ok_or_else(|| Error::config("missing 'classes <C>' directive"))?;
        let (split_line, split_name) = self.split.ok_or_else(|| Error::config("missing 'split <layer>' directive"))?;
        let split = *self
            .names
            .get(&split_name)
            .ok_or_else(|| Error::config(format!("line {split_line}: split names unknown layer '{split_name}'")))?;
        let mut taps = Vec::new();
        for (lineno, id, layer, block) in self.taps {
            let idx = *self
                .names
                .get(&layer)
                .ok_or_else(|| Error::config(format!("line {lineno}: tap '{id}' names unknown layer '{layer}'")))?;
            taps.push(TapPoint { id, layer: idx, block });
        }
        ModelGraph::new(input, classes, self.layers, taps, split)
    }

    fn line(&mut self, line: &str, lineno: usize) -> Result<()> {
        let mut words = line.split_whitespace();
        let head = words.next().unwrap_or_default();
        if let Some(name) = head.strip_suffix(':') {
            return self.layer(name, words.collect());
        }
        let args: Vec<&str> = words.collect();
        match head {
            "input" => {
                let dims = parse_usizes(&args, 3, "input")?;
                self.input = Some([dims[0], dims[1], dims[2]]);
            }
            "classes" => self.classes = Some(parse_usizes(&args, 1, "classes")?[0]),
            "tap" => match args[..] {
                [id, layer, block] => {
                    self.taps.push((lineno, id.to_string(), layer.to_string(), block.to_string()));
                }
                _ => return Err(Error::config("expected 'tap <tap_id> <layer_name> <block_label>'")),
            },
            "split" => match args[..] {
                [layer] => self.split = Some((lineno, layer.to_string())),
                _ => return Err(Error::config("expected 'split <layer_name>'")),
            },
            other => return Err(Error::config(format!("unknown directive '{other}'"))),
        }
        Ok(())
    }

    fn layer(&mut self, name: &str, words: Vec<&str>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::config("layer name is empty"));
        }
        let kind = *words.first().ok_or_else(|| Error::config(format!("layer '{name}' has no op")))?;
        let mut kv = KeyValues::parse(name, &words[1..])?;
        let inputs = match kv.take("in") {
            Some(list) => list
                .split(',')
                .map(|s| self.source(name, s))
                .collect::<Result<Vec<_>>>()?,
            None => vec![match self.layers.len() {
                0 => Source::Input,
                n => Source::Layer(n - 1),
            }],
        };
        let op = match kind {
            "conv2d" => LayerOp::Conv2d {
                out_channels: kv.usize("out")?,
                kernel: kv.pair("kernel")?,
                stride: kv.pair_or("stride", 1)?,
                pad: kv.pair_or("pad", 0)?,
                weight: kv.string("weight")?,
                bias: kv.take("bias"),
            },
            "batchnorm" => LayerOp::BatchNorm {
                gamma: kv.string("gamma")?,
                beta: kv.string("beta")?,
                mean: kv.string("mean")?,
                var: kv.string("var")?,
                eps: match kv.take("eps") {
                    Some(v) => v.parse().map_err(|_| kv.err(format!("bad eps '{v}'")))?,
                    None => 1e-5,
                },
            },
            "relu" => LayerOp::Relu,
            "max_pool" => {
                let stride = kv.pair_or_key("stride", "kernel")?;
                LayerOp::MaxPool2d { kernel: kv.pair("kernel")?, stride }
            }
            "avg_pool" => {
                let stride = kv.pair_or_key("stride", "kernel")?;
                LayerOp::AvgPool2d { kernel: kv.pair("kernel")?, stride }
            }
            "global_avg_pool" => LayerOp::GlobalAvgPool,
            "add" => LayerOp::Add,
            "linear" => LayerOp::Linear {
                out_features: kv.usize("out")?,
                weight: kv.string("weight")?,
                bias: kv.take("bias"),
            },
            "flatten" => LayerOp::Flatten,
            "channel_mask" => LayerOp::ChannelMask {
                zeroed: kv
                    .string("zero")?
                    .split(',')
                    .map(|s| s.parse().map_err(|_| kv.err(format!("bad channel index '{s}'"))))
                    .collect::<Result<Vec<_>>>()?,
            },
            other => {
                return Err(Error::config(format!(
                    "layer '{name}': unknown op '{other}' (known: conv2d, batchnorm, relu, max_pool, avg_pool, \
                     global_avg_pool, add, linear, flatten, channel_mask)"
                )))
            }
        };
        kv.finish()?;
        if self.names.insert(name.to_string(), self.layers.len()).is_some() {
            return Err(Error::config(format!("duplicate layer name '{name}'")));
        }
        self.layers.push(Layer { name: name.to_string(), op, inputs });
        Ok(())
    }

    fn source(&self, layer: &str, s: &str) -> Result<Source> {
        if s == "input" {
            return Ok(Source::Input);
        }
        self.names
            .get(s)
            .map(|&i| Source::Layer(i))
            .ok_or_else(|| Error::config(format!("layer '{layer}': input '{s}' is not a previously defined layer")))
    }
}

fn parse_usizes(args: &[&str], n: usize, what: &str) -> Result<Vec<usize>> {
    if args.len() != n {
        return Err(Error::config(format!("'{what}' takes {n} integer argument(s)")));
    }
    args.iter()
        .map(|a| a.parse().map_err(|_| Error::config(format!("'{what}': '{a}' is not a non-negative integer"))))
        .collect()
}

struct KeyValues<'a> {
    layer: &'a str,
    map: Vec<(&'a str, &'a str)>,
}

impl<'a> KeyValues<'a> {
    fn parse(layer: &'a str, words: &[&'a str]) -> Result<Self> {
        let mut map = Vec::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::config(format!("layer '{layer}': expected key=value, got '{w}'")))?;
            if map.iter().any(|(mk, _)| *mk == k) {
                return Err(Error::config(format!("layer '{layer}': key '{k}' given twice")));
            }
            map.push((k, v));
        }
        Ok(KeyValues { layer, map })
    }

    fn err(&self, m: String) -> Error {
        Error::config(format!("layer '{}': {m}", self.layer))
    }

    fn take(&mut self, key: &str) -> Option<String> {
        let pos = self.map.iter().position(|(k, _)| *k == key)?;
        Some(self.map.remove(pos).1.to_string())
    }

    fn peek(&self, key: &str) -> Option<&'a str> {
        self.map.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn string(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| self.err(format!("missing '{key}='")))
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.string(key)?;
        v.parse().map_err(|_| self.err(format!("'{key}={v}' is not an integer")))
    }

    fn parse_pair(&self, key: &str, v: &str) -> Result<Pair> {
        let bad = || self.err(format!("'{key}={v}' is not N or HxW"));
        match v.split_once('x') {
            Some((h, w)) => Ok(Pair::new(h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)),
            None => Ok(Pair::square(v.parse().map_err(|_| bad())?)),
        }
    }

    fn pair(&mut self, key: &str) -> Result<Pair> {
        let v = self.string(key)?;
        self.parse_pair(key, &v)
    }

    fn pair_or(&mut self, key: &str, default: usize) -> Result<Pair> {
        match self.take(key) {
            Some(v) => self.parse_pair(key, &v),
            None => Ok(Pair::square(default)),
        }
    }

    /// `key` if present, otherwise the value of `fallback` (not consumed).
    fn pair_or_key(&mut self, key: &str, fallback: &str) -> Result<Pair> {
        match self.take(key) {
            Some(v) => self.parse_pair(key, &v),
            None => {
                let v = self.peek(fallback).ok_or_else(|| self.err(format!("missing '{fallback}='")))?;
                self.parse_pair(fallback, v)
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.first() {
            None => Ok(()),
            Some((k, _)) => Err(self.err(format!("unknown key '{k}'"))),
        }
    }
}
