//! Finite-difference verification of tap gradients on random graphs.
//!
//! Each trial builds a small random network (convolutions, batch norm,
//! ReLU, pooling, residual additions, channel masks, linear head), draws a
//! random seed over the logits and compares analytic tap gradients with
//! central differences of `seed . logits` computed in `f64`.
//!
//! Elements whose ReLU sign pattern or max-pool winners differ between the
//! two perturbed evaluations sit on a kink; they are skipped and another
//! element is drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::graph::{LayerOp, ModelGraph, Source};
use crate::model::{Model, Perturbation};
use crate::ops;
use crate::tape::OpKind;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub graphs: usize,
    pub elements_per_graph: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Analytic gradients below this magnitude are judged by `abs_tol`.
    pub small: f64,
    pub batch: usize,
    /// Precision of the analytic backward pass.
    pub analytic: Precision,
    #[doc(hidden)]
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            graphs: 20,
            elements_per_graph: 20,
            step: 1e-3,
            rel_tol: 1e-3,
            abs_tol: 1e-5,
            small: 1e-6,
            batch: 2,
            analytic: Precision::F32,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub graph: usize,
    pub tap: String,
    /// Kind of the layer whose output is tapped.
    pub op: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub graphs: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
    /// Graphs where too few kink-free elements were found.
    pub starved: Vec<usize>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.starved.is_empty()
    }
}

/// A random graph with weights, as produced for one trial.
pub struct RandomNet {
    pub document: String,
    pub graph: ModelGraph,
    pub weights: Archive,
}

/// Builds a random small CNN. Every tap sits before the split.
pub fn random_net(rng: &mut impl Rng) -> Result<RandomNet> {
    let mut doc = String::new();
    let mut taps = Vec::new();
    let c0 = rng.random_range(1..=3);
    let mut size: usize = if rng.random_bool(0.5) { 6 } else { 8 };
    let classes = rng.random_range(2..=5);
    let mut ch = rng.random_range(2..=4);
    doc += &format!("input {c0} {size} {size}\nclasses {classes}\n");
    doc += &format!("l0: conv2d out={ch} kernel=3 pad=1 weight=l0.w bias=l0.b\n");
    doc += "l0_bn: batchnorm gamma=l0_bn.gamma beta=l0_bn.beta mean=l0_bn.mean var=l0_bn.var eps=1e-5\n";
    doc += "l0_relu: relu\n";
    taps.push("l0_bn".to_string());
    let mut last = "l0_relu".to_string();

    for b in 1..=rng.random_range(1..=3) {
        let kind = if size < 4 { 0 } else { rng.random_range(0..5) };
        match kind {
            0 => {
                doc += &format!("r{b}_c1: conv2d out={ch} kernel=3 pad=1 weight=r{b}_c1.w bias=r{b}_c1.b\n");
                doc += &format!(
                    "r{b}_bn: batchnorm gamma=r{b}_bn.gamma beta=r{b}_bn.beta mean=r{b}_bn.mean var=r{b}_bn.var eps=1e-5\n"
                );
                doc += &format!("r{b}_r1: relu\n");
                doc += &format!("r{b}_c2: conv2d out={ch} kernel=3 pad=1 weight=r{b}_c2.w\n");
                doc += &format!("r{b}_add: add in=r{b}_c2,{last}\n");
                doc += &format!("r{b}_out: relu\n");
                taps.push(format!("r{b}_add"));
                last = format!("r{b}_out");
            }
            1 => {
                doc += &format!("p{b}: max_pool kernel=2\n");
                taps.push(format!("p{b}"));
                last = format!("p{b}");
                size /= 2;
            }
            2 => {
                doc += &format!("p{b}: avg_pool kernel=2\n");
                taps.push(format!("p{b}"));
                last = format!("p{b}");
                size /= 2;
            }
            3 => {
                let out = rng.random_range(2..=5);
                doc += &format!("d{b}: conv2d out={out} kernel=3 stride=2 pad=1 weight=d{b}.w bias=d{b}.b\n");
                doc += &format!("d{b}_r: relu\n");
                taps.push(format!("d{b}"));
                last = format!("d{b}_r");
                ch = out;
                size = size.div_ceil(2);
            }
            _ => {
                doc += &format!("m{b}: channel_mask zero={}\n", rng.random_range(0..ch));
                doc += &format!("m{b}_c: conv2d out={ch} kernel=3 pad=1 weight=m{b}_c.w bias=m{b}_c.b\n");
                taps.push(format!("m{b}"));
                last = format!("m{b}_c");
            }
        }
    }
    taps.push(last.clone());
    if rng.random_bool(0.5) {
        doc += "gap: global_avg_pool\n";
    } else {
        doc += "flat: flatten\n";
    }
    doc += &format!("fc: linear out={classes} weight=fc.w bias=fc.b\n");
    for (i, t) in taps.iter().enumerate() {
        doc += &format!("tap t{i} {t} b{i}\n");
    }
    doc += &format!("split {last}\n");

    let graph = ModelGraph::parse(&doc)?;
    let mut weights = Archive::new();
    for (name, shape) in graph.weight_specs() {
        let count: usize = shape.iter().product();
        let values: Vec<f64> = if name.ends_with(".w") {
            let fan_in: usize = shape[1..].iter().product();
            let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..count).map(|_| he.sample(rng)).collect()
        } else if name.ends_with(".gamma") || name.ends_with(".var") {
            (0..count).map(|_| rng.random_range(0.5..1.5)).collect()
        } else {
            (0..count).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        weights.insert_f32(name, Tensor::from_f64(&shape, &values)?);
    }
    Ok(RandomNet { document: doc, graph, weights })
}

fn objective(logits: &Tensor<f64>, seed: &Tensor<f64>) -> f64 {
    logits.data().iter().zip(seed.data()).map(|(a, b)| a * b).sum()
}

/// Activation patterns that make the network locally linear.
fn pattern(graph: &ModelGraph, outs: &[Tensor<f64>], images: &Tensor<f64>) -> Result<Vec<Vec<usize>>> {
    let source = |s: Source| match s {
        Source::Input => images,
        Source::Layer(j) => &outs[j],
    };
    let mut pat = Vec::new();
    for (i, layer) in graph.layers().iter().enumerate() {
        match &layer.op {
            LayerOp::Relu => {
                pat.push(outs[i].data().iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(k, _)| k).collect());
            }
            LayerOp::MaxPool2d { kernel, stride } => {
                pat.push(ops::max_pool2d(source(layer.inputs[0]), *kernel, *stride)?.1);
            }
            _ => {}
        }
    }
    Ok(pat)
}

fn analytic_grads<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<f64>,
    seed: &Tensor<f64>,
    taps: &[String],
    fault: Option<OpKind>,
) -> Result<Vec<Vec<f64>>> {
    let mut pass = model.record(&images.cast::<T>(), taps)?;
    if let Some(k) = fault {
        pass.inject_fault(k);
    }
    let grads = pass.backward(&seed.cast::<T>())?;
    Ok(taps
        .iter()
        .map(|t| grads.get(t).unwrap().data().iter().map(|v| v.to_f64().unwrap()).collect())
        .collect())
}

/// Checks one network; appends results to `report`.
pub fn check_net(net: &RandomNet, index: usize, cfg: &GradcheckConfig, rng: &mut impl Rng, report: &mut GradcheckReport) -> Result<()> {
    let model32 = Model::new(net.graph.clone(), &net.weights)?;
    let model64 = model32.cast::<f64>();
    let [c, h, w] = net.graph.input_shape();
    let n = cfg.batch;
    let images = Tensor::<f64>::from_f64(
        &[n, c, h, w],
        &(0..n * c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>(),
    )?;
    let classes = net.graph.classes();
    let seed = Tensor::<f64>::from_f64(
        &[n, classes],
        &(0..n * classes).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>(),
    )?;
    let taps: Vec<String> = net.graph.taps().iter().map(|t| t.id.clone()).collect();
    let grads = match cfg.analytic {
        Precision::F32 => analytic_grads(&model32, &images, &seed, &taps, cfg.fault)?,
        Precision::F64 => analytic_grads(&model64, &images, &seed, &taps, cfg.fault)?,
    };

    let mut found = 0;
    let mut attempts = 0;
    while found < cfg.elements_per_graph && attempts < cfg.elements_per_graph * 20 {
        attempts += 1;
        let t = rng.random_range(0..taps.len());
        let layer = net.graph.taps()[t].layer;
        let idx = rng.random_range(0..grads[t].len());
        let eval = |delta: f64| -> Result<(f64, Vec<Vec<usize>>)> {
            let outs = model64.forward_layers(&images, Some(Perturbation { layer, index: idx, delta }))?;
            Ok((objective(outs.last().unwrap(), &seed), pattern(&net.graph, &outs, &images)?))
        };
        let (up, pu) = eval(cfg.step)?;
        let (down, pd) = eval(-cfg.step)?;
        if pu != pd {
            report.skipped_kinks += 1;
            continue;
        }
        found += 1;
        report.checked += 1;
        let numeric = (up - down) / (2.0 * cfg.step);
        let analytic = grads[t][idx];
        let err = (analytic - numeric).abs();
        let ok = if analytic.abs() < cfg.small {
            err <= cfg.abs_tol
        } else {
            let rel = err / analytic.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            rel <= cfg.rel_tol
        };
        if !ok {
            let op = net.graph.layers()[layer].op.kind().to_string();
            report.mismatches.push(Mismatch { graph: index, tap: taps[t].clone(), op, index: idx, analytic, numeric });
        }
    }
    if found < cfg.elements_per_graph {
        report.starved.push(index);
    }
    Ok(())
}

/// Runs `cfg.graphs` random trials.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.elements_per_graph == 0 || cfg.batch == 0 {
        return Err(Error::config("gradcheck needs at least one element and sample per graph"));
    }
    if !(cfg.step > 0.0) {
        return Err(Error::config("finite-difference step must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport { graphs: cfg.graphs, ..Default::default() };
    for g in 0..cfg.graphs {
        let net = random_net(&mut rng)?;
        check_net(&net, g, cfg, &mut rng, &mut report)?;
    }
    Ok(report)
}
