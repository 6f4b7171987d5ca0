//! Build a model from a graph document, tap a few layers and look at the
//! raw gradients the scorers work from.
//!
//! cargo run --example custom_graph

use gaia::gaia::{channel_stats, fused_logsoftmax_seed, top1_seed, ScorerConfig};
use gaia::{Archive, Model, ModelGraph, Tensor};

const DOC: &str = "\
input 1 6 6
classes 3
conv: conv2d out=4 kernel=3 pad=1 weight=conv.w bias=conv.b
act: relu
pool: max_pool kernel=2
mask: channel_mask zero=3
conv2: conv2d out=4 kernel=3 pad=1 weight=conv2.w
sum: add in=conv2,mask
out: relu
gap: global_avg_pool
fc: linear out=3 weight=fc.w bias=fc.b
tap early conv shallow
tap late sum deep
split out
";

fn main() -> gaia::Result<()> {
    let graph = ModelGraph::parse(DOC)?;
    let mut weights = Archive::new();
    for (i, (name, shape)) in graph.weight_specs().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|k| ((k * 7 + i * 13) % 11) as f64 / 11.0 - 0.45).collect();
        weights.insert_f32(name, Tensor::from_f64(&shape, &v)?);
    }
    let model = Model::new(graph, &weights)?;
    let x = Tensor::from_f64(&[1, 1, 6, 6], &(0..36).map(|k| (k as f64 * 0.37).sin()).collect::<Vec<_>>())?;

    let pass = model.record(&x, &["early", "late"])?;
    println!("logits {:?}", pass.logits().data());
    println!("top-1 seed {:?}", top1_seed(pass.logits())?.data());
    println!("fused seed {:?}", fused_logsoftmax_seed(pass.logits())?.data());
    let seed = top1_seed(pass.logits())?;
    let grads = pass.backward(&seed)?;
    for (tap, g) in grads.iter() {
        let zeros = g.data().iter().filter(|v| **v == 0.0).count();
        println!("{tap}: shape {:?}, {zeros} of {} entries exactly zero", g.shape(), g.len());
    }

    for cfg in [ScorerConfig::gaia_z(["shallow", "deep"]), ScorerConfig::gaia_a(["shallow", "deep"])] {
        let stats = &channel_stats(&model, &x, &cfg)?[0];
        let m = stats.matrix()?;
        println!("{} matrix {}x{}, score {:.4}", cfg.method, m.rows(), m.cols(), m.pnorm(2.0));
        for r in 0..m.rows() {
            println!("  {:?}", m.row(r));
        }
    }
    Ok(())
}
