//! Which residual blocks to tap: a sweep over tap subsets and norm orders
//! with the benchmark runner. Writes report.json and score CSVs.
//!
//! cargo run --release --example block_ablation -- [out_dir]

use std::path::PathBuf;

use gaia::benchmark::{run_benchmark, BenchmarkConfig};
use gaia::gaia::ScorerConfig;
use gaia::{Detector, Model, SampleBatch};

fn main() -> gaia::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy4");
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gaia_block_ablation"));
    let model = Model::from_files(dir.join("model.graph"), dir.join("weights.gwta"))?;
    let id = SampleBatch::read(dir.join("id_test.gwta"))?;
    let oods = [SampleBatch::read(dir.join("ood_noise.gwta"))?, SampleBatch::read(dir.join("ood_texture.gwta"))?];

    let subsets = [
        &["block1"][..],
        &["block2"],
        &["block3"],
        &["block4"],
        &["block3", "block4"],
        &["block1", "block2", "block3", "block4"],
    ];
    let cfg = BenchmarkConfig {
        detectors: vec![Detector::Gaia(ScorerConfig::gaia_z(["block4"])), Detector::Gaia(ScorerConfig::gaia_a(["block4"]))],
        tap_subsets: subsets.iter().map(|s| s.iter().map(|t| t.to_string()).collect()).collect(),
        p_values: vec![1.0, 2.0, 4.0],
        batch_size: 32,
    };
    let result = run_benchmark(&model, &id, &oods, &cfg);
    result.write(&out)?;

    println!("{:<8} {:<28} {:>3} {:>7} {:>7}", "method", "taps", "p", "fpr95", "auroc");
    for a in &result.report.averages {
        println!(
            "{:<8} {:<28} {:>3} {:>7.4} {:>7.4}",
            a.method,
            a.taps.join("+"),
            a.p.unwrap_or(f64::NAN),
            a.fpr95.unwrap_or(f64::NAN),
            a.auroc.unwrap_or(f64::NAN)
        );
    }
    println!("report: {}", out.join("report.json").display());
    Ok(())
}
