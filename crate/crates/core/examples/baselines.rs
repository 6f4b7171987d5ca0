//! MSP and Energy next to GAIA on both fixture OOD sets.
//!
//! cargo run --release --example baselines

use std::path::PathBuf;

use gaia::detector::{score_images, Detector};
use gaia::gaia::ScorerConfig;
use gaia::metrics::evaluate;
use gaia::{Model, SampleBatch};

fn main() -> gaia::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy4");
    let model = Model::from_files(dir.join("model.graph"), dir.join("weights.gwta"))?;
    let id = SampleBatch::read(dir.join("id_test.gwta"))?;
    let oods = [SampleBatch::read(dir.join("ood_noise.gwta"))?, SampleBatch::read(dir.join("ood_texture.gwta"))?];

    let detectors = [
        Detector::Msp,
        Detector::Energy,
        Detector::Gaia(ScorerConfig::gaia_z(["block3", "block4"])),
        Detector::Gaia(ScorerConfig::gaia_a(["block3", "block4"])),
    ];
    println!("{:<8} {:<12} {:>7} {:>7}", "method", "ood", "fpr95", "auroc");
    for det in &detectors {
        let id_scores = score_images(&model, &id.images, det, 32)?;
        for ood in &oods {
            let m = evaluate(&id_scores, &score_images(&model, &ood.images, det, 32)?)?;
            println!("{:<8} {:<12} {:>7.4} {:>7.4}", det.label(), ood.source, m.fpr95, m.auroc);
        }
    }
    Ok(())
}
