//! GAIA-A fusion modes side by side, with the per-sample diagnostics the
//! two-stage scorer exposes.
//!
//! cargo run --release --example fusion_ablation

use std::path::PathBuf;

use gaia::detector::{channel_stats, score_images, Detector};
use gaia::gaia::{Fusion, ScorerConfig};
use gaia::metrics::evaluate;
use gaia::{Model, SampleBatch};

fn main() -> gaia::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy4");
    let model = Model::from_files(dir.join("model.graph"), dir.join("weights.gwta"))?;
    let id = SampleBatch::read(dir.join("id_test.gwta"))?;
    let ood = SampleBatch::read(dir.join("ood_texture.gwta"))?;

    for fusion in Fusion::ALL {
        let det = Detector::Gaia(ScorerConfig::gaia_a(["block3", "block4"]).with_fusion(fusion));
        let m = evaluate(&score_images(&model, &id.images, &det, 32)?, &score_images(&model, &ood.images, &det, 32)?)?;
        println!("{:<12} fpr95 {:.4}  auroc {:.4}", fusion.name(), m.fpr95, m.auroc);
    }

    let stats = channel_stats(&model, &ood.images.rows(0..1)?, &ScorerConfig::gaia_a(["block3", "block4"]), 1)?;
    let s = &stats[0];
    println!("\nfirst texture sample: E_output {:.3e}, degenerate {}", s.output_component.unwrap_or(0.0), s.output_degenerate);
    for (tap, row) in &s.rows {
        let shown: Vec<String> = row.iter().take(6).map(|v| format!("{v:.3}")).collect();
        println!("  {tap}: {} channels [{} ...]", row.len(), shown.join(", "));
    }
    Ok(())
}
