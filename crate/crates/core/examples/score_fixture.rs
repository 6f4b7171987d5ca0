//! Score the bundled toy model's ID test set and uniform-noise OOD set with
//! GAIA-Z and GAIA-A, then report FPR95 and AUROC.
//!
//! cargo run --release --example score_fixture

use std::path::PathBuf;

use gaia::detector::{score_images, Detector};
use gaia::gaia::ScorerConfig;
use gaia::metrics::evaluate;
use gaia::{Model, SampleBatch};

fn main() -> gaia::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy4");
    let model = Model::from_files(dir.join("model.graph"), dir.join("weights.gwta"))?;
    let id = SampleBatch::read(dir.join("id_test.gwta"))?;
    let ood = SampleBatch::read(dir.join("ood_noise.gwta"))?;

    for cfg in [ScorerConfig::gaia_z(["block3", "block4"]), ScorerConfig::gaia_a(["block3", "block4"])] {
        let det = Detector::Gaia(cfg);
        let a = score_images(&model, &id.images, &det, 32)?;
        let b = score_images(&model, &ood.images, &det, 32)?;
        let m = evaluate(&a, &b)?;
        println!("{det:<8} fpr95 {:.4}  auroc {:.4}  gamma {:.4}", m.fpr95, m.auroc, m.gamma);
        println!("         first ID scores  {:?}", &a[..3]);
        println!("         first OOD scores {:?}", &b[..3]);
    }
    Ok(())
}
