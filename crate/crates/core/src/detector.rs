//! One entry point for every scoring method, batched and parallel.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline;
use crate::error::{Error, Result};
use crate::gaia::{self, ChannelStats, Fusion, Method, ScorerConfig};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detector {
    Gaia(ScorerConfig),
    Msp,
    Energy,
}

impl Detector {
    /// Short label used in score files and reports, e.g. `gaia-a` or
    /// `gaia-a/inner_only`.
    pub fn label(&self) -> String {
        match self {
            Detector::Gaia(c) if c.fusion == Fusion::TwoStage => c.method.name().to_string(),
            Detector::Gaia(c) => format!("{}/{}", c.method.name(), c.fusion.name()),
            Detector::Msp => "msp".into(),
            Detector::Energy => "energy".into(),
        }
    }

    pub fn parse(method: &str, taps: Vec<String>) -> Result<Self> {
        match method {
            "msp" => Ok(Detector::Msp),
            "energy" => Ok(Detector::Energy),
            m => Ok(Detector::Gaia(ScorerConfig::new(m.parse::<Method>()?, taps))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Detector::Gaia(c) => c.validate(),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn chunks(n: usize, batch_size: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok((0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect())
}

/// Splits `images` into batches, runs `f` on each in parallel and
/// concatenates results in input order.
pub fn map_batches<R: Send>(
    images: &Tensor<f32>,
    batch_size: usize,
    f: impl Fn(&Tensor<f32>) -> Result<Vec<R>> + Sync,
) -> Result<Vec<R>> {
    let parts: Vec<Vec<R>> = chunks(images.batch_len(), batch_size)?
        .into_par_iter()
        .map(|r| f(&images.rows(r)?))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Per-sample scores for every image, in input order.
pub fn score_images(model: &Model, images: &Tensor<f32>, detector: &Detector, batch_size: usize) -> Result<Vec<f64>> {
    detector.validate()?;
    map_batches(images, batch_size, |chunk| match detector {
        Detector::Gaia(cfg) => Ok(gaia::score_images(model, chunk, cfg)?.into_iter().map(|s| s.score).collect()),
        Detector::Msp => baseline::score_msp(&model.forward(chunk)?),
        Detector::Energy => baseline::score_energy(&model.forward(chunk)?),
    })
}

/// Per-sample channel statistics, batched.
pub fn channel_stats(model: &Model, images: &Tensor<f32>, cfg: &ScorerConfig, batch_size: usize) -> Result<Vec<ChannelStats>> {
    cfg.validate()?;
    map_batches(images, batch_size, |chunk| gaia::channel_stats(model, chunk, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_ranges() {
        assert_eq!(chunks(5, 2).unwrap(), vec![0..2, 2..4, 4..5]);
        assert_eq!(chunks(2, 8).unwrap(), vec![0..2]);
        assert!(chunks(3, 0).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(Detector::parse("gaia-z", vec!["b".into()]).unwrap().label(), "gaia-z");
        let d = Detector::Gaia(ScorerConfig::gaia_a(["b"]).with_fusion(Fusion::InnerOnly));
        assert_eq!(d.label(), "gaia-a/inner_only");
        assert!(Detector::parse("odin", vec![]).is_err());
    }
}
