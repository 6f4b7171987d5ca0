//! Abnormality scores from attribution gradients.
//!
//! Both scorers turn the gradients captured at tapped feature maps into one
//! non-negative statistic per channel, arrange those statistics into a
//! zero-padded matrix with one row per tapped layer, and report the matrix
//! p-norm (Frobenius by default) as the OOD score. Higher means more
//! likely out-of-distribution.
//!
//! * **GAIA-Z** seeds backward with the predicted class and measures, per
//!   channel, the fraction of gradient entries that are non-zero.
//! * **GAIA-A** runs two backward passes. The classifier head is
//!   differentiated for the sum of log-softmax outputs, giving the output
//!   component at the last feature map; the feature extractor is
//!   differentiated for the sum of the last feature map, giving the inner
//!   component at each tap. The per-channel statistic is the inner
//!   component's mean absolute gradient divided by the square root of the
//!   output component's mean absolute gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::SampleBatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GaiaZ,
    GaiaA,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GaiaZ => "gaia-z",
            Method::GaiaA => "gaia-a",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaia-z" | "gaia_z" => Ok(Method::GaiaZ),
            "gaia-a" | "gaia_a" => Ok(Method::GaiaA),
            _ => Err(Error::config(format!("unknown GAIA method '{s}' (expected gaia-z or gaia-a)"))),
        }
    }
}

/// How GAIA-A combines label space and feature space. The non-default modes
/// are ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Log-softmax fused output component divided into the inner component.
    #[default]
    TwoStage,
    /// Predicted-class seed end to end; statistic is mean |grad|.
    Top1Label,
    /// Output component alone.
    OutputOnly,
    /// Inner component alone.
    InnerOnly,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::TwoStage, Fusion::Top1Label, Fusion::OutputOnly, Fusion::InnerOnly];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::TwoStage => "two_stage",
            Fusion::Top1Label => "top1_label",
            Fusion::OutputOnly => "output_only",
            Fusion::InnerOnly => "inner_only",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Fusion::ALL
            .into_iter()
            .find(|f| f.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown fusion mode '{s}' (expected two_stage, top1_label, output_only or inner_only)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub method: Method,
    /// Tap ids or block labels to include.
    pub taps: Vec<String>,
    /// Gradient entries with `|g| <= tau` count as zero (GAIA-Z).
    pub tau: f32,
    /// Order of the matrix norm.
    pub p: f64,
    pub fusion: Fusion,
    /// Floor applied to the output component before the square root (GAIA-A).
    pub eps_floor: f64,
}

impl ScorerConfig {
    pub fn new(method: Method, taps: Vec<String>) -> Self {
        ScorerConfig { method, taps, tau: 0.0, p: 2.0, fusion: Fusion::TwoStage, eps_floor: 1e-12 }
    }

    pub fn gaia_z<S: Into<String>>(taps: impl IntoIterator<Item = S>) -> Self {
        Self::new(Method::GaiaZ, taps.into_iter().map(Into::into).collect())
    }

    pub fn gaia_a<S: Into<String>>(taps: impl IntoIterator<Item = S>) -> Self {
        Self::new(Method::GaiaA, taps.into_iter().map(Into::into).collect())
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn with_tau(mut self, tau: f32) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::config("no taps selected"));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("tau must be a finite value >= 0, got {}", self.tau)));
        }
        if !(self.p >= 1.0) || !self.p.is_finite() {
            return Err(Error::config(format!("norm order p must be finite and >= 1, got {}", self.p)));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::config(format!("epsilon floor must be > 0, got {}", self.eps_floor)));
        }
        if self.method == Method::GaiaZ && self.fusion != Fusion::TwoStage {
            return Err(Error::config("fusion modes apply to gaia-a only"));
        }
        Ok(())
    }
}

/// Fraction of entries in one channel's gradient map with `|g| > tau`.
pub fn zero_deflation_expectation<T: Scalar>(grad_map: &[T], tau: T) -> f64 {
    if grad_map.is_empty() {
        return 0.0;
    }
    let nonzero = grad_map.iter().filter(|g| g.abs() > tau).count();
    nonzero as f64 / grad_map.len() as f64
}

/// Backward seed that differentiates the sum of all log-softmax outputs:
/// `1 - C * softmax(s)_j` for each row of an N x C logit tensor.
pub fn fused_logsoftmax_seed<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2()?;
    let classes = T::from_usize(c).unwrap();
    Ok(ops::softmax(logits)?.map(|p| T::one() - classes * p))
}

/// One-hot seed on each row's highest logit (first index wins ties).
pub fn top1_seed<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = logits.dims2()?;
    let mut seed = Tensor::zeros(&[n, c]);
    let d = seed.data_mut();
    for (row, s) in logits.data().chunks_exact(c).enumerate() {
        d[row * c + argmax(s)] = T::one();
    }
    Ok(seed)
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean absolute value, accumulated in `f64`.
pub fn mean_abs<T: Scalar>(values: &[T]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v.abs().to_f64().unwrap()).sum::<f64>() / values.len() as f64
}

/// Per-channel GAIA-A statistic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelAverage {
    pub value: f64,
    /// The output component was below the floor, so the floor was used.
    pub output_degenerate: bool,
}

/// `mean|inner| / sqrt(max(mean|output|, floor))`.
pub fn channel_avg_expectation<T: Scalar>(inner: &[T], output: &[T], floor: f64) -> ChannelAverage {
    fused_ratio(mean_abs(inner), mean_abs(output), floor)
}

fn fused_ratio(e_inner: f64, e_output: f64, floor: f64) -> ChannelAverage {
    let degenerate = e_output < floor;
    let value = if e_inner == 0.0 { 0.0 } else { e_inner / e_output.max(floor).sqrt() };
    ChannelAverage { value, output_degenerate: degenerate }
}

/// Rows of per-channel expectations, zero-padded to the widest row.
#[derive(Clone, Debug, PartialEq)]
pub struct AbnormalityMatrix {
    rows: usize,
    cols: usize,
    widths: Vec<usize>,
    data: Vec<f64>,
}

impl AbnormalityMatrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let mut data = vec![0.0; rows.len() * cols];
        let mut widths = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if let Some(bad) = r.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Numeric(format!("abnormality entry {bad} in row {i} is not finite and >= 0")));
            }
            data[i * cols..i * cols + r.len()].copy_from_slice(r);
            widths.push(r.len());
        }
        Ok(AbnormalityMatrix { rows: rows.len(), cols, widths, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Unpadded length of row `i`.
    pub fn row_width(&self, i: usize) -> usize {
        self.widths[i]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn pnorm(&self, p: f64) -> f64 {
        matrix_pnorm(self, p)
    }
}

/// Entrywise p-norm, `(sum |x|^p)^(1/p)`; `p = 2` is the Frobenius norm.
pub fn matrix_pnorm(m: &AbnormalityMatrix, p: f64) -> f64 {
    let entries = m.entries();
    if p == 1.0 {
        entries.iter().sum()
    } else if p == 2.0 {
        entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        entries.iter().map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    In,
    Out,
}

/// Threshold rule: out iff `score > gamma`, so the boundary is in-distribution.
pub fn decide(score: f64, gamma: f64) -> Decision {
    if score > gamma {
        Decision::Out
    } else {
        Decision::In
    }
}

/// Per-channel statistics of one sample for every computed tap, before
/// assembly into a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub rows: Vec<(String, Vec<f64>)>,
    /// Mean |output component| (GAIA-A two-stage and output-only).
    pub output_component: Option<f64>,
    pub output_degenerate: bool,
    fusion: Fusion,
}

impl ChannelStats {
    /// Matrix over all computed taps.
    pub fn matrix(&self) -> Result<AbnormalityMatrix> {
        if self.fusion == Fusion::OutputOnly {
            return AbnormalityMatrix::from_rows(&[[self.output_component.unwrap_or(0.0)]]);
        }
        let rows: Vec<&[f64]> = self.rows.iter().map(|(_, r)| r.as_slice()).collect();
        AbnormalityMatrix::from_rows(&rows)
    }

    /// Matrix over a subset of the computed taps (ids, graph order kept).
    pub fn matrix_for(&self, taps: &[String]) -> Result<AbnormalityMatrix> {
        if self.fusion == Fusion::OutputOnly {
            return self.matrix();
        }
        let mut rows = Vec::with_capacity(taps.len());
        for t in taps {
            let (_, r) = self
                .rows
                .iter()
                .find(|(id, _)| id == t)
                .ok_or_else(|| Error::config(format!("tap '{t}' was not computed")))?;
            rows.push(r.as_slice());
        }
        AbnormalityMatrix::from_rows(&rows)
    }
}

/// One sample's score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScore {
    pub score: f64,
    /// The GAIA-A output component fell below the floor.
    pub output_degenerate: bool,
}

/// Per-sample channel statistics for a batch of images (N x C x H x W).
pub fn channel_stats(model: &Model, images: &Tensor<f32>, cfg: &ScorerConfig) -> Result<Vec<ChannelStats>> {
    cfg.validate()?;
    let taps = model.graph().select_taps(&cfg.taps)?;
    let mut pass = model.record(images, &taps)?;
    let logits = pass.logits().clone();
    let n = logits.batch_len();
    let feature_shape = pass.last_feature_map().shape().to_vec();

    let (output_component, grads, stat): (Option<Vec<f64>>, _, fn(&[f32], f32) -> f64) =
        match (cfg.method, cfg.fusion) {
            (Method::GaiaZ, _) => {
                let grads = pass.backward(&top1_seed(&logits)?)?;
                (None, Some(grads), |g, tau| zero_deflation_expectation(g, tau))
            }
            (Method::GaiaA, Fusion::Top1Label) => {
                let grads = pass.backward(&top1_seed(&logits)?)?;
                (None, Some(grads), |g, _| mean_abs(g))
            }
            (Method::GaiaA, Fusion::InnerOnly) => {
                let grads = pass.backward_features(&Tensor::ones(&feature_shape))?;
                (None, Some(grads), |g, _| mean_abs(g))
            }
            (Method::GaiaA, Fusion::OutputOnly) => {
                let out = pass.backward_head(&fused_logsoftmax_seed(&logits)?)?;
                ((0..n).map(|i| mean_abs(out.row(i))).collect::<Vec<_>>().into(), None, |g, _| mean_abs(g))
            }
            (Method::GaiaA, Fusion::TwoStage) => {
                let out = pass.backward_head(&fused_logsoftmax_seed(&logits)?)?;
                let e_out: Vec<f64> = (0..n).map(|i| mean_abs(out.row(i))).collect();
                let grads = pass.backward_features(&Tensor::ones(&feature_shape))?;
                (Some(e_out), Some(grads), |g, _| mean_abs(g))
            }
        };

    let mut stats = Vec::with_capacity(n);
    for i in 0..n {
        let e_out = output_component.as_ref().map(|v| v[i]);
        let mut degenerate = false;
        let mut rows = Vec::new();
        if let Some(grads) = &grads {
            for id in &taps {
                let g = grads.get(id).expect("every selected tap has a gradient");
                let channels = g.shape()[1];
                let row: Vec<f64> = (0..channels)
                    .map(|k| {
                        let plane = g.plane(i, k);
                        match (cfg.fusion, e_out) {
                            (Fusion::TwoStage, Some(e)) if cfg.method == Method::GaiaA => {
                                let r = fused_ratio(mean_abs(plane), e, cfg.eps_floor);
                                degenerate |= r.output_degenerate;
                                r.value
                            }
                            _ => stat(plane, cfg.tau),
                        }
                    })
                    .collect();
                rows.push((id.clone(), row));
            }
        }
        if cfg.fusion == Fusion::OutputOnly {
            degenerate = e_out.unwrap_or(0.0) < cfg.eps_floor;
        }
        stats.push(ChannelStats { rows, output_component: e_out, output_degenerate: degenerate, fusion: cfg.fusion });
    }
    Ok(stats)
}

/// Scores every sample in `images` with the configured method.
pub fn score_images(model: &Model, images: &Tensor<f32>, cfg: &ScorerConfig) -> Result<Vec<SampleScore>> {
    channel_stats(model, images, cfg)?
        .into_iter()
        .map(|s| {
            Ok(SampleScore { score: s.matrix()?.pnorm(cfg.p), output_degenerate: s.output_degenerate })
        })
        .collect()
}

pub fn score(model: &Model, batch: &SampleBatch, cfg: &ScorerConfig) -> Result<Vec<SampleScore>> {
    score_images(model, &batch.images, cfg)
}

/// GAIA-Z scores; `cfg.method` must be [`Method::GaiaZ`].
pub fn score_gaia_z(model: &Model, batch: &SampleBatch, cfg: &ScorerConfig) -> Result<Vec<SampleScore>> {
    if cfg.method != Method::GaiaZ {
        return Err(Error::config("score_gaia_z called with a gaia-a configuration"));
    }
    score(model, batch, cfg)
}

/// GAIA-A scores; `cfg.method` must be [`Method::GaiaA`].
pub fn score_gaia_a(model: &Model, batch: &SampleBatch, cfg: &ScorerConfig) -> Result<Vec<SampleScore>> {
    if cfg.method != Method::GaiaA {
        return Err(Error::config("score_gaia_a called with a gaia-z configuration"));
    }
    score(model, batch, cfg)
}
