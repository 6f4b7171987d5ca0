//! Grid evaluation over methods, OOD sets, tap subsets and norm orders.
//!
//! A failing cell records its error and the rest of the grid still runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::SampleBatch;
use crate::detector::{self, Detector};
use crate::error::{Error, Result};
use crate::gaia::ChannelStats;
use crate::metrics;
use crate::model::Model;
use crate::scores::{Origin, ScoreSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// GAIA detectors take their taps from `tap_subsets`.
    pub detectors: Vec<Detector>,
    pub tap_subsets: Vec<Vec<String>>,
    pub p_values: Vec<f64>,
    pub batch_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            detectors: vec![],
            tap_subsets: vec![vec!["block3".into(), "block4".into()]],
            p_values: vec![2.0],
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub taps: Vec<String>,
    pub p: Option<f64>,
    pub ood: String,
    pub fpr95: Option<f64>,
    pub auroc: Option<f64>,
    pub gamma: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
    pub error: Option<String>,
}

/// Mean over the OOD sets that scored successfully.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub method: String,
    pub taps: Vec<String>,
    pub p: Option<f64>,
    pub datasets: usize,
    pub fpr95: Option<f64>,
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: BenchmarkConfig,
    pub id: String,
    pub ood: Vec<String>,
    pub cells: Vec<Cell>,
    pub averages: Vec<Average>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn cell(&self, method: &str, taps: &[&str], p: Option<f64>, ood: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.taps == taps && c.p == p && c.ood == ood)
    }

    pub fn average(&self, method: &str, taps: &[&str], p: Option<f64>) -> Option<&Average> {
        self.averages.iter().find(|a| a.method == method && a.taps == taps && a.p == p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkOutput {
    pub report: Report,
    /// Every score set that was computed, ID sets included.
    pub scores: Vec<ScoreSet>,
}

impl BenchmarkOutput {
    /// Writes `report.json` and one CSV per score set into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.report.write(dir.join("report.json"))?;
        for (i, set) in self.scores.iter().enumerate() {
            let Some(first) = set.records.first() else { continue };
            let name = format!("{i:03}_{}_{}.csv", first.method.replace(['/', ' ', '+', '='], "_"), first.dataset);
            set.write(dir.join(name))?;
        }
        Ok(())
    }
}

struct Row {
    label: String,
    taps: Vec<String>,
    p: Option<f64>,
    id: Result<Vec<f64>, String>,
    ood: Vec<Result<Vec<f64>, String>>,
}

pub fn run_benchmark(model: &Model, id: &SampleBatch, oods: &[SampleBatch], cfg: &BenchmarkConfig) -> BenchmarkOutput {
    let mut rows = Vec::new();
    for det in &cfg.detectors {
        match det {
            Detector::Gaia(base) => {
                for subset in &cfg.tap_subsets {
                    let mut sc = base.clone();
                    sc.taps = subset.clone();
                    let stats = |b: &SampleBatch| -> Result<Vec<ChannelStats>, String> {
                        detector::channel_stats(model, &b.images, &sc, cfg.batch_size).map_err(|e| e.to_string())
                    };
                    let id_stats = stats(id);
                    let ood_stats: Vec<_> = oods.iter().map(stats).collect();
                    for &p in &cfg.p_values {
                        let norm = |s: &Result<Vec<ChannelStats>, String>| -> Result<Vec<f64>, String> {
                            let s = s.as_ref().map_err(Clone::clone)?;
                            s.iter().map(|c| c.matrix().map(|m| m.pnorm(p)).map_err(|e| e.to_string())).collect()
                        };
                        let mut sc_p = sc.clone();
                        sc_p.p = p;
                        let id_scores = sc_p.validate().map_err(|e| e.to_string()).and_then(|_| norm(&id_stats));
                        rows.push(Row {
                            label: det.label(),
                            taps: subset.clone(),
                            p: Some(p),
                            id: id_scores,
                            ood: ood_stats.iter().map(norm).collect(),
                        });
                    }
                }
            }
            other => {
                let run = |b: &SampleBatch| {
                    detector::score_images(model, &b.images, other, cfg.batch_size).map_err(|e| e.to_string())
                };
                rows.push(Row { label: other.label(), taps: vec![], p: None, id: run(id), ood: oods.iter().map(run).collect() });
            }
        }
    }

    let mut cells = Vec::new();
    let mut averages = Vec::new();
    let mut scores = Vec::new();
    for row in rows {
        let tag = score_tag(&row);
        if let Ok(s) = &row.id {
            scores.push(ScoreSet::from_scores(s, Origin::Id, &id.source, &tag));
        }
        let (mut fsum, mut asum, mut ok) = (0.0, 0.0, 0usize);
        for (ood, res) in oods.iter().zip(&row.ood) {
            if let Ok(s) = res {
                scores.push(ScoreSet::from_scores(s, Origin::Ood, &ood.source, &tag));
            }
            let outcome = match (&row.id, res) {
                (Err(e), _) => Err(format!("{}: {e}", id.source)),
                (_, Err(e)) => Err(format!("{}: {e}", ood.source)),
                (Ok(i), Ok(o)) => metrics::evaluate(i, o).map_err(|e| e.to_string()),
            };
            let mut cell = Cell {
                method: row.label.clone(),
                taps: row.taps.clone(),
                p: row.p,
                ood: ood.source.clone(),
                fpr95: None,
                auroc: None,
                gamma: None,
                n_id: id.len(),
                n_ood: ood.len(),
                error: None,
            };
            match outcome {
                Ok(m) => {
                    fsum += m.fpr95;
                    asum += m.auroc;
                    ok += 1;
                    cell.fpr95 = Some(m.fpr95);
                    cell.auroc = Some(m.auroc);
                    cell.gamma = Some(m.gamma);
                }
                Err(e) => cell.error = Some(e),
            }
            cells.push(cell);
        }
        averages.push(Average {
            method: row.label,
            taps: row.taps,
            p: row.p,
            datasets: ok,
            fpr95: (ok > 0).then(|| fsum / ok as f64),
            auroc: (ok > 0).then(|| asum / ok as f64),
        });
    }

    BenchmarkOutput {
        report: Report { config: cfg.clone(), id: id.source.clone(), ood: oods.iter().map(|o| o.source.clone()).collect(), cells, averages },
        scores,
    }
}

fn score_tag(row: &Row) -> String {
    match row.p {
        Some(p) => format!("{}[{}]p={p}", row.label, row.taps.join("+")),
        None => row.label.clone(),
    }
}

/// One row of a score-file evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub ood: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub gamma: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub id: String,
    /// One row per OOD set, then an `average` row.
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Metrics of each OOD score set against the ID set, plus their average.
pub fn evaluate_score_sets(id: &ScoreSet, oods: &[ScoreSet]) -> Result<EvalReport> {
    if oods.is_empty() {
        return Err(Error::config("at least one OOD score set is required"));
    }
    let method = id.records.first().map(|r| r.method.clone()).unwrap_or_default();
    if let Some(r) = id.records.iter().find(|r| r.origin != Origin::Id) {
        return Err(Error::config(format!("ID score set contains sample {} with origin '{}'", r.sample_id, r.origin)));
    }
    for set in oods {
        if let Some(r) = set.records.iter().find(|r| r.origin != Origin::Ood) {
            return Err(Error::config(format!("OOD score set contains sample {} with origin '{}'", r.sample_id, r.origin)));
        }
    }
    if let Some(r) = oods.iter().flat_map(|s| &s.records).chain(&id.records).find(|r| r.method != method) {
        return Err(Error::config(format!("score sets mix methods '{method}' and '{}'", r.method)));
    }
    let id_scores = id.scores();
    let mut rows = Vec::with_capacity(oods.len() + 1);
    for set in oods {
        let m = metrics::evaluate(&id_scores, &set.scores())?;
        rows.push(EvalRow {
            ood: set.records[0].dataset.clone(),
            fpr95: m.fpr95,
            auroc: m.auroc,
            gamma: Some(m.gamma),
            n_id: m.n_id,
            n_ood: m.n_ood,
        });
    }
    let k = rows.len() as f64;
    rows.push(EvalRow {
        ood: "average".into(),
        fpr95: rows.iter().map(|r| r.fpr95).sum::<f64>() / k,
        auroc: rows.iter().map(|r| r.auroc).sum::<f64>() / k,
        gamma: None,
        n_id: id_scores.len(),
        n_ood: rows.iter().map(|r| r.n_ood).sum(),
    });
    Ok(EvalReport { method, id: id.records.first().map(|r| r.dataset.clone()).unwrap_or_default(), rows })
}
