//! Command-line front end. Every flag can also come from a `GAIA_*`
//! environment variable; an explicit flag wins.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 data error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::archive::{Archive, Entry, SampleBatch, MAGIC};
use crate::benchmark::{evaluate_score_sets, run_benchmark, BenchmarkConfig};
use crate::detector::{self, Detector};
use crate::error::{Error, Result};
use crate::gaia::{Fusion, Method, ScorerConfig};
use crate::gradcheck::{self, GradcheckConfig};
use crate::graph::{ModelGraph, Source};
use crate::model::Model;
use crate::scores::{Origin, ScoreSet};
use crate::tape::OpKind;

#[derive(Parser, Debug)]
#[command(name = "gaia", version, about = "Post-hoc OOD detection from attribution-gradient abnormality")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Score a dataset archive and write a CSV score file.
    Score(ScoreArgs),
    /// Compute FPR95 and AUROC from score files.
    Eval(EvalArgs),
    /// Evaluate a grid of methods, tap subsets and norm orders.
    Sweep(SweepArgs),
    /// Check tap gradients against finite differences on random graphs.
    Gradcheck(GradcheckArgs),
    /// List the contents of an archive or graph document.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    GaiaZ,
    GaiaA,
    Msp,
    Energy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    TwoStage,
    Top1Label,
    OutputOnly,
    InnerOnly,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::TwoStage => Fusion::TwoStage,
            FusionArg::Top1Label => Fusion::Top1Label,
            FusionArg::OutputOnly => Fusion::OutputOnly,
            FusionArg::InnerOnly => Fusion::InnerOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OriginArg {
    Id,
    Ood,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Graph document.
    #[arg(long, env = "GAIA_MODEL")]
    pub model: PathBuf,
    /// Weight archive.
    #[arg(long, env = "GAIA_WEIGHTS")]
    pub weights: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset archive.
    #[arg(long, env = "GAIA_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, env = "GAIA_METHOD")]
    pub method: MethodArg,
    /// Tap ids or block labels.
    #[arg(long, value_delimiter = ',', default_value = "block3,block4", env = "GAIA_TAPS")]
    pub taps: Vec<String>,
    #[arg(long, default_value_t = 0.0, env = "GAIA_TAU")]
    pub tau: f32,
    #[arg(long, default_value_t = 2.0, env = "GAIA_P")]
    pub p: f64,
    /// GAIA-A only.
    #[arg(long, value_enum, env = "GAIA_FUSION")]
    pub fusion: Option<FusionArg>,
    #[arg(long, env = "GAIA_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32, env = "GAIA_BATCH_SIZE")]
    pub batch_size: usize,
    /// Origin column of the score file.
    #[arg(long, value_enum, default_value = "id", env = "GAIA_ORIGIN")]
    pub origin: OriginArg,
    /// Dataset column; defaults to the data file stem.
    #[arg(long, env = "GAIA_DATASET")]
    pub dataset: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0, env = "GAIA_THREADS")]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// ID score file.
    #[arg(long, env = "GAIA_ID")]
    pub id: PathBuf,
    /// OOD score files.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',', env = "GAIA_OOD")]
    pub ood: Vec<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long, env = "GAIA_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "GAIA_ID")]
    pub id: PathBuf,
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',', env = "GAIA_OOD")]
    pub ood: Vec<PathBuf>,
    #[arg(long, value_enum, num_args = 1.., value_delimiter = ',', default_value = "gaia-z,gaia-a,msp,energy", env = "GAIA_METHODS")]
    pub methods: Vec<MethodArg>,
    /// Tap subsets separated by ';', taps within a subset by ','.
    #[arg(long, default_value = "block3,block4", env = "GAIA_TAP_SUBSETS")]
    pub tap_subsets: String,
    #[arg(long, value_delimiter = ',', default_value = "2", env = "GAIA_P_VALUES")]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 0.0, env = "GAIA_TAU")]
    pub tau: f32,
    #[arg(long, value_enum, env = "GAIA_FUSION")]
    pub fusion: Option<FusionArg>,
    #[arg(long, default_value_t = 32, env = "GAIA_BATCH_SIZE")]
    pub batch_size: usize,
    /// Output directory for report.json and score files.
    #[arg(long, env = "GAIA_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0, env = "GAIA_THREADS")]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0, env = "GAIA_SEED")]
    pub seed: u64,
    /// Number of random graphs.
    #[arg(long, default_value_t = 20, env = "GAIA_TRIALS")]
    pub trials: usize,
    /// Elements checked per graph.
    #[arg(long, default_value_t = 20, env = "GAIA_ELEMENTS")]
    pub elements: usize,
    #[arg(long, hide = true, env = "GAIA_INJECT_FAULT")]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, env = "GAIA_FILE")]
    pub file: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "gaia: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Score(a) => with_threads(a.threads, out, |buf| cmd_score(&a, buf)),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Sweep(a) => with_threads(a.threads, out, |buf| cmd_sweep(&a, buf)),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    }
}

/// Runs `f` on a bounded worker pool; its output is buffered and written
/// afterwards by this thread.
fn with_threads(threads: usize, out: &mut dyn Write, f: impl FnOnce(&mut Vec<u8>) -> Result<i32> + Send) -> Result<i32> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let mut buf = Vec::new();
    let result = pool.install(|| f(&mut buf));
    out.write_all(&buf)?;
    result
}

fn detector_for(method: MethodArg, taps: Vec<String>, tau: f32, p: f64, fusion: Option<FusionArg>) -> Result<Detector> {
    let gaia = |m| {
        let mut c = ScorerConfig::new(m, taps.clone());
        c.tau = tau;
        c.p = p;
        c.fusion = fusion.map_or(Fusion::TwoStage, Fusion::from);
        c.validate()?;
        Ok(Detector::Gaia(c))
    };
    match method {
        MethodArg::GaiaZ => gaia(Method::GaiaZ),
        MethodArg::GaiaA => gaia(Method::GaiaA),
        MethodArg::Msp | MethodArg::Energy if fusion.is_some() => {
            Err(Error::config("--fusion applies to gaia-a only"))
        }
        MethodArg::Msp => Ok(Detector::Msp),
        MethodArg::Energy => Ok(Detector::Energy),
    }
}

fn load_data(path: &Path, model: &Model) -> Result<SampleBatch> {
    let batch = SampleBatch::read(path)?;
    batch.check_labels(model.graph().classes())?;
    Ok(batch)
}

fn cmd_score(a: &ScoreArgs, out: &mut Vec<u8>) -> Result<i32> {
    let model = Model::from_files(&a.model.model, &a.model.weights)?;
    let det = detector_for(a.method, a.taps.clone(), a.tau, a.p, a.fusion)?;
    if let Detector::Gaia(c) = &det {
        model.graph().select_taps(&c.taps)?;
    }
    let data = load_data(&a.data, &model)?;
    let scores = detector::score_images(&model, &data.images, &det, a.batch_size)?;
    let origin = match a.origin {
        OriginArg::Id => Origin::Id,
        OriginArg::Ood => Origin::Ood,
    };
    let dataset = a.dataset.clone().unwrap_or_else(|| data.source.clone());
    ScoreSet::from_scores(&scores, origin, &dataset, &det.label()).write(&a.out)?;
    writeln!(out, "scored {} samples from {} with {} -> {}", scores.len(), dataset, det, a.out.display())?;
    Ok(0)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let read = |p: &PathBuf| -> Result<ScoreSet> {
        let set = ScoreSet::read(p)?;
        if set.is_empty() {
            return Err(Error::data(format!("{}: score file has no records", p.display())));
        }
        Ok(set)
    };
    let id = read(&a.id)?;
    let oods = a.ood.iter().map(read).collect::<Result<Vec<_>>>()?;
    let report = evaluate_score_sets(&id, &oods)?;
    writeln!(out, "{:<20} {:>8} {:>8}", "ood", "fpr95", "auroc")?;
    for r in &report.rows {
        writeln!(out, "{:<20} {:>8.4} {:>8.4}", r.ood, r.fpr95, r.auroc)?;
    }
    if let Some(path) = &a.out {
        std::fs::write(path, report.to_json() + "\n")?;
    }
    Ok(0)
}

fn cmd_sweep(a: &SweepArgs, out: &mut Vec<u8>) -> Result<i32> {
    let model = Model::from_files(&a.model.model, &a.model.weights)?;
    let subsets: Vec<Vec<String>> = a
        .tap_subsets
        .split(';')
        .map(|s| s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect())
        .collect();
    let mut detectors = Vec::new();
    for &m in &a.methods {
        let fusion = if m == MethodArg::GaiaA { a.fusion } else { None };
        let taps = subsets.first().cloned().unwrap_or_default();
        detectors.push(detector_for(m, taps, a.tau, a.p.first().copied().unwrap_or(2.0), fusion)?);
    }
    let id = load_data(&a.id, &model)?;
    let oods = a.ood.iter().map(|p| load_data(p, &model)).collect::<Result<Vec<_>>>()?;
    let cfg = BenchmarkConfig { detectors, tap_subsets: subsets, p_values: a.p.clone(), batch_size: a.batch_size };
    let result = run_benchmark(&model, &id, &oods, &cfg);
    result.write(&a.out)?;
    writeln!(out, "{:<32} {:<24} {:>5} {:>8} {:>8}", "method", "taps", "p", "fpr95", "auroc")?;
    for avg in &result.report.averages {
        let p = avg.p.map_or("-".to_string(), |p| p.to_string());
        match (avg.fpr95, avg.auroc) {
            (Some(f), Some(r)) => {
                writeln!(out, "{:<32} {:<24} {:>5} {:>8.4} {:>8.4}", avg.method, avg.taps.join("+"), p, f, r)?
            }
            _ => writeln!(out, "{:<32} {:<24} {:>5} failed", avg.method, avg.taps.join("+"), p)?,
        }
    }
    for c in result.report.cells.iter().filter(|c| c.error.is_some()) {
        writeln!(out, "error in {} [{}] on {}: {}", c.method, c.taps.join("+"), c.ood, c.error.as_deref().unwrap_or(""))?;
    }
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let fault = a.inject_fault.as_deref().map(str::parse::<OpKind>).transpose()?;
    let cfg = GradcheckConfig { seed: a.seed, graphs: a.trials, elements_per_graph: a.elements, fault, ..Default::default() };
    let report = gradcheck::run(&cfg)?;
    writeln!(
        out,
        "graphs {} checked {} kinks skipped {} max relative error {:.3e}",
        report.graphs, report.checked, report.skipped_kinks, report.max_rel_error
    )?;
    for m in &report.mismatches {
        writeln!(
            out,
            "mismatch: graph {} tap {} op {} element {}: analytic {:.6e} numeric {:.6e}",
            m.graph, m.tap, m.op, m.index, m.analytic, m.numeric
        )?;
    }
    for g in &report.starved {
        writeln!(out, "graph {g}: too few kink-free elements")?;
    }
    let passed = report.passed();
    writeln!(out, "{}", if passed { "PASS" } else { "FAIL" })?;
    Ok(if passed { 0 } else { 1 })
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<i32> {
    let bytes = std::fs::read(&a.file)?;
    let is_graph = !bytes.starts_with(MAGIC) && a.file.extension().is_some_and(|e| e == "graph");
    if is_graph {
        let text = String::from_utf8(bytes).map_err(|_| Error::data("graph document is not UTF-8"))?;
        let g = ModelGraph::parse(&text)?;
        let [c, h, w] = g.input_shape();
        writeln!(out, "graph: input {c}x{h}x{w}, {} classes, {} layers", g.classes(), g.layers().len())?;
        for (i, layer) in g.layers().iter().enumerate() {
            let ins: Vec<String> = layer
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => "input".to_string(),
                    Source::Layer(j) => g.layers()[*j].name.clone(),
                })
                .collect();
            let mut line = format!("{i:>3} {:<16} {:<16} <- {:<24} {:?}", layer.name, layer.op.kind(), ins.join(","), g.layer_shape(i));
            for t in g.taps().iter().filter(|t| t.layer == i) {
                line += &format!("  [tap {} block {}]", t.id, t.block);
            }
            if i == g.split() {
                line += "  [split]";
            }
            writeln!(out, "{}", line.trim_end())?;
        }
    } else {
        let archive = Archive::from_bytes(&bytes)?;
        writeln!(out, "archive: {} tensors", archive.len())?;
        for (name, entry) in archive.iter() {
            let dims: Vec<String> = entry.shape().iter().map(|d| d.to_string()).collect();
            let dtype = match entry {
                Entry::F32(_) => "f32",
                Entry::I32 { .. } => "i32",
            };
            writeln!(out, "{name} {dtype} [{}]", dims.join(", "))?;
        }
    }
    Ok(0)
}
