//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{fixture_data, fixture_model, rng, uniform};
use gaia::benchmark::{run_benchmark, BenchmarkConfig};
use gaia::detector::{self, Detector};
use gaia::gaia::{
    channel_avg_expectation, channel_stats, fused_logsoftmax_seed, matrix_pnorm, score_images, zero_deflation_expectation,
    AbnormalityMatrix, ScorerConfig,
};
use gaia::gradcheck::{self, GradcheckConfig};
use gaia::metrics::{compute_auroc, compute_fpr95};
use gaia::{Archive, Model, ModelGraph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(&GradcheckConfig::default()).expect("gradcheck runs");
    let took = start.elapsed();
    outcome(
        report.passed() && report.graphs >= 20 && took < Duration::from_secs(60),
        format!(
            "{} graphs, {} elements, {} mismatches, max rel err {:.2e}, {:.1}s",
            report.graphs,
            report.checked,
            report.mismatches.len(),
            report.max_rel_error,
            took.as_secs_f64()
        ),
    )
}

fn masked_channel_zero() -> Outcome {
    let mut r = rng(101);
    let mut failures = 0;
    let mut checked = 0;
    for _ in 0..50 {
        let c = r.random_range(2..=6);
        let size = r.random_range(3..=7);
        let classes = r.random_range(2..=5);
        let mut zeroed: Vec<usize> = (0..c).collect();
        zeroed.shuffle(&mut r);
        zeroed.truncate(r.random_range(1..c));
        zeroed.sort();
        let list: Vec<String> = zeroed.iter().map(|z| z.to_string()).collect();
        let doc = format!(
            "input 2 {size} {size}\nclasses {classes}\n\
             a: conv2d out={c} kernel=3 pad=1 weight=a.w bias=a.b\n\
             abn: batchnorm gamma=g beta=be mean=mu var=va\n\
             m: channel_mask zero={}\n\
             ar: relu\n\
             b: conv2d out={c} kernel=3 pad=1 weight=b.w bias=b.b\n\
             s: add in=b,ar\n\
             sr: relu\n\
             gap: global_avg_pool\n\
             fc: linear out={classes} weight=fc.w bias=fc.b\n\
             tap t abn blk\nsplit sr\n",
            list.join(",")
        );
        let graph = ModelGraph::parse(&doc).unwrap();
        let normal = Normal::new(0.0, 0.7).unwrap();
        let mut weights = Archive::new();
        for (name, shape) in graph.weight_specs() {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = if name == "va" || name == "g" {
                uniform(&mut r, n, 0.5, 1.5)
            } else {
                (0..n).map(|_| normal.sample(&mut r)).collect()
            };
            weights.insert_f32(name, Tensor::from_f64(&shape, &v).unwrap());
        }
        let model = Model::new(graph, &weights).unwrap();
        let batch = 2;
        let x = Tensor::from_f64(&[batch, 2, size, size], &uniform(&mut r, batch * 2 * size * size, -2.0, 2.0)).unwrap();
        let seed = Tensor::from_f64(&[batch, classes], &uniform(&mut r, batch * classes, -1.0, 1.0)).unwrap();
        let grads = model.record(&x, &["t"]).unwrap().backward(&seed).unwrap();
        let g = grads.get("t").unwrap();
        for n in 0..batch {
            for &k in &zeroed {
                checked += 1;
                if g.plane(n, k).iter().any(|v| v.to_bits() != 0) {
                    failures += 1;
                }
            }
        }
        // The scorers see the same zero rows.
        for cfg in [ScorerConfig::gaia_z(["t"]), ScorerConfig::gaia_a(["t"])] {
            for s in channel_stats(&model, &x, &cfg).unwrap() {
                let row = &s.rows[0].1;
                if zeroed.iter().any(|&k| row[k].to_bits() != 0) {
                    failures += 1;
                }
            }
        }
    }
    outcome(failures == 0, format!("50 trials, {checked} masked channel maps, {failures} non-zero"))
}

fn fusion_seed() -> Outcome {
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = r.random_range(2..=10);
        let l = uniform(&mut r, c, -10.0, 10.0);
        let t = Tensor::<f32>::from_f64(&[1, c], &l).unwrap();
        let seed = fused_logsoftmax_seed(&t).unwrap();
        let l32: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
        let z: f64 = l32.iter().map(|v| v.exp()).sum();
        for (j, &s) in seed.data().iter().enumerate() {
            worst = worst.max((f64::from(s) - (1.0 - c as f64 * l32[j].exp() / z)).abs());
        }
        worst = worst.max(seed.data().iter().map(|&v| f64::from(v)).sum::<f64>().abs());
    }
    outcome(worst < 1e-5, format!("100 vectors, max deviation {worst:.2e}"))
}

fn zero_deflation_oracle() -> Outcome {
    let mut r = rng(103);
    let mut mismatches = 0;
    for i in 0..1000 {
        let tau = if i % 2 == 0 { 0.0f32 } else { 1e-6 };
        let (h, w) = (r.random_range(1..=9), r.random_range(1..=9));
        let map: Vec<f32> = (0..h * w)
            .map(|_| match r.random_range(0..4) {
                0 => 0.0,
                1 => r.random_range(-2e-6f32..2e-6),
                2 => if r.random_bool(0.5) { 1e-6 } else { -1e-6 },
                _ => r.random_range(-1.0f32..1.0),
            })
            .collect();
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                if map[y * w + x].abs() > tau {
                    count += 1;
                }
            }
        }
        if zero_deflation_expectation(&map, tau) != count as f64 / (h * w) as f64 {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 maps, tau in {{0, 1e-6}}, {mismatches} mismatches"))
}

fn average_and_norm_oracles() -> Outcome {
    let mut r = rng(104);
    let mut worst_avg: f64 = 0.0;
    for _ in 0..500 {
        let n = r.random_range(1..=49);
        let m = r.random_range(1..=16);
        let inner: Vec<f32> = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let output: Vec<f32> = (0..m).map(|_| r.random_range(-1e-2f32..1e-2)).collect();
        let mut si = 0.0;
        for v in &inner {
            si += f64::from(v.abs());
        }
        let mut so = 0.0;
        for v in &output {
            so += f64::from(v.abs());
        }
        let want = (si / n as f64) / (so / m as f64).max(1e-12).sqrt();
        let got = channel_avg_expectation(&inner, &output, 1e-12).value;
        worst_avg = worst_avg.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
    }
    let mut worst_norm: f64 = 0.0;
    let mut padding_ok = true;
    for _ in 0..500 {
        let rows: Vec<Vec<f64>> =
            (0..r.random_range(1..=5))
            .map(|_| {
                let n = r.random_range(1..=8);
                uniform(&mut r, n, 0.0, 1.0)
            })
            .collect();
        let m = AbnormalityMatrix::from_rows(&rows).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        for p in [1.0, 2.0, 4.0] {
            let want = flat.iter().map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p);
            worst_norm = worst_norm.max((matrix_pnorm(&m, p) - want).abs() / want);
            let mut wider = rows.clone();
            wider.push(vec![0.0; 12]);
            padding_ok &= matrix_pnorm(&AbnormalityMatrix::from_rows(&wider).unwrap(), p) == matrix_pnorm(&m, p);
        }
    }
    outcome(
        worst_avg < 1e-6 && worst_norm < 1e-6 && padding_ok,
        format!("channel average rel err {worst_avg:.2e}, p-norm rel err {worst_norm:.2e}, padding exact {padding_ok}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut r = rng(105);
    let mut bad = 0;
    for _ in 0..200 {
        let id: Vec<f64> = (0..r.random_range(1..=100)).map(|_| f64::from(r.random_range(0..15))).collect();
        let ood: Vec<f64> = (0..r.random_range(1..=100)).map(|_| f64::from(r.random_range(3..20))).collect();
        let mut pairs = 0.0;
        for o in &ood {
            for i in &id {
                if o > i {
                    pairs += 1.0;
                } else if o == i {
                    pairs += 0.5;
                }
            }
        }
        if compute_auroc(&id, &ood).unwrap() != pairs / (id.len() * ood.len()) as f64 {
            bad += 1;
        }
        // Smallest ID score with at least 95% of ID scores at or below it.
        let gamma = id
            .iter()
            .copied()
            .filter(|&g| 100 * id.iter().filter(|&&v| v <= g).count() >= 95 * id.len())
            .fold(f64::INFINITY, f64::min);
        let fpr = ood.iter().filter(|&&o| o <= gamma).count() as f64 / ood.len() as f64;
        if compute_fpr95(&id, &ood).unwrap() != (fpr, gamma) {
            bad += 1;
        }
    }
    let id: Vec<f64> = (1..=100).map(f64::from).collect();
    let examples = compute_fpr95(&id, &[90.0, 96.0]).unwrap() == (0.5, 95.0)
        && compute_fpr95(&id, &id).unwrap().0 == 0.95
        && compute_auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap() == 1.0
        && compute_auroc(&id, &id).unwrap() == 0.5;
    outcome(bad == 0 && examples, format!("200 score sets, {bad} disagreements, worked examples {examples}"))
}

fn batch_single(model: &Model) -> Outcome {
    let data = fixture_data("id_test.gwta").slice(0..32).unwrap();
    let noise = fixture_data("ood_noise.gwta").slice(0..32).unwrap();
    let images = Tensor::concat_rows(&[data.images, noise.images]).unwrap();
    let mut diffs = 0;
    for cfg in [ScorerConfig::gaia_z(["block3", "block4"]), ScorerConfig::gaia_a(["block3", "block4"])] {
        let batched = score_images(model, &images, &cfg).unwrap();
        let det = Detector::Gaia(cfg);
        let single = detector::score_images(model, &images, &det, 1).unwrap();
        diffs += batched.iter().zip(&single).filter(|(a, b)| a.score.to_bits() != b.to_bits()).count();
    }
    outcome(diffs == 0, format!("64 samples x 2 methods, {diffs} differing bits"))
}

fn separation(model: &Model) -> Outcome {
    let start = Instant::now();
    let id = fixture_data("id_test.gwta");
    let noise = fixture_data("ood_noise.gwta");
    let auroc = |cfg: ScorerConfig| {
        let det = Detector::Gaia(cfg);
        let a = detector::score_images(model, &id.images, &det, 32).unwrap();
        let b = detector::score_images(model, &noise.images, &det, 32).unwrap();
        compute_auroc(&a, &b).unwrap()
    };
    let z = auroc(ScorerConfig::gaia_z(["block3", "block4"]));
    let a = auroc(ScorerConfig::gaia_a(["block3", "block4"]));
    let took = start.elapsed();
    outcome(
        z >= 0.80 && a >= 0.70 && took < Duration::from_secs(120),
        format!("GAIA-Z AUROC {z:.4} (>= 0.80), GAIA-A AUROC {a:.4} (>= 0.70), {:.1}s", took.as_secs_f64()),
    )
}

fn ablation(model: &Model) -> Outcome {
    let id = fixture_data("id_test.gwta");
    let oods = [fixture_data("ood_noise.gwta"), fixture_data("ood_texture.gwta")];
    let subsets: Vec<Vec<String>> = [vec!["block1"], vec!["block4"], vec!["block3", "block4"], vec!["block1", "block2", "block3", "block4"]]
        .iter()
        .map(|s| s.iter().map(|t| t.to_string()).collect())
        .collect();
    let cfg = BenchmarkConfig {
        detectors: vec![Detector::Gaia(ScorerConfig::gaia_z(["block1"])), Detector::Gaia(ScorerConfig::gaia_a(["block1"]))],
        tap_subsets: subsets.clone(),
        p_values: vec![2.0],
        batch_size: 32,
    };
    let report = run_benchmark(model, &id, &oods, &cfg).report;
    let mut ok = true;
    let mut parts = Vec::new();
    for method in ["gaia-z", "gaia-a"] {
        let avg = |s: &[String]| {
            let taps: Vec<&str> = s.iter().map(String::as_str).collect();
            report.average(method, &taps, Some(2.0)).and_then(|a| a.auroc).unwrap_or(f64::NAN)
        };
        let shallow = avg(&subsets[0]);
        let deep: Vec<f64> = subsets[1..].iter().map(|s| avg(s)).collect();
        ok &= deep.iter().all(|&d| d >= shallow);
        let per_set: Vec<String> = oods
            .iter()
            .map(|o| {
                let cells: Vec<String> = subsets
                    .iter()
                    .map(|s| {
                        let taps: Vec<&str> = s.iter().map(String::as_str).collect();
                        let a = report.cell(method, &taps, Some(2.0), &o.source).and_then(|c| c.auroc).unwrap_or(f64::NAN);
                        format!("{a:.4}")
                    })
                    .collect();
                format!("{} {}", o.source, cells.join("/"))
            })
            .collect();
        parts.push(format!(
            "{method} mean AUROC block1 {shallow:.4} vs block4/3+4/all {} ({})",
            deep.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>().join("/"),
            per_set.join(", ")
        ));
    }
    outcome(ok, parts.join("; "))
}

fn main() {
    let model = fixture_model();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient oracle (finite differences, random graphs)", Box::new(gradient_oracle)),
        ("masked channel has bitwise-zero tap gradient", Box::new(masked_channel_zero)),
        ("fused log-softmax seed identity", Box::new(fusion_seed)),
        ("zero-deflation expectation counting oracle", Box::new(zero_deflation_oracle)),
        ("channel-average and p-norm oracles", Box::new(average_and_norm_oracles)),
        ("AUROC and FPR95 oracles", Box::new(metric_oracles)),
        ("batch/single equivalence on fixture", Box::new(|| batch_single(&model))),
        ("fixture separation ID vs uniform noise", Box::new(|| separation(&model))),
        ("block ablation direction", Box::new(|| ablation(&model))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
