mod common;

use common::{fixture_data, fixture_model, rng, uniform, Toy, S};
use gaia::gaia::{score_images, Fusion, ScorerConfig};
use gaia::{Archive, Model, ModelGraph, Tensor};

fn images(x: &[f64], n: usize) -> Tensor {
    Tensor::from_f64(&[n, 1, S, S], x).unwrap()
}

#[test]
fn gaia_z_matches_loop_oracle() {
    let mut r = rng(11);
    for trial in 0..20 {
        let toy = Toy::random(&mut r, 3);
        let model = toy.model();
        let x = uniform(&mut r, 2 * S * S, -1.0, 1.0);
        let x32: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
        let got = score_images(&model, &images(&x, 2), &ScorerConfig::gaia_z(["a1", "a2"])).unwrap();
        let exact = toy.rounded();
        for n in 0..2 {
            let want = exact.gaia_z(&x32[n * S * S..(n + 1) * S * S]);
            assert!((got[n].score - want).abs() < 1e-12, "trial {trial}: {} vs {want}", got[n].score);
        }
    }
}

#[test]
fn gaia_a_matches_loop_oracle() {
    let mut r = rng(12);
    for trial in 0..20 {
        let toy = Toy::random(&mut r, 4);
        let model = toy.model();
        let x = uniform(&mut r, 3 * S * S, -1.0, 1.0);
        let x32: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
        let got = score_images(&model, &images(&x, 3), &ScorerConfig::gaia_a(["block1", "block2"])).unwrap();
        let exact = toy.rounded();
        for n in 0..3 {
            let want = exact.gaia_a(&x32[n * S * S..(n + 1) * S * S]);
            assert!((got[n].score - want).abs() <= 1e-5 * want.abs().max(1e-6), "trial {trial}: {} vs {want}", got[n].score);
        }
    }
}

fn remap(weights: &Archive, f: impl Fn(&str, &Tensor) -> Tensor) -> Archive {
    let mut a = Archive::new();
    for (n, _) in weights.iter() {
        a.insert_f32(n, f(n, weights.f32(n).unwrap()));
    }
    a
}

fn toy_archive(toy: &Toy) -> Archive {
    let t = |shape: &[usize], v: &[f64]| Tensor::<f32>::from_f64(shape, v).unwrap();
    let mut a = Archive::new();
    a.insert_f32("w1", t(&[toy.c1, 1, 3, 3], &toy.w1));
    a.insert_f32("b1", t(&[toy.c1], &toy.b1));
    a.insert_f32("w2", t(&[toy.c2, toy.c1, 3, 3], &toy.w2));
    a.insert_f32("b2", t(&[toy.c2], &toy.b2));
    a.insert_f32("v", t(&[toy.k, toy.c2], &toy.v));
    a.insert_f32("c", t(&[toy.k], &toy.c));
    a
}

#[test]
fn zero_classifier_scores_zero() {
    let mut r = rng(13);
    let toy = Toy::random(&mut r, 3);
    let a = remap(&toy_archive(&toy), |n, t| if n == "v" { t.map(|_| 0.0) } else { t.clone() });
    let model = Model::new(ModelGraph::parse(&toy.document()).unwrap(), &a).unwrap();
    let x = uniform(&mut r, 4 * S * S, -1.0, 1.0);
    for s in score_images(&model, &images(&x, 4), &ScorerConfig::gaia_z(["a1", "a2"])).unwrap() {
        assert_eq!(s.score, 0.0);
    }
}

#[test]
fn zero_inner_gradient_scores_zero() {
    let mut r = rng(14);
    let toy = Toy::random(&mut r, 3);
    // Every z2 is negative, so A_last and the inner component are dead.
    let a = remap(&toy_archive(&toy), |n, t| match n {
        "w2" => t.map(|_| 0.0),
        "b2" => t.map(|_| -1.0),
        _ => t.clone(),
    });
    let dead = Model::new(ModelGraph::parse(&toy.document()).unwrap(), &a).unwrap();
    let x = uniform(&mut r, 2 * S * S, -1.0, 1.0);
    for s in score_images(&dead, &images(&x, 2), &ScorerConfig::gaia_a(["a1", "a2"])).unwrap() {
        assert_eq!(s.score, 0.0);
    }
}

#[test]
fn output_only_single_class_is_zero() {
    let doc = "input 1 2 2\nclasses 1\nz: conv2d out=2 kernel=1 weight=w bias=b\nh: relu\ngap: global_avg_pool\nfc: linear out=1 weight=v\ntap t z b1\nsplit h\n";
    let mut a = Archive::new();
    a.insert_f32("w", Tensor::new(vec![2, 1, 1, 1], vec![1.0, -0.5]).unwrap());
    a.insert_f32("b", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
    a.insert_f32("v", Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
    let model = Model::new(ModelGraph::parse(doc).unwrap(), &a).unwrap();
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let s = score_images(&model, &x, &ScorerConfig::gaia_a(["t"]).with_fusion(Fusion::OutputOnly)).unwrap();
    assert_eq!(s[0].score, 0.0);
    assert!(s[0].output_degenerate);
    // Two-stage on the same model: the floor keeps the score finite and flags it.
    let s = score_images(&model, &x, &ScorerConfig::gaia_a(["t"])).unwrap();
    assert!(s[0].score.is_finite() && s[0].output_degenerate);
}

#[test]
fn fusion_variants_use_their_statistic() {
    let mut r = rng(15);
    let toy = Toy::random(&mut r, 3);
    let model = toy.model();
    let x = uniform(&mut r, S * S, -1.0, 1.0);
    let x32: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
    let exact = toy.rounded();
    let p = exact.forward(&x32);

    // inner_only: mean |g| of the all-ones inner component.
    let (g1, g2) = exact.backward_from_alast(&p, &vec![1.0; toy.c2 * S * S]);
    let norm = |gs: [(&Vec<f64>, usize); 2]| {
        let mut sq = 0.0;
        for (g, ch) in gs {
            for k in 0..ch {
                let m = (0..S * S).map(|i| g[k * S * S + i].abs()).sum::<f64>() / (S * S) as f64;
                sq += m * m;
            }
        }
        sq.sqrt()
    };
    let want = norm([(&g1, toy.c1), (&g2, toy.c2)]);
    let got = score_images(&model, &images(&x, 1), &ScorerConfig::gaia_a(["a1", "a2"]).with_fusion(Fusion::InnerOnly)).unwrap();
    assert!((got[0].score - want).abs() <= 1e-5 * want);

    // top1_label: predicted-class seed end to end.
    let top = (0..toy.k).fold(0, |b, c| if p.logits[c] > p.logits[b] { c } else { b });
    let mut e = vec![0.0; toy.k];
    e[top] = 1.0;
    let (g1, g2) = exact.backward_from_alast(&p, &exact.head_backward(&e));
    let want = norm([(&g1, toy.c1), (&g2, toy.c2)]);
    let got = score_images(&model, &images(&x, 1), &ScorerConfig::gaia_a(["a1", "a2"]).with_fusion(Fusion::Top1Label)).unwrap();
    assert!((got[0].score - want).abs() <= 1e-5 * want.max(1e-9));
}

#[test]
fn empty_taps_rejected() {
    let model = fixture_model();
    let data = fixture_data("id_test.gwta").slice(0..2).unwrap();
    let err = score_images(&model, &data.images, &ScorerConfig::gaia_z(Vec::<String>::new())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn logit_scaling_keeps_gaia_z() {
    let model = fixture_model();
    let data = fixture_data("ood_texture.gwta").slice(0..16).unwrap();
    let weights = Archive::read(common::fixture("weights.gwta")).unwrap();
    let scaled = remap(&weights, |n, t| if n.starts_with("fc.") { t.map(|v| v * 4.0) } else { t.clone() });
    let scaled = Model::new(model.graph().clone(), &scaled).unwrap();
    let cfg = ScorerConfig::gaia_z(["block1", "block2", "block3", "block4"]);
    let a = score_images(&model, &data.images, &cfg).unwrap();
    let b = score_images(&scaled, &data.images, &cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.score, y.score);
    }
}
