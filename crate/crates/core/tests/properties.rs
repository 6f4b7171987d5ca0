mod common;

use gaia::baseline::{score_energy, score_msp};
use gaia::gaia::{decide, fused_logsoftmax_seed, matrix_pnorm, zero_deflation_expectation, AbnormalityMatrix, Decision};
use gaia::metrics::{compute_auroc, compute_fpr95};
use gaia::scores::{Origin, ScoreSet};
use gaia::Tensor;
use proptest::prelude::*;

fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-20i32..20).prop_map(f64::from), 1..max)
}

fn logits() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..8).prop_flat_map(|c| (Just(c), prop::collection::vec(-30.0f64..30.0, c)))
}

fn grad_maps() -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(
        (1usize..10).prop_flat_map(|n| prop::collection::vec(prop_oneof![Just(0.0f32), -2.0f32..2.0], n)),
        1..6,
    )
}

fn z_matrix(maps: &[Vec<f32>]) -> AbnormalityMatrix {
    // One row per map, one channel per chunk of 3 entries.
    let rows: Vec<Vec<f64>> =
        maps.iter().map(|m| m.chunks(3).map(|ch| zero_deflation_expectation(ch, 0.0)).collect()).collect();
    AbnormalityMatrix::from_rows(&rows).unwrap()
}

proptest! {
    #[test]
    fn auroc_antisymmetric(id in scores(40), ood in scores(40)) {
        let a = compute_auroc(&id, &ood).unwrap();
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let b = compute_auroc(&neg(&id), &neg(&ood)).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_monotone_invariant(id in scores(40), ood in scores(40)) {
        let f = |v: &[f64]| v.iter().map(|x| 2.0 * x * x * x + x + 5.0).collect::<Vec<_>>();
        prop_assert_eq!(compute_auroc(&id, &ood).unwrap(), compute_auroc(&f(&id), &f(&ood)).unwrap());
        prop_assert_eq!(compute_fpr95(&id, &ood).unwrap().0, compute_fpr95(&f(&id), &f(&ood)).unwrap().0);
    }

    #[test]
    fn fpr95_never_rises_with_clear_ood(id in scores(40), ood in scores(40), extra in 0.5f64..10.0) {
        let (before, gamma) = compute_fpr95(&id, &ood).unwrap();
        let mut more = ood.clone();
        more.push(gamma + extra);
        let (after, _) = compute_fpr95(&id, &more).unwrap();
        prop_assert!(after <= before);
    }

    #[test]
    fn threshold_sweep_reproduces_auroc(id in scores(30), ood in scores(30)) {
        // ROC points from the decision rule at every distinct threshold.
        let mut gammas: Vec<f64> = id.iter().chain(&ood).copied().collect();
        gammas.push(f64::NEG_INFINITY);
        gammas.sort_by(f64::total_cmp);
        gammas.dedup();
        let rate = |v: &[f64], g: f64| v.iter().filter(|&&s| decide(s, g) == Decision::Out).count() as f64 / v.len() as f64;
        let pts: Vec<(f64, f64)> = gammas.iter().rev().map(|&g| (rate(&id, g), rate(&ood, g))).collect();
        let mut area = 0.0;
        let mut prev = (0.0, 0.0);
        for p in pts {
            area += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
            prev = p;
        }
        prop_assert!((area - compute_auroc(&id, &ood).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn persisted_scores_give_same_metrics(id in prop::collection::vec(-1e3f64..1e3, 1..30), ood in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        ScoreSet::from_scores(&id, Origin::Id, "x", "m").to_writer(&mut a).unwrap();
        ScoreSet::from_scores(&ood, Origin::Ood, "y", "m").to_writer(&mut b).unwrap();
        let id2 = ScoreSet::from_reader(&a[..]).unwrap().scores();
        let ood2 = ScoreSet::from_reader(&b[..]).unwrap().scores();
        prop_assert_eq!(compute_auroc(&id, &ood).unwrap(), compute_auroc(&id2, &ood2).unwrap());
        prop_assert_eq!(compute_fpr95(&id, &ood).unwrap(), compute_fpr95(&id2, &ood2).unwrap());
    }

    #[test]
    fn energy_shift((c, l) in logits(), t in -50.0f64..50.0) {
        let base = score_energy(&Tensor::<f64>::new(vec![1, c], l.clone()).unwrap()).unwrap()[0];
        let shifted: Vec<f64> = l.iter().map(|x| x + t).collect();
        let moved = score_energy(&Tensor::<f64>::new(vec![1, c], shifted).unwrap()).unwrap()[0];
        prop_assert!((moved - (base - t)).abs() < 1e-5);
    }

    #[test]
    fn energy_matches_direct_logsumexp((c, l) in logits()) {
        let s = score_energy(&Tensor::<f32>::from_f64(&[1, c], &l).unwrap()).unwrap()[0];
        let l32: Vec<f64> = l.iter().map(|&x| x as f32 as f64).collect();
        let direct = -l32.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((s - direct).abs() < 1e-5);
    }

    #[test]
    fn msp_in_range((c, l) in logits()) {
        let s = score_msp(&Tensor::<f64>::new(vec![1, c], l).unwrap()).unwrap()[0];
        prop_assert!(s >= -1.0 - 1e-12 && s <= -1.0 / c as f64 + 1e-12);
    }

    #[test]
    fn fused_seed_is_derivative((c, l) in logits()) {
        let t = Tensor::<f64>::new(vec![1, c], l.clone()).unwrap();
        let seed = fused_logsoftmax_seed(&t).unwrap();
        let total = |v: &[f64]| {
            let m = v.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            v.iter().map(|x| x - lse).sum::<f64>()
        };
        let h = 1e-5;
        for j in 0..c {
            let mut up = l.clone();
            let mut down = l.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (total(&up) - total(&down)) / (2.0 * h);
            prop_assert!((fd - seed.data()[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn padding_leaves_score_unchanged(rows in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 1..6), 1..5), wide in 1usize..12, p in prop_oneof![Just(1.0), Just(2.0), Just(4.0), 1.0f64..6.0]) {
        let m = AbnormalityMatrix::from_rows(&rows).unwrap();
        let mut padded = rows.clone();
        padded.push(vec![0.0; wide]);
        let m2 = AbnormalityMatrix::from_rows(&padded).unwrap();
        prop_assert_eq!(matrix_pnorm(&m, p), matrix_pnorm(&m2, p));
        for i in 0..m2.rows() {
            for j in m2.row_width(i)..m2.cols() {
                prop_assert_eq!(m2.get(i, j).to_bits(), 0);
            }
        }
    }

    #[test]
    fn gaia_z_bounded(maps in grad_maps()) {
        let m = z_matrix(&maps);
        let channels: usize = maps.iter().map(|v| v.len().div_ceil(3)).sum();
        let s = m.pnorm(2.0);
        prop_assert!(m.entries().iter().all(|&e| (0.0..=1.0).contains(&e)));
        prop_assert!(s >= 0.0 && s <= (channels as f64).sqrt() + 1e-12);
    }

    #[test]
    fn gaia_z_monotone_under_zeroing(maps in grad_maps(), mask in prop::collection::vec(any::<bool>(), 64)) {
        let zeroed: Vec<Vec<f32>> = maps
            .iter()
            .enumerate()
            .map(|(r, m)| m.iter().enumerate().map(|(i, &g)| if mask[(r * 7 + i) % 64] { 0.0 } else { g }).collect())
            .collect();
        prop_assert!(z_matrix(&zeroed).pnorm(2.0) <= z_matrix(&maps).pnorm(2.0));
    }
}

mod fixture {
    use super::common::{fixture_data, fixture_model};
    use gaia::gaia::{score_images, ScorerConfig};
    use gaia::Tensor;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn batch_permutation(perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(), z in any::<bool>()) {
            let model = fixture_model();
            let data = fixture_data("ood_texture.gwta").slice(0..12).unwrap();
            let rows: Vec<Tensor> = perm.iter().map(|&i| data.images.rows(i..i + 1).unwrap()).collect();
            let shuffled = Tensor::concat_rows(&rows).unwrap();
            let cfg = if z { ScorerConfig::gaia_z(["block3", "block4"]) } else { ScorerConfig::gaia_a(["block3", "block4"]) };
            let a = score_images(&model, &data.images, &cfg).unwrap();
            let b = score_images(&model, &shuffled, &cfg).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a[i].score.to_bits(), b[k].score.to_bits());
            }
        }
    }
}
