mod common;

use common::{oracle_eer, oracle_tar, random_scores};
use pocvit::data_synth::{build_dataset, DatasetSpec, Perturbation, Split};
use pocvit::evaluation::*;
use pocvit::model::{ModelConfig, PocVit};
use pocvit::training::load_samples;
use pocvit::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn templates_are_normalized_means() {
    let feats = vec![vec![3.0, 4.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0], vec![2.0, 2.0]];
    let labels = vec![0, 1, 1, 2, 2];
    let t = templates_from_features(&feats, &labels).unwrap();
    assert_eq!(t[&0], vec![0.6, 0.8]);
    let h = 0.5f64.sqrt();
    assert!((t[&1][0] - h).abs() < 1e-15 && (t[&1][1] - h).abs() < 1e-15);
    // Duplicated frames give the template of the single frame.
    let single = templates_from_features(&[vec![2.0, 2.0]], &[2]).unwrap();
    assert_eq!(t[&2], single[&2]);
    for v in t.values() {
        assert!((norm(v) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cosine_identity_and_orthogonality() {
    let t = templates_from_features(&[vec![1.0, 2.0, 2.0], vec![0.0, 1.0, -1.0]], &[0, 1]).unwrap();
    let s = score_features(&t, &[vec![2.0, 4.0, 4.0]], &[0]).unwrap();
    assert!((s.genuine[0] - 1.0).abs() < 1e-15);
    assert!(s.impostor[0].abs() < 1e-15);
    assert!(matches!(score_features(&t, &[vec![1.0, 0.0, 0.0]], &[7]), Err(Error::Data(_))));
}

#[test]
fn score_counts_with_a_model() {
    let dir = TempDir::new().unwrap();
    let spec = DatasetSpec {
        n_subjects: 4,
        frames_per_subject: 5,
        seed: 1,
        image_size: 32,
        perturbation: Perturbation::default(),
    };
    let m = build_dataset(&spec, dir.path()).unwrap();
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 8,
        n_blocks: 1,
        n_heads: 2,
        mlp_hidden: None,
        n_classes: 4,
        share_vq_weights: false,
        grouped_heads: false,
        cross_channel_key: false,
        activation: Default::default(),
        standardize_input: true,
        seed: 0,
    };
    let model = PocVit::new(cfg).unwrap();
    let train = load_samples(&m, Split::Train, false).unwrap();
    let test = load_samples(&m, Split::Test, false).unwrap();
    let templates = enroll_templates(&model, &train).unwrap();
    assert_eq!(templates.len(), 4);
    for t in templates.values() {
        assert_eq!(t.len(), 16);
        assert!((norm(t) - 1.0).abs() < 1e-6);
    }
    let s = score_probes(&model, &templates, &test).unwrap();
    assert_eq!(s.genuine.len(), test.len());
    assert_eq!(s.impostor.len(), test.len() * 3);
    for mode in [ScoreMode::Template, ScoreMode::Softmax] {
        let (r, curves) = evaluate(&model, &train, &test, mode).unwrap();
        assert!((0.0..=100.0).contains(&r.eer));
        assert_eq!(r.det_points.len(), curves.len());
    }
}

#[test]
fn identical_distributions_give_fifty_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scores: Vec<f64> = (0..4000).map(|_| rng.gen()).collect();
    let s = ScoreSet {
        genuine: scores.clone(),
        impostor: scores,
    };
    let c = far_frr_curves(&s, DEFAULT_THRESHOLDS).unwrap();
    let e = compute_eer(&c).unwrap();
    assert!((e.eer - 50.0).abs() < 0.1, "{}", e.eer);
    assert!((e.eer - oracle_eer(&s)).abs() < 0.1);
}

#[test]
fn degenerate_and_unreachable_are_flagged() {
    let c = vec![
        CurvePoint { threshold: 0.0, far: 0.6, frr: 0.7 },
        CurvePoint { threshold: 1.0, far: 0.5, frr: 0.9 },
    ];
    let e = compute_eer(&c).unwrap();
    assert!(e.degenerate);
    assert!((e.eer - 70.0).abs() < 1e-12);
    let t = tar_at_far(&c, 0.1).unwrap();
    assert!(t.unreachable);
    assert_eq!(t.tar, 0.0);
}

#[test]
fn separable_sets_are_exact() {
    let s = ScoreSet {
        genuine: vec![0.9, 0.8, 0.95],
        impostor: vec![0.1, 0.2, 0.15, 0.3],
    };
    let r = MetricsReport::from_scores(100.0, &s, ScoreMode::Template).unwrap();
    assert_eq!(r.eer, 0.0);
    assert_eq!(r.tar_at_far_0p1, 100.0);
    assert!(!r.eer_degenerate && !r.tar_unreachable);
}

#[test]
fn swapping_and_negating_keeps_eer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s = random_scores(&mut rng);
        let flipped = ScoreSet {
            genuine: s.impostor.iter().map(|v| -v).collect(),
            impostor: s.genuine.iter().map(|v| -v).collect(),
        };
        let a = compute_eer(&far_frr_curves(&s, DEFAULT_THRESHOLDS).unwrap()).unwrap();
        let b = compute_eer(&far_frr_curves(&flipped, DEFAULT_THRESHOLDS).unwrap()).unwrap();
        assert!((a.eer - b.eer).abs() < 0.1, "{} vs {}", a.eer, b.eer);
    }
}

#[test]
fn monotone_transform_keeps_eer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let s = random_scores(&mut rng);
        let t = ScoreSet {
            genuine: s.genuine.iter().map(|v| 3.0 * v + 1.0).collect(),
            impostor: s.impostor.iter().map(|v| 3.0 * v + 1.0).collect(),
        };
        let a = compute_eer(&far_frr_curves(&s, DEFAULT_THRESHOLDS).unwrap()).unwrap();
        let b = compute_eer(&far_frr_curves(&t, DEFAULT_THRESHOLDS).unwrap()).unwrap();
        assert!((a.eer - b.eer).abs() < 1e-6);
    }
}

#[test]
fn interpolated_metrics_match_dense_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let s = random_scores(&mut rng);
        let c = far_frr_curves(&s, DEFAULT_THRESHOLDS).unwrap();
        let e = compute_eer(&c).unwrap().eer;
        let t = tar_at_far(&c, DEFAULT_FAR_TARGET).unwrap().tar;
        assert!((e - oracle_eer(&s)).abs() <= 0.1, "EER {e} vs {}", oracle_eer(&s));
        let o = oracle_tar(&s, DEFAULT_FAR_TARGET);
        assert!((t - o).abs() <= 0.1, "TAR {t} vs {o} ({} genuine, {} impostor)", s.genuine.len(), s.impostor.len());
    }
}

#[test]
fn report_serializes() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_scores(&mut rng);
    let r = MetricsReport::from_scores(50.0, &s, ScoreMode::Softmax).unwrap();
    let p = dir.path().join("m.json");
    r.write_json(&p).unwrap();
    let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(back, r);
    let c = far_frr_curves(&s, 11).unwrap();
    write_det_csv(&dir.path().join("d.csv"), &c).unwrap();
    let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.starts_with("threshold,far,frr\n"));
}

proptest! {
    #[test]
    fn curves_are_monotone(
        gen in prop::collection::vec(-5.0f64..5.0, 1..60),
        imp in prop::collection::vec(-5.0f64..5.0, 1..60),
        n in 2usize..300,
    ) {
        let c = far_frr_curves(&ScoreSet { genuine: gen, impostor: imp }, n).unwrap();
        prop_assert_eq!(c.len(), n);
        for w in c.windows(2) {
            prop_assert!(w[1].threshold >= w[0].threshold);
            prop_assert!(w[1].far <= w[0].far);
            prop_assert!(w[1].frr >= w[0].frr);
        }
        prop_assert_eq!(c[0].far, 1.0);
        prop_assert_eq!(c[0].frr, 0.0);
        let e = compute_eer(&c).unwrap();
        prop_assert!((0.0..=100.0).contains(&e.eer));
    }
}
