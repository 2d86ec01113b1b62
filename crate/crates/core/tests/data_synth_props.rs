use std::fs;
use std::path::Path;

use pocvit::data_synth::*;
use pocvit::imageproc::GrayImage;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn mean_abs_diff(a: &GrayImage, b: &GrayImage) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

fn tree_hash(dir: &Path) -> String {
    let mut files: Vec<_> = walk(dir);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn subject_generation_is_deterministic_and_distinct() {
    assert_eq!(generate_subject(5, 42), generate_subject(5, 42));
    let (a, b) = (generate_subject(0, 42), generate_subject(1, 42));
    assert_ne!(a.vein_graph[0].p0, b.vein_graph[0].p0);
    assert_ne!(generate_subject(0, 42), generate_subject(0, 43));
}

#[test]
fn hundred_subjects_are_pairwise_separable() {
    let frames: Vec<(GrayImage, GrayImage)> = (0..100)
        .map(|s| render_frame(&generate_subject(s, 9), &FrameParams::canonical(), 64).unwrap())
        .collect();
    let mut worst = f64::INFINITY;
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            let d = (mean_abs_diff(&frames[i].0, &frames[j].0) + mean_abs_diff(&frames[i].1, &frames[j].1)) / 2.0;
            worst = worst.min(d);
        }
    }
    assert!(worst > 0.02, "closest pair differs by {worst}");
}

#[test]
fn canonical_render_is_bit_identical() {
    let spec = generate_subject(3, 1);
    let a = render_frame(&spec, &FrameParams::canonical(), 64).unwrap();
    let b = render_frame(&spec, &FrameParams::canonical(), 64).unwrap();
    assert_eq!(a, b);
}

#[test]
fn brightness_is_multiplicative() {
    let spec = generate_subject(2, 1);
    let full = render_frame(&spec, &FrameParams::canonical(), 64).unwrap();
    let dim_fp = FrameParams { brightness_scale: 0.7, ..FrameParams::canonical() };
    let dim = render_frame(&spec, &dim_fp, 64).unwrap();
    for (a, b) in [(&full.0, &dim.0), (&full.1, &dim.1)] {
        for (x, y) in a.data().iter().zip(b.data()) {
            // Rendered levels stay below 1, so nothing clamps here.
            assert!(*x < 1.0);
            assert!((y - 0.7 * x).abs() < 1e-12);
        }
    }
}

#[test]
fn noise_statistics_match_sigma() {
    for s in 0..4 {
        let spec = generate_subject(s, 5);
        let clean = render_frame(&spec, &FrameParams::canonical(), 64).unwrap();
        let fp = FrameParams { noise_sigma: 0.02, noise_seed: 77 + s, ..FrameParams::canonical() };
        let noisy = render_frame(&spec, &fp, 64).unwrap();
        let d: Vec<f64> = noisy.0.data().iter().zip(clean.0.data()).map(|(a, b)| a - b).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((0.015..=0.025).contains(&sd), "noise std {sd}");
    }
}

#[test]
fn desk_dataset_layout_split_and_rebuild() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::desk(7);
    let m = build_dataset(&spec, tmp.path()).unwrap();
    assert_eq!(m.entries.len(), 500);
    assert_eq!(m.split(Split::Train).len(), 400);
    assert_eq!(m.split(Split::Test).len(), 100);
    for s in 0..20 {
        let tr = m.entries.iter().filter(|e| e.subject == s && e.split == Split::Train).count();
        let te = m.entries.iter().filter(|e| e.subject == s && e.split == Split::Test).count();
        assert_eq!((tr, te), (20, 5), "subject {s}");
    }
    assert!(tmp.path().join("subject_3/frame_24_periocular.pgm").exists());

    let loaded = Manifest::open(tmp.path()).unwrap();
    assert_eq!(loaded.entries, m.entries);
    let mut listed: Vec<_> = loaded.files();
    listed.sort();
    let mut on_disk: Vec<_> = walk(tmp.path()).into_iter().filter(|p| p.extension().is_some_and(|e| e == "pgm")).collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    let (f, p) = loaded.load_pair(&loaded.entries[0]).unwrap();
    assert_eq!((f.width(), p.height()), (64, 64));

    let again = tempfile::tempdir().unwrap();
    build_dataset(&spec, again.path()).unwrap();
    assert_eq!(tree_hash(tmp.path()), tree_hash(again.path()));
}

#[test]
fn manifest_rejects_bad_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec { n_subjects: 2, frames_per_subject: 2, ..DatasetSpec::desk(1) };
    let mut m = build_dataset(&spec, tmp.path()).unwrap();
    m.n_subjects = 1;
    m.entries[0].label = 5;
    let path = tmp.path().join("bad.json");
    m.save(&path).unwrap();
    assert!(matches!(Manifest::load(&path), Err(pocvit::Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn rendered_frames_stay_in_unit_range(subject in 0u64..1000, frame in 0u64..1000, seed in 0u64..50) {
        let fp = frame_params(seed, subject, frame, &Perturbation { brightness: [0.6, 1.4], max_gradient: 0.5, noise: [0.0, 0.05], max_shift: 3.0, max_rotation: 3.0 });
        let (a, b) = render_frame(&generate_subject(subject, seed), &fp, 32).unwrap();
        prop_assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
    }
}
