#![allow(dead_code)]

use pocvit::evaluation::ScoreSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian genuine and impostor scores with random separation and spread.
pub fn random_scores(rng: &mut ChaCha8Rng) -> ScoreSet {
    let ng = rng.gen_range(1000..3000);
    let ni = rng.gen_range(10_000..30_000);
    let gen = Normal::new(rng.gen_range(0.0..4.0), rng.gen_range(0.5..2.0)).unwrap();
    let imp = Normal::new(0.0, rng.gen_range(0.5..2.0)).unwrap();
    ScoreSet {
        genuine: (0..ng).map(|_| gen.sample(rng)).collect(),
        impostor: (0..ni).map(|_| imp.sample(rng)).collect(),
    }
}

/// `(threshold, far, frr)` at `n` evenly spaced thresholds, by direct count.
pub fn dense_sweep(s: &ScoreSet, n: usize) -> Vec<(f64, f64, f64)> {
    let mut g = s.genuine.clone();
    let mut i = s.impostor.clone();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let lo = g[0].min(i[0]);
    let hi = g[g.len() - 1].max(i[i.len() - 1]);
    let (mut gi, mut ii) = (0, 0);
    (0..n)
        .map(|k| {
            let t = lo + (hi - lo) * k as f64 / (n - 1) as f64;
            while gi < g.len() && g[gi] < t {
                gi += 1;
            }
            while ii < i.len() && i[ii] < t {
                ii += 1;
            }
            (t, (i.len() - ii) as f64 / i.len() as f64, gi as f64 / g.len() as f64)
        })
        .collect()
}

/// EER in percent: mean of FAR and FRR where they are closest.
pub fn oracle_eer(s: &ScoreSet) -> f64 {
    let sweep = dense_sweep(s, 100_000);
    let p = sweep
        .iter()
        .min_by(|a, b| (a.1 - a.2).abs().total_cmp(&(b.1 - b.2).abs()))
        .unwrap();
    50.0 * (p.1 + p.2)
}

/// TAR in percent at the lowest threshold with FAR at most `target` percent.
pub fn oracle_tar(s: &ScoreSet, target: f64) -> f64 {
    let sweep = dense_sweep(s, 100_000);
    let p = sweep.iter().find(|p| p.1 <= target / 100.0).unwrap();
    100.0 * (1.0 - p.2)
}
