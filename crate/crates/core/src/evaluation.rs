//! Verification metrics: templates and cosine scoring, FAR/FRR curves, EER,
//! TAR at a fixed FAR, and DET export.
//!
//! Rates are fractions inside curves and percentages in reported results.
//! A score equal to the threshold counts as an accept.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PocVit;
use crate::training::{argmax, Samples};

/// Threshold grid for EER and TAR. Fine enough that the interpolation error
/// stays far below 0.1 points for realistic score densities.
pub const DEFAULT_THRESHOLDS: usize = 100_001;
/// Threshold grid for the exported DET curve.
pub const DET_THRESHOLDS: usize = 1001;
/// Operating point for TAR, in percent.
pub const DEFAULT_FAR_TARGET: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::Data(format!(
                "score set needs genuine and impostor scores, got {} and {}",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("verification score".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// How probe scores are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Cosine similarity against enrolled feature templates.
    #[default]
    Template,
    /// Softmax probability of each class.
    Softmax,
}

pub fn classification_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// L2-normalized mean feature per label.
pub fn templates_from_features(features: &[Vec<f64>], labels: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Data(format!("{} features for {} labels", features.len(), labels.len())));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, &l) in features.iter().zip(labels) {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; f.len()], 0));
        if e.0.len() != f.len() {
            return Err(Error::Shape(format!("feature widths {} and {}", e.0.len(), f.len())));
        }
        e.0.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(l, (s, n))| (l, l2_normalized(s.into_iter().map(|x| x / n as f64).collect())))
        .collect())
}

/// Each probe against every template: its own label's score is genuine,
/// all others impostor.
pub fn score_features(
    templates: &BTreeMap<usize, Vec<f64>>,
    features: &[Vec<f64>],
    labels: &[usize],
) -> Result<ScoreSet> {
    let mut s = ScoreSet::default();
    for (f, l) in features.iter().zip(labels) {
        if !templates.contains_key(l) {
            return Err(Error::Data(format!("no template enrolled for label {l}")));
        }
        for (t_label, t) in templates {
            let score = cosine(f, t);
            if t_label == l {
                s.genuine.push(score);
            } else {
                s.impostor.push(score);
            }
        }
    }
    Ok(s)
}

/// Per-class softmax probabilities as scores.
pub fn score_probabilities(logits: &[Vec<f64>], labels: &[usize]) -> Result<ScoreSet> {
    let mut s = ScoreSet::default();
    for (z, &l) in logits.iter().zip(labels) {
        if l >= z.len() {
            return Err(Error::Data(format!("label {l} outside {} classes", z.len())));
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        for (c, p) in e.iter().enumerate() {
            if c == l {
                s.genuine.push(p / sum);
            } else {
                s.impostor.push(p / sum);
            }
        }
    }
    Ok(s)
}

/// Logits and features of every sample, in order.
pub fn embed(model: &PocVit, samples: &Samples) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let out = samples
        .pairs
        .par_iter()
        .map(|(a, b)| {
            let (l, f) = model.infer(a, b)?;
            Ok((l.into_data(), f.into_data()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

pub fn enroll_templates(model: &PocVit, train: &Samples) -> Result<BTreeMap<usize, Vec<f64>>> {
    let (_, feats) = embed(model, train)?;
    templates_from_features(&feats, &train.labels)
}

pub fn score_probes(model: &PocVit, templates: &BTreeMap<usize, Vec<f64>>, test: &Samples) -> Result<ScoreSet> {
    let (_, feats) = embed(model, test)?;
    score_features(templates, &feats, &test.labels)
}

/// `n_thresholds` evenly spaced over the observed score range, with
/// `FAR(t) = #{impostor >= t} / n` and `FRR(t) = #{genuine < t} / n`.
pub fn far_frr_curves(s: &ScoreSet, n_thresholds: usize) -> Result<Vec<CurvePoint>> {
    s.check()?;
    if n_thresholds < 2 {
        return Err(Error::Parameter(format!("{n_thresholds} thresholds; need at least 2")));
    }
    let mut gen = s.genuine.clone();
    let mut imp = s.impostor.clone();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let lo = gen[0].min(imp[0]);
    let hi = gen[gen.len() - 1].max(imp[imp.len() - 1]);
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    Ok((0..n_thresholds)
        .map(|k| {
            let t = if k == n_thresholds - 1 {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n_thresholds - 1) as f64
            };
            let below_i = imp.partition_point(|x| *x < t);
            let below_g = gen.partition_point(|x| *x < t);
            CurvePoint {
                threshold: t,
                far: (imp.len() - below_i) as f64 / ni,
                frr: below_g as f64 / ng,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    /// Percent.
    pub eer: f64,
    pub threshold: f64,
    /// FAR - FRR never changed sign on the grid.
    pub degenerate: bool,
}

/// Linear interpolation at the sign change of `FAR - FRR`.
pub fn compute_eer(curves: &[CurvePoint]) -> Result<Eer> {
    if curves.is_empty() {
        return Err(Error::Data("empty FAR/FRR curves".into()));
    }
    for (i, p) in curves.iter().enumerate() {
        let d = p.far - p.frr;
        if d == 0.0 {
            return Ok(Eer {
                eer: 100.0 * p.far,
                threshold: p.threshold,
                degenerate: false,
            });
        }
        if let Some(q) = curves.get(i + 1) {
            let e = q.far - q.frr;
            if d > 0.0 && e < 0.0 {
                let a = d / (d - e);
                return Ok(Eer {
                    eer: 100.0 * (p.far + a * (q.far - p.far)),
                    threshold: p.threshold + a * (q.threshold - p.threshold),
                    degenerate: false,
                });
            }
        }
    }
    let best = curves
        .iter()
        .min_by(|a, b| a.far.max(a.frr).total_cmp(&b.far.max(b.frr)))
        .expect("nonempty");
    log::warn!("FAR and FRR never cross; reporting the smallest max(FAR, FRR)");
    Ok(Eer {
        eer: 100.0 * best.far.max(best.frr),
        threshold: best.threshold,
        degenerate: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tar {
    /// Percent.
    pub tar: f64,
    pub threshold: f64,
    /// FAR never reached the target.
    pub unreachable: bool,
}

/// TAR at the lowest threshold whose FAR is at most `far_target` percent,
/// interpolated linearly between the grid points where FAR crosses the
/// target.
pub fn tar_at_far(curves: &[CurvePoint], far_target: f64) -> Result<Tar> {
    if curves.is_empty() {
        return Err(Error::Data("empty FAR/FRR curves".into()));
    }
    let target = far_target / 100.0;
    let Some(i) = curves.iter().position(|p| p.far <= target) else {
        log::warn!("FAR never reaches {far_target}%");
        return Ok(Tar {
            tar: 0.0,
            threshold: curves[curves.len() - 1].threshold,
            unreachable: true,
        });
    };
    let q = curves[i];
    if i == 0 || q.far == target {
        return Ok(Tar {
            tar: 100.0 * (1.0 - q.frr),
            threshold: q.threshold,
            unreachable: false,
        });
    }
    let p = curves[i - 1];
    let a = (p.far - target) / (p.far - q.far);
    Ok(Tar {
        tar: 100.0 * (1.0 - (p.frr + a * (q.frr - p.frr))),
        threshold: p.threshold + a * (q.threshold - p.threshold),
        unreachable: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub accuracy: f64,
    /// Percent.
    pub eer: f64,
    /// Percent, at FAR = 0.1%.
    pub tar_at_far_0p1: f64,
    pub threshold_at_eer: f64,
    /// `(far, frr)` as fractions.
    pub det_points: Vec<(f64, f64)>,
    pub score_mode: ScoreMode,
    pub n_genuine: usize,
    pub n_impostor: usize,
    pub eer_degenerate: bool,
    pub tar_unreachable: bool,
}

impl MetricsReport {
    pub fn from_scores(accuracy: f64, scores: &ScoreSet, mode: ScoreMode) -> Result<Self> {
        let curves = far_frr_curves(scores, DEFAULT_THRESHOLDS)?;
        let eer = compute_eer(&curves)?;
        let tar = tar_at_far(&curves, DEFAULT_FAR_TARGET)?;
        let r = MetricsReport {
            accuracy,
            eer: eer.eer,
            tar_at_far_0p1: tar.tar,
            threshold_at_eer: eer.threshold,
            det_points: far_frr_curves(scores, DET_THRESHOLDS)?
                .iter()
                .map(|p| (p.far, p.frr))
                .collect(),
            score_mode: mode,
            n_genuine: scores.genuine.len(),
            n_impostor: scores.impostor.len(),
            eer_degenerate: eer.degenerate,
            tar_unreachable: tar.unreachable,
        };
        if !(0.0..=100.0).contains(&r.eer) || !(0.0..=100.0).contains(&r.tar_at_far_0p1) {
            return Err(Error::Contract(format!("EER {} or TAR {} out of range", r.eer, r.tar_at_far_0p1)));
        }
        if r.eer > 50.0 {
            log::warn!("EER {:.2}% above 50%: genuine scores rank below impostor scores", r.eer);
        }
        Ok(r)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn write_det_csv(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("threshold,far,frr\n");
    for p in curves {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Accuracy on `test` plus verification metrics, and the DET curve. Templates
/// are enrolled from `train`.
pub fn evaluate(model: &PocVit, train: &Samples, test: &Samples, mode: ScoreMode) -> Result<(MetricsReport, Vec<CurvePoint>)> {
    let (logits, feats) = embed(model, test)?;
    let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let acc = classification_accuracy(&preds, &test.labels)?;
    let scores = match mode {
        ScoreMode::Template => score_features(&enroll_templates(model, train)?, &feats, &test.labels)?,
        ScoreMode::Softmax => score_probabilities(&logits, &test.labels)?,
    };
    let report = MetricsReport::from_scores(acc, &scores, mode)?;
    let curves = far_frr_curves(&scores, DET_THRESHOLDS)?;
    Ok((report, curves))
}
