//! Procedural dual-trait image pairs: a branching forehead vein pattern and a
//! periocular pattern (eye outline, iris, creases), rendered under controlled
//! illumination and pose perturbations.
//!
//! Every random draw comes from a ChaCha stream whose key is a hash of
//! `(dataset seed, subject, frame, purpose)`, so content never depends on
//! generation order or thread count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageproc::{gaussian_blur, read_image, write_pgm, GrayImage};

/// Blur applied to the rasterized strokes, in pixels.
pub const RENDER_BLUR_SIGMA: f64 = 1.2;
/// Stroke widths are stored for a frame of this many pixels and scaled with
/// the rendered size.
pub const REFERENCE_SIZE: f64 = 64.0;
pub const MIN_VEIN_SEGMENTS: usize = 6;
pub const MIN_PERIOCULAR_ARCS: usize = 3;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Fraction of each subject's frames held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Quadratic Bezier stroke in unit-square coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub p0: [f64; 2],
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    /// Stroke width in pixels of a 64-pixel frame.
    pub width: f64,
    /// Fraction of the background removed at full coverage.
    pub depth: f64,
}

impl Curve {
    pub fn point(&self, t: f64) -> [f64; 2] {
        let u = 1.0 - t;
        let (a, b, c) = (u * u, 2.0 * u * t, t * t);
        [
            a * self.p0[0] + b * self.p1[0] + c * self.p2[0],
            a * self.p0[1] + b * self.p1[1] + c * self.p2[1],
        ]
    }
}

/// Circular arc in unit-square coordinates; angles in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub center: [f64; 2],
    pub radius: f64,
    pub start: f64,
    pub sweep: f64,
    pub width: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriocularSpec {
    pub center: [f64; 2],
    /// Semi-axes of the eye outline.
    pub axes: [f64; 2],
    pub tilt: f64,
    pub outline_width: f64,
    /// Horizontal iris offset as a fraction of the long semi-axis.
    pub iris_offset: f64,
    pub iris_radius: f64,
    pub iris_depth: f64,
    pub arcs: Vec<Arc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: u64,
    pub seed: u64,
    pub forehead_level: f64,
    pub periocular_level: f64,
    pub vein_graph: Vec<Curve>,
    pub periocular: PeriocularSpec,
}

/// Small affine pose change: shift in pixels, rotation in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub rotation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub brightness_scale: f64,
    pub gradient_direction: f64,
    /// The illumination factor spans `1 -+ gradient_strength` across the frame.
    pub gradient_strength: f64,
    pub noise_sigma: f64,
    pub jitter: Jitter,
    pub noise_seed: u64,
}

impl FrameParams {
    /// No jitter, unit brightness, flat illumination, no noise.
    pub fn canonical() -> Self {
        FrameParams {
            brightness_scale: 1.0,
            gradient_direction: 0.0,
            gradient_strength: 0.0,
            noise_sigma: 0.0,
            jitter: Jitter::default(),
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.jitter;
        let ok = (0.6..=1.4).contains(&self.brightness_scale)
            && j.dx.abs() <= 3.0
            && j.dy.abs() <= 3.0
            && j.rotation.abs() <= 3.0
            && (0.0..1.0).contains(&self.gradient_strength)
            && self.noise_sigma >= 0.0
            && self.gradient_direction.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("frame parameters out of range: {self:?}")))
        }
    }
}

/// Ranges the dataset builder draws frame perturbations from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub brightness: [f64; 2],
    pub max_gradient: f64,
    pub noise: [f64; 2],
    pub max_shift: f64,
    pub max_rotation: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            brightness: [0.8, 1.2],
            max_gradient: 0.2,
            noise: [0.005, 0.02],
            max_shift: 2.0,
            max_rotation: 2.0,
        }
    }
}

/// Counter-based stream: the key is a hash of the identifying integers.
pub fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

const PURPOSE_SUBJECT: u64 = 1;
const PURPOSE_FRAME: u64 = 2;
const PURPOSE_SPLIT: u64 = 3;

fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.02, 0.98), p[1].clamp(0.02, 0.98)]
}

pub fn generate_subject(subject_id: u64, dataset_seed: u64) -> SubjectSpec {
    let mut rng = keyed_rng(&[dataset_seed, subject_id, PURPOSE_SUBJECT]);
    let forehead_level = rng.gen_range(0.65..0.85);
    let periocular_level = rng.gen_range(0.6..0.85);

    // A few trunks crossing the forehead, then branches sprouting off
    // earlier segments.
    let n_veins = rng.gen_range(MIN_VEIN_SEGMENTS..=10);
    let n_trunks = rng.gen_range(2..=3);
    let mut veins: Vec<Curve> = Vec::with_capacity(n_veins);
    for i in 0..n_veins {
        let (p0, p2) = if i < n_trunks {
            let y0 = rng.gen_range(0.1..0.9);
            let y1 = (y0 + rng.gen_range(-0.4..0.4f64)).clamp(0.05, 0.95);
            let vertical = rng.gen_bool(0.3);
            let (a, b) = ([rng.gen_range(0.0..0.2), y0], [rng.gen_range(0.8..1.0), y1]);
            if vertical {
                ([a[1], a[0]], [b[1], b[0]])
            } else {
                (a, b)
            }
        } else {
            let parent = &veins[rng.gen_range(0..veins.len())];
            let start = parent.point(rng.gen_range(0.2..0.8));
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(0.2..0.5);
            (start, clamp_unit([start[0] + len * angle.cos(), start[1] + len * angle.sin()]))
        };
        let mid = [(p0[0] + p2[0]) / 2.0, (p0[1] + p2[1]) / 2.0];
        let bend = rng.gen_range(0.05..0.2);
        let p1 = clamp_unit([
            mid[0] + bend * rng.gen_range(-1.0..1.0),
            mid[1] + bend * rng.gen_range(-1.0..1.0),
        ]);
        let width = if i < n_trunks {
            rng.gen_range(2.2..3.5)
        } else {
            rng.gen_range(1.2..2.4)
        };
        veins.push(Curve {
            p0,
            p1,
            p2,
            width,
            depth: rng.gen_range(0.3..0.55),
        });
    }

    let axes = [rng.gen_range(0.24..0.36), rng.gen_range(0.09..0.16)];
    let center = [rng.gen_range(0.42..0.58), rng.gen_range(0.5..0.62)];
    let n_arcs = rng.gen_range(MIN_PERIOCULAR_ARCS..=5);
    let mut arcs = Vec::with_capacity(n_arcs);
    for i in 0..n_arcs {
        // The first arc is the brow, the rest are creases above and below.
        let (c, radius, mid_angle) = if i == 0 {
            let r = rng.gen_range(0.35..0.6);
            let c = [center[0] + rng.gen_range(-0.08..0.08), center[1] - axes[1] - 0.12 + r];
            (c, r, -std::f64::consts::FRAC_PI_2)
        } else {
            let above = rng.gen_bool(0.5);
            let r = rng.gen_range(0.2..0.45);
            let gap = rng.gen_range(0.03..0.12);
            let (cy, mid) = if above {
                (center[1] - axes[1] - gap + r, -std::f64::consts::FRAC_PI_2)
            } else {
                (center[1] + axes[1] + gap - r, std::f64::consts::FRAC_PI_2)
            };
            ([center[0] + rng.gen_range(-0.1..0.1), cy], r, mid)
        };
        let sweep = rng.gen_range(0.5..1.3);
        arcs.push(Arc {
            center: c,
            radius,
            start: mid_angle - sweep / 2.0 + rng.gen_range(-0.2..0.2),
            sweep,
            width: if i == 0 { rng.gen_range(3.0..5.0) } else { rng.gen_range(1.0..2.0) },
            depth: rng.gen_range(0.25..0.5),
        });
    }
    let periocular = PeriocularSpec {
        center,
        axes,
        tilt: rng.gen_range(-0.17..0.17),
        outline_width: rng.gen_range(1.5..2.5),
        iris_offset: rng.gen_range(-0.3..0.3),
        iris_radius: axes[1] * rng.gen_range(0.75..0.95),
        iris_depth: rng.gen_range(0.45..0.7),
        arcs,
    };
    SubjectSpec {
        subject_id,
        seed: dataset_seed,
        forehead_level,
        periocular_level,
        vein_graph: veins,
        periocular,
    }
}

/// Perturbations for one frame, drawn from the frame's own stream.
pub fn frame_params(dataset_seed: u64, subject_id: u64, frame: u64, p: &Perturbation) -> FrameParams {
    let mut rng = keyed_rng(&[dataset_seed, subject_id, frame, PURPOSE_FRAME]);
    let mut draw = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let brightness_scale = draw(p.brightness[0], p.brightness[1]);
    let gradient_direction = draw(0.0, std::f64::consts::TAU);
    let gradient_strength = draw(0.0, p.max_gradient);
    let noise_sigma = draw(p.noise[0], p.noise[1]);
    let jitter = Jitter {
        dx: draw(-p.max_shift, p.max_shift),
        dy: draw(-p.max_shift, p.max_shift),
        rotation: draw(-p.max_rotation, p.max_rotation),
    };
    FrameParams {
        brightness_scale,
        gradient_direction,
        gradient_strength,
        noise_sigma,
        jitter,
        noise_seed: rng.gen(),
    }
}

/// Per-pixel darkening buffer. Strokes are polylines stamped with
/// anti-aliased coverage `clamp(w/2 + 1/2 - dist, 0, 1)`; overlapping strokes
/// combine multiplicatively.
struct Canvas {
    size: usize,
    keep: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            keep: vec![1.0; size * size],
        }
    }

    fn px(&self, p: [f64; 2]) -> [f64; 2] {
        let s = (self.size - 1) as f64;
        [p[0] * s, p[1] * s]
    }

    fn stroke(&mut self, pts: &[[f64; 2]], width: f64, depth: f64) {
        let n = self.size;
        let half = width / 2.0;
        let mut dist = vec![f64::INFINITY; n * n];
        for seg in pts.windows(2) {
            let (a, b) = (self.px(seg[0]), self.px(seg[1]));
            let reach = half + 1.0;
            let x0 = (a[0].min(b[0]) - reach).floor().max(0.0) as usize;
            let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
            let x1 = ((a[0].max(b[0]) + reach).ceil().max(0.0) as usize).min(n - 1);
            let y1 = ((a[1].max(b[1]) + reach).ceil().max(0.0) as usize).min(n - 1);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len2 = ex * ex + ey * ey;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (px, py) = (x as f64 - a[0], y as f64 - a[1]);
                    let t = if len2 > 0.0 { ((px * ex + py * ey) / len2).clamp(0.0, 1.0) } else { 0.0 };
                    let d = (px - t * ex).hypot(py - t * ey);
                    let cell = &mut dist[y * n + x];
                    if d < *cell {
                        *cell = d;
                    }
                }
            }
        }
        for (k, d) in self.keep.iter_mut().zip(&dist) {
            let cov = (half + 0.5 - d).clamp(0.0, 1.0);
            *k *= 1.0 - depth * cov;
        }
    }

    fn disk(&mut self, center: [f64; 2], radius: f64, depth: f64, inside: impl Fn([f64; 2]) -> bool) {
        let n = self.size;
        let c = self.px(center);
        let r = radius * (n - 1) as f64;
        for y in 0..n {
            for x in 0..n {
                let d = (x as f64 - c[0]).hypot(y as f64 - c[1]);
                let cov = (r + 0.5 - d).clamp(0.0, 1.0);
                let s = (n - 1) as f64;
                if cov > 0.0 && inside([x as f64 / s, y as f64 / s]) {
                    self.keep[y * n + x] *= 1.0 - depth * cov;
                }
            }
        }
    }

    fn finish(self, level: f64) -> Result<GrayImage> {
        let data = self.keep.iter().map(|k| level * k).collect();
        GrayImage::new(self.size, self.size, data)
    }
}

fn samples(n_px: f64, f: impl Fn(f64) -> [f64; 2]) -> Vec<[f64; 2]> {
    let steps = (n_px * 2.0).ceil().max(8.0) as usize;
    (0..=steps).map(|i| f(i as f64 / steps as f64)).collect()
}

fn forehead_strokes(spec: &SubjectSpec, size: usize) -> Result<GrayImage> {
    let scale = size as f64 / REFERENCE_SIZE;
    let mut canvas = Canvas::new(size);
    for c in &spec.vein_graph {
        let chord = ((c.p0[0] - c.p1[0]).hypot(c.p0[1] - c.p1[1])
            + (c.p1[0] - c.p2[0]).hypot(c.p1[1] - c.p2[1]))
            * size as f64;
        canvas.stroke(&samples(chord, |t| c.point(t)), c.width * scale, c.depth);
    }
    canvas.finish(spec.forehead_level)
}

fn periocular_strokes(spec: &SubjectSpec, size: usize) -> Result<GrayImage> {
    let scale = size as f64 / REFERENCE_SIZE;
    let p = &spec.periocular;
    let mut canvas = Canvas::new(size);
    let (ct, st) = (p.tilt.cos(), p.tilt.sin());
    let on_ellipse = |t: f64| {
        let a = t * std::f64::consts::TAU;
        let (ex, ey) = (p.axes[0] * a.cos(), p.axes[1] * a.sin());
        [p.center[0] + ct * ex - st * ey, p.center[1] + st * ex + ct * ey]
    };
    let inside_eye = |q: [f64; 2]| {
        let (dx, dy) = (q[0] - p.center[0], q[1] - p.center[1]);
        let (u, v) = (ct * dx + st * dy, -st * dx + ct * dy);
        (u / p.axes[0]).powi(2) + (v / p.axes[1]).powi(2) <= 1.05
    };
    let iris = [
        p.center[0] + ct * p.iris_offset * p.axes[0],
        p.center[1] + st * p.iris_offset * p.axes[0],
    ];
    canvas.disk(iris, p.iris_radius, p.iris_depth, inside_eye);
    canvas.disk(iris, p.iris_radius * 0.4, 0.6, inside_eye);
    let perimeter = std::f64::consts::TAU * p.axes[0].max(p.axes[1]) * size as f64;
    canvas.stroke(&samples(perimeter, on_ellipse), p.outline_width * scale, 0.5);
    for a in &p.arcs {
        let len = a.radius * a.sweep * size as f64;
        let pts = samples(len, |t| {
            let th = a.start + t * a.sweep;
            [a.center[0] + a.radius * th.cos(), a.center[1] + a.radius * th.sin()]
        });
        canvas.stroke(&pts, a.width * scale, a.depth);
    }
    canvas.finish(spec.periocular_level)
}

/// Bilinear resampling under rotation about the frame center plus a shift;
/// samples outside the frame clamp to the border.
fn apply_jitter(img: &GrayImage, j: Jitter) -> Result<GrayImage> {
    if j.dx == 0.0 && j.dy == 0.0 && j.rotation == 0.0 {
        return Ok(img.clone());
    }
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let (c, s) = (j.rotation.to_radians().cos(), j.rotation.to_radians().sin());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: output pixel -> source location.
            let (u, v) = (x as f64 - cx - j.dx, y as f64 - cy - j.dy);
            let sx = (c * u + s * v + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-s * u + c * v + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
            let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    GrayImage::new(w, h, out)
}

/// Multiplicative illumination: a linear ramp along `gradient_direction`
/// running from `1 - strength` to `1 + strength` corner to corner, times the
/// brightness scale. Noise is added afterwards and the result clamped.
fn illuminate(img: &GrayImage, fp: &FrameParams) -> Result<GrayImage> {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let (dc, ds) = (fp.gradient_direction.cos(), fp.gradient_direction.sin());
    let extent = (dc.abs() * cx + ds.abs() * cy).max(f64::MIN_POSITIVE);
    let normal = Normal::new(0.0, fp.noise_sigma.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(fp.noise_seed);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let u = ((x as f64 - cx) * dc + (y as f64 - cy) * ds) / extent;
            let mut v = img.get(x, y) * fp.brightness_scale * (1.0 + fp.gradient_strength * u);
            if fp.noise_sigma > 0.0 {
                v += normal.sample(&mut rng);
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    GrayImage::new(w, h, out)
}

fn finish_frame(strokes: GrayImage, fp: &FrameParams) -> Result<GrayImage> {
    let smooth = gaussian_blur(&strokes, RENDER_BLUR_SIGMA)?;
    illuminate(&apply_jitter(&smooth, fp.jitter)?, fp)
}

/// Rasterize, smooth, jitter, illuminate, add noise, clamp. The periocular
/// frame uses a derived noise stream so the two traits have independent
/// noise.
pub fn render_frame(spec: &SubjectSpec, fp: &FrameParams, size: usize) -> Result<(GrayImage, GrayImage)> {
    if size < 8 {
        return Err(Error::Dimension(format!("frame size {size} is below 8 pixels")));
    }
    fp.validate()?;
    let forehead = finish_frame(forehead_strokes(spec, size)?, fp)?;
    let peri_fp = FrameParams {
        noise_seed: fp.noise_seed ^ 0x9E37_79B9_7F4A_7C15,
        ..*fp
    };
    let periocular = finish_frame(periocular_strokes(spec, size)?, &peri_fp)?;
    Ok((forehead, periocular))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: u64,
    pub frame: u64,
    pub label: usize,
    /// Relative to the manifest's directory unless absolute.
    pub forehead: PathBuf,
    pub periocular: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<FrameParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_seed: u64,
    pub n_subjects: usize,
    pub frames_per_subject: usize,
    pub image_size: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    /// Accepts either the manifest file or the directory holding it.
    pub fn open(path: &Path) -> Result<Manifest> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Data("manifest has no entries".into()));
        }
        let n_classes = self.n_classes();
        for e in &self.entries {
            if e.forehead.as_os_str().is_empty() || e.periocular.as_os_str().is_empty() {
                return Err(Error::Data(format!("entry for subject {} frame {} has an empty path", e.subject, e.frame)));
            }
            if e.label >= n_classes {
                return Err(Error::Data(format!("label {} outside {n_classes} classes", e.label)));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_subjects
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    pub fn load_pair(&self, e: &ManifestEntry) -> Result<(GrayImage, GrayImage)> {
        Ok((read_image(&self.resolve(&e.forehead))?, read_image(&self.resolve(&e.periocular))?))
    }

    /// Every file the manifest refers to, resolved.
    pub fn files(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| [self.resolve(&e.forehead), self.resolve(&e.periocular)])
            .collect()
    }
}

/// Test frame indices for one subject: a seeded shuffle, the first
/// `round(frames * 0.2)` (at least one when there are two or more frames).
pub fn test_frames(dataset_seed: u64, subject_id: u64, frames: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let n_test = if frames >= 2 {
        ((frames as f64 * TEST_FRACTION).round() as usize).clamp(1, frames - 1)
    } else {
        0
    };
    let mut idx: Vec<usize> = (0..frames).collect();
    idx.shuffle(&mut keyed_rng(&[dataset_seed, subject_id, PURPOSE_SPLIT]));
    let mut out = idx[..n_test].to_vec();
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_subjects: usize,
    pub frames_per_subject: usize,
    pub seed: u64,
    pub image_size: usize,
    pub perturbation: Perturbation,
}

impl DatasetSpec {
    pub fn desk(seed: u64) -> Self {
        DatasetSpec {
            n_subjects: 20,
            frames_per_subject: 25,
            seed,
            image_size: 64,
            perturbation: Perturbation::default(),
        }
    }
}

/// Renders every frame pair to `out_dir/subject_<id>/frame_<k>_{forehead,periocular}.pgm`
/// and writes the manifest last.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.n_subjects == 0 || spec.frames_per_subject == 0 {
        return Err(Error::Parameter("dataset needs at least one subject and one frame".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(u64, u64)> = (0..spec.n_subjects as u64)
        .flat_map(|s| (0..spec.frames_per_subject as u64).map(move |f| (s, f)))
        .collect();
    let subjects: Vec<SubjectSpec> = (0..spec.n_subjects as u64)
        .into_par_iter()
        .map(|s| generate_subject(s, spec.seed))
        .collect();
    for s in 0..spec.n_subjects {
        let dir = out_dir.join(format!("subject_{s}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let splits: BTreeMap<u64, Vec<usize>> = (0..spec.n_subjects as u64)
        .map(|s| (s, test_frames(spec.seed, s, spec.frames_per_subject)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(s, f)| {
            let fp = frame_params(spec.seed, s, f, &spec.perturbation);
            let (fh, po) = render_frame(&subjects[s as usize], &fp, spec.image_size)?;
            let rel_f = PathBuf::from(format!("subject_{s}/frame_{f}_forehead.pgm"));
            let rel_p = PathBuf::from(format!("subject_{s}/frame_{f}_periocular.pgm"));
            write_pgm(&out_dir.join(&rel_f), &fh)?;
            write_pgm(&out_dir.join(&rel_p), &po)?;
            let split = if splits[&s].contains(&(f as usize)) { Split::Test } else { Split::Train };
            Ok(ManifestEntry {
                subject: s,
                frame: f,
                label: s as usize,
                forehead: rel_f,
                periocular: rel_p,
                split,
                params: Some(fp),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        dataset_seed: spec.seed,
        n_subjects: spec.n_subjects,
        frames_per_subject: spec.frames_per_subject,
        image_size: spec.image_size,
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
