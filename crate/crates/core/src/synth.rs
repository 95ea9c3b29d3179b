//! Procedural datasets of articulated figures with part-local attributes.
//!
//! Every attribute is drawn as a texture confined to its part, and the
//! background carries distractor patches from the same texture vocabulary, so
//! recognizing an attribute requires knowing where the part is.
//!
//! Human keypoints, in order:
//!
//! | index | name | index | name |
//! |---|---|---|---|
//! | 0 | head top | 7 | left wrist |
//! | 1 | neck | 8 | right hip |
//! | 2 | right shoulder | 9 | right knee |
//! | 3 | right elbow | 10 | right ankle |
//! | 4 | right wrist | 11 | left hip |
//! | 5 | left shoulder | 12 | left knee |
//! | 6 | left elbow | 13 | left ankle |
//!
//! Garment keypoints: left/right collar (0, 1), left/right shoulder (2, 3),
//! left/right cuff (4, 5), left/right hem (6, 7).
//!
//! On disk a dataset is a directory holding `manifest.json`, `samples.jsonl`
//! (one record per sample) and `img/NNNNNN.png`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{KeypointSet, PartDefinition, DEFAULT_SCALE};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Keypoints are placed inside `[MARGIN, 1 - MARGIN]^2`.
pub const MARGIN: f64 = 0.05;

pub const HUMAN_KEYPOINTS: [&str; 14] = [
    "head_top",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
];

pub const GARMENT_KEYPOINTS: [&str; 8] = [
    "left_collar",
    "right_collar",
    "left_shoulder",
    "right_shoulder",
    "left_cuff",
    "right_cuff",
    "left_hem",
    "right_hem",
];

/// Head top, neck and both shoulders; torso with arms and hips; both legs.
pub fn human_parts() -> Vec<PartDefinition> {
    vec![
        PartDefinition::new("head", vec![0, 1, 2, 5], DEFAULT_SCALE),
        PartDefinition::new("torso", vec![2, 3, 5, 6, 8, 11], DEFAULT_SCALE),
        PartDefinition::new("legs", vec![8, 9, 10, 11, 12, 13], DEFAULT_SCALE),
    ]
}

pub fn garment_parts() -> Vec<PartDefinition> {
    vec![
        PartDefinition::new("collar", vec![0, 1, 2, 3], DEFAULT_SCALE),
        PartDefinition::new("button", vec![0, 1, 6, 7], DEFAULT_SCALE),
        PartDefinition::new("sleeve", vec![2, 3, 4, 5], DEFAULT_SCALE),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Mpii,
    Garment,
}

impl DatasetMode {
    pub fn group_names(self) -> [&'static str; 3] {
        match self {
            DatasetMode::Mpii => ["head", "torso", "legs"],
            DatasetMode::Garment => ["collar", "button", "sleeve"],
        }
    }

    pub fn class_counts(self) -> [usize; 3] {
        match self {
            DatasetMode::Mpii => [3, 4, 4],
            DatasetMode::Garment => [4, 4, 4],
        }
    }

    pub fn num_keypoints(self) -> usize {
        match self {
            DatasetMode::Mpii => HUMAN_KEYPOINTS.len(),
            DatasetMode::Garment => GARMENT_KEYPOINTS.len(),
        }
    }

    pub fn keypoint_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            DatasetMode::Mpii => &HUMAN_KEYPOINTS,
            DatasetMode::Garment => &GARMENT_KEYPOINTS,
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn parts(self) -> Vec<PartDefinition> {
        match self {
            DatasetMode::Mpii => human_parts(),
            DatasetMode::Garment => garment_parts(),
        }
    }
}

impl std::str::FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpii" => Ok(DatasetMode::Mpii),
            "garment" => Ok(DatasetMode::Garment),
            _ => Err(Error::config(format!("unknown dataset mode `{s}` (expected mpii or garment)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub mode: DatasetMode,
    pub image_size: usize,
    /// Figure height as a fraction of the image height.
    pub scale_range: [f64; 2],
    /// Inclusive range of background distractor patches per image.
    pub distractors: [usize; 2],
    /// Unnormalized class weights per group; uniform when absent.
    pub class_priors: Option<Vec<Vec<f64>>>,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(mode: DatasetMode) -> Self {
        Self {
            mode,
            image_size: 64,
            scale_range: [0.5, 0.9],
            distractors: [2, 4],
            class_priors: None,
            noise: 0.03,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.image_size < 16 {
            v.push(format!("image size {} is below 16", self.image_size));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            v.push(format!("scale range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        if self.distractors[0] > self.distractors[1] {
            v.push("distractor range is reversed".into());
        }
        if let Some(p) = &self.class_priors {
            let counts = self.mode.class_counts();
            if p.len() != 3 || p.iter().zip(counts).any(|(g, c)| g.len() != c) {
                v.push(format!("class priors must have shape {counts:?}"));
            }
            if p.iter().flatten().any(|&w| !(w >= 0.0 && w.is_finite())) || p.iter().any(|g| g.iter().sum::<f64>() <= 0.0) {
                v.push("class priors must be nonnegative with a positive sum per group".into());
            }
        }
        if !(0.0..0.5).contains(&self.noise) {
            v.push(format!("noise must lie in [0, 0.5), got {}", self.noise));
        }
        v
    }
}

/// One generated example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, S, S]` in `[0, 1]`, quantized to 8 bits.
    pub image: Tensor<f32>,
    pub keypoints: KeypointSet,
    pub labels: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator_seed: u64,
    pub count: usize,
    pub config: SynthConfig,
    pub keypoint_names: Vec<String>,
    pub group_names: Vec<String>,
    /// `[group][class]` sample counts.
    pub class_histogram: Vec<Vec<usize>>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
/// One line of `samples.jsonl`.
pub struct SampleRecord {
    /// Image path relative to the dataset directory.
    pub file: String,
    /// Flattened `[x0, y0, x1, y1, ...]` in normalized coordinates.
    pub keypoints: Vec<f64>,
    pub labels: [usize; 3],
}

// ---------------------------------------------------------------------------
// textures

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Texture {
    Plain,
    HStripes,
    VStripes,
    Diagonal,
    Checker,
    Dots,
}

const DISTRACTOR_TEXTURES: [Texture; 5] =
    [Texture::HStripes, Texture::VStripes, Texture::Diagonal, Texture::Checker, Texture::Dots];

type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy)]
struct Paint {
    texture: Texture,
    a: Rgb,
    b: Rgb,
    phase: (i64, i64),
}

impl Paint {
    fn at(&self, px: i64, py: i64) -> Rgb {
        let (x, y) = (px + self.phase.0, py + self.phase.1);
        let on = match self.texture {
            Texture::Plain => true,
            Texture::HStripes => y.rem_euclid(4) < 2,
            Texture::VStripes => x.rem_euclid(4) < 2,
            Texture::Diagonal => (x + y).rem_euclid(4) < 2,
            Texture::Checker => (x.div_euclid(2) + y.div_euclid(2)).rem_euclid(2) == 0,
            Texture::Dots => x.rem_euclid(4) == 0 && y.rem_euclid(4) == 0 || x.rem_euclid(4) == 1 && y.rem_euclid(4) == 0,
        };
        if on {
            self.a
        } else {
            self.b
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn luminance(c: Rgb) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Two colors whose luminance differs by at least 0.35.
fn contrasting_pair(rng: &mut ChaCha8Rng) -> (Rgb, Rgb) {
    loop {
        let (a, b) = (random_color(rng), random_color(rng));
        if (luminance(a) - luminance(b)).abs() >= 0.35 {
            return (a, b);
        }
    }
}

fn paint(texture: Texture, rng: &mut ChaCha8Rng) -> Paint {
    let (a, b) = contrasting_pair(rng);
    Paint { texture, a, b, phase: (rng.random_range(0..4), rng.random_range(0..4)) }
}

// ---------------------------------------------------------------------------
// rasterization in normalized coordinates

struct Canvas {
    size: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self { size, px: vec![[0.0; 3]; size * size] }
    }

    /// Fills every pixel whose centre satisfies `inside` with `paint`.
    fn fill(&mut self, paint: &Paint, inside: impl Fn(f64, f64) -> bool) {
        let s = self.size as f64;
        for py in 0..self.size {
            for px in 0..self.size {
                let (x, y) = ((px as f64 + 0.5) / s, (py as f64 + 0.5) / s);
                if inside(x, y) {
                    self.px[py * self.size + px] = paint.at(px as i64, py as i64);
                }
            }
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

fn in_capsules(p: [f64; 2], segs: &[([f64; 2], [f64; 2])], radius: f64) -> bool {
    segs.iter().any(|&(a, b)| segment_distance(p, a, b) <= radius)
}

/// Convex polygon given in either winding.
fn in_convex(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

fn offset(p: [f64; 2], len: f64, angle: f64) -> [f64; 2] {
    // angle 0 points down the image
    [p[0] + len * angle.sin(), p[1] + len * angle.cos()]
}

// ---------------------------------------------------------------------------
// scenes

/// Figure pose in normalized image coordinates.
struct Pose {
    keypoints: Vec<[f64; 2]>,
    height: f64,
}

fn sample_human_pose(rng: &mut ChaCha8Rng, scale: f64) -> Pose {
    let h = scale;
    let lean = rng.random_range(-0.15..0.15);
    let neck = [0.0, 0.0];
    let head_top = offset(neck, 0.17 * h, PI + lean);
    let hip_c = offset(neck, 0.33 * h, lean);
    let (sw, hw) = (0.11 * h, 0.07 * h);
    let perp = |p: [f64; 2], d: f64| [p[0] + d * lean.cos(), p[1] - d * lean.sin()];
    let (r_sh, l_sh) = (perp(neck, -sw), perp(neck, sw));
    let (r_hip, l_hip) = (perp(hip_c, -hw), perp(hip_c, hw));
    let mut arm = |sh: [f64; 2], side: f64| {
        let upper = lean + side * rng.random_range(0.1..1.6);
        let elbow = offset(sh, 0.17 * h, upper);
        let wrist = offset(elbow, 0.15 * h, upper + side * rng.random_range(0.0..1.5));
        (elbow, wrist)
    };
    let (r_el, r_wr) = arm(r_sh, -1.0);
    let (l_el, l_wr) = arm(l_sh, 1.0);
    let mut leg = |hip: [f64; 2], side: f64| {
        let thigh = lean + side * rng.random_range(-0.1..0.45);
        let knee = offset(hip, 0.24 * h, thigh);
        let ankle = offset(knee, 0.24 * h, thigh - side * rng.random_range(0.0..0.6));
        (knee, ankle)
    };
    let (r_kn, r_an) = leg(r_hip, -1.0);
    let (l_kn, l_an) = leg(l_hip, 1.0);
    Pose {
        keypoints: vec![head_top, neck, r_sh, r_el, r_wr, l_sh, l_el, l_wr, r_hip, r_kn, r_an, l_hip, l_kn, l_an],
        height: h,
    }
}

fn sample_garment_pose(rng: &mut ChaCha8Rng, scale: f64) -> Pose {
    let h = scale;
    let half = rng.random_range(0.22..0.3) * h;
    let collar = rng.random_range(0.07..0.11) * h;
    let l_sh = [-half, 0.0];
    let r_sh = [half, 0.0];
    let l_col = [-collar, -0.02 * h];
    let r_col = [collar, -0.02 * h];
    let sleeve = rng.random_range(0.35..0.55) * h;
    let l_cuff = offset(l_sh, sleeve, -rng.random_range(0.3..1.2));
    let r_cuff = offset(r_sh, sleeve, rng.random_range(0.3..1.2));
    let body = rng.random_range(0.75..0.95) * h;
    let flare = rng.random_range(0.8..1.1);
    let l_hem = [-half * flare, body];
    let r_hem = [half * flare, body];
    Pose { keypoints: vec![l_col, r_col, l_sh, r_sh, l_cuff, r_cuff, l_hem, r_hem], height: h }
}

/// Translates the pose uniformly inside the margin box; `None` if it does not fit.
fn place(pose: &mut Pose, rng: &mut ChaCha8Rng, reach: f64) -> bool {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pose.keypoints {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut shift = [0.0; 2];
    for a in 0..2 {
        let (min_s, max_s) = (MARGIN + reach - lo[a], 1.0 - MARGIN - reach - hi[a]);
        if min_s > max_s {
            return false;
        }
        shift[a] = if min_s == max_s { min_s } else { rng.random_range(min_s..max_s) };
    }
    for p in &mut pose.keypoints {
        p[0] += shift[0];
        p[1] += shift[1];
    }
    pose.keypoints.iter().all(|p| p.iter().all(|&v| (MARGIN..=1.0 - MARGIN).contains(&v)))
}

fn draw_background(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (a, b) = (random_color(rng), random_color(rng));
    let vertical = rng.random_bool(0.5);
    let n = canvas.size;
    for py in 0..n {
        for px in 0..n {
            let t = if vertical { py } else { px } as f64 / (n - 1) as f64;
            canvas.px[py * n + px] = [0, 1, 2].map(|c| 0.25 * (a[c] * (1.0 - t) + b[c] * t) + 0.2);
        }
    }
}

/// Patches drawn away from the figure's keypoint bounding box when possible.
fn draw_distractors(canvas: &mut Canvas, rng: &mut ChaCha8Rng, count: usize, figure: ([f64; 2], [f64; 2])) {
    for _ in 0..count {
        let texture = DISTRACTOR_TEXTURES[rng.random_range(0..DISTRACTOR_TEXTURES.len())];
        let p = paint(texture, rng);
        let (w, h) = (rng.random_range(0.12..0.22), rng.random_range(0.12..0.22));
        let mut chosen = None;
        for _ in 0..50 {
            let (x, y) = (rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h));
            let overlaps = x < figure.1[0] && x + w > figure.0[0] && y < figure.1[1] && y + h > figure.0[1];
            if !overlaps {
                chosen = Some((x, y));
                break;
            }
        }
        let (x, y) = match chosen {
            Some(c) => c,
            None => (rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h)),
        };
        if rng.random_bool(0.5) {
            canvas.fill(&p, |px, py| px >= x && px < x + w && py >= y && py < y + h);
        } else {
            let (cx, cy, r) = (x + w / 2.0, y + h / 2.0, w.min(h) / 2.0);
            canvas.fill(&p, |px, py| (px - cx).powi(2) + (py - cy).powi(2) <= r * r);
        }
    }
}

fn skin(rng: &mut ChaCha8Rng) -> Paint {
    let base = rng.random_range(0.45..0.95);
    let c = [base, base * rng.random_range(0.7..0.85), base * rng.random_range(0.5..0.7)];
    Paint { texture: Texture::Plain, a: c, b: c, phase: (0, 0) }
}

fn draw_human(canvas: &mut Canvas, rng: &mut ChaCha8Rng, pose: &Pose, labels: [usize; 3]) {
    let k = &pose.keypoints;
    let h = pose.height;
    let body = skin(rng);
    let limb = 0.035 * h;
    let legs: Vec<([f64; 2], [f64; 2])> = vec![(k[8], k[9]), (k[9], k[10]), (k[11], k[12]), (k[12], k[13])];
    let leg_paint = match labels[2] {
        0 => paint(Texture::Plain, rng),
        1 => paint(Texture::HStripes, rng),
        2 => paint(Texture::Checker, rng),
        _ => paint(Texture::Dots, rng),
    };
    canvas.fill(&leg_paint, |x, y| in_capsules([x, y], &legs, 1.3 * limb));

    let arms: Vec<([f64; 2], [f64; 2])> = vec![(k[2], k[3]), (k[3], k[4]), (k[5], k[6]), (k[6], k[7])];
    canvas.fill(&body, |x, y| in_capsules([x, y], &arms, limb));

    let widen = |a: [f64; 2], b: [f64; 2], t: f64| lerp(b, a, 1.0 + t);
    let torso = [widen(k[5], k[2], 0.1), widen(k[2], k[5], 0.1), widen(k[8], k[11], 0.25), widen(k[11], k[8], 0.25)];
    let torso_paint = match labels[1] {
        0 => paint(Texture::Plain, rng),
        1 => paint(Texture::HStripes, rng),
        2 => paint(Texture::VStripes, rng),
        _ => paint(Texture::Diagonal, rng),
    };
    canvas.fill(&torso_paint, |x, y| in_convex([x, y], &torso));

    let centre = lerp(k[0], k[1], 0.5);
    let r = 0.5 * dist(k[0], k[1]);
    canvas.fill(&body, |x, y| (x - centre[0]).powi(2) + (y - centre[1]).powi(2) <= r * r);
    match labels[0] {
        1 => {
            // striped cap over the upper half plus a brim
            let cap = paint(Texture::HStripes, rng);
            let up = [(k[0][0] - k[1][0]) / (2.0 * r), (k[0][1] - k[1][1]) / (2.0 * r)];
            canvas.fill(&cap, |x, y| {
                let d = [x - centre[0], y - centre[1]];
                let along = d[0] * up[0] + d[1] * up[1];
                let norm2 = d[0] * d[0] + d[1] * d[1];
                (norm2 <= (1.15 * r).powi(2) && along >= 0.05 * r) || (along.abs() < 0.2 * r && norm2 <= (1.6 * r).powi(2))
            });
        }
        2 => {
            let helmet = paint(Texture::Checker, rng);
            canvas.fill(&helmet, |x, y| (x - centre[0]).powi(2) + (y - centre[1]).powi(2) <= (1.25 * r).powi(2));
        }
        _ => {}
    }
}

fn draw_garment(canvas: &mut Canvas, rng: &mut ChaCha8Rng, pose: &Pose, labels: [usize; 3]) {
    let k = &pose.keypoints;
    let h = pose.height;
    let cloth = paint(Texture::Plain, rng);
    let textures = [Texture::Plain, Texture::HStripes, Texture::Checker, Texture::Dots];
    let sleeve_paint = paint(textures[labels[2]], rng);
    let sleeve_r = 0.07 * h;
    let sleeves = [(k[2], k[4]), (k[3], k[5])];
    canvas.fill(&sleeve_paint, |x, y| in_capsules([x, y], &sleeves, sleeve_r));
    let body = [k[2], k[3], k[7], k[6]];
    canvas.fill(&cloth, |x, y| in_convex([x, y], &body));

    let collar_paint = paint([Texture::Plain, Texture::VStripes, Texture::Checker, Texture::Diagonal][labels[0]], rng);
    let dip = [(k[0][0] + k[1][0]) / 2.0, k[0][1] + 0.12 * h];
    let collar = [k[0], k[1], dip];
    let band = 0.04 * h;
    if labels[0] == 0 {
        let neck = paint(Texture::Plain, rng);
        canvas.fill(&neck, |x, y| in_convex([x, y], &collar));
    } else {
        let segs = [(k[0], dip), (k[1], dip), (k[0], k[1])];
        canvas.fill(&collar_paint, |x, y| in_capsules([x, y], &segs, band));
    }

    let top = dip;
    let bottom = lerp(k[6], k[7], 0.5);
    let placket = 0.025 * h;
    match labels[1] {
        0 => {}
        1 => {
            let p = paint(Texture::Plain, rng);
            canvas.fill(&p, |x, y| segment_distance([x, y], top, bottom) <= placket);
        }
        2 => {
            let p = paint(Texture::Dots, rng);
            canvas.fill(&p, |x, y| segment_distance([x, y], top, bottom) <= 1.5 * placket);
        }
        _ => {
            let p = paint(Texture::HStripes, rng);
            canvas.fill(&p, |x, y| segment_distance([x, y], top, bottom) <= 1.5 * placket);
        }
    }
}

fn sample_class(rng: &mut ChaCha8Rng, classes: usize, prior: Option<&[f64]>) -> usize {
    match prior {
        None => rng.random_range(0..classes),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut u = rng.random_range(0.0..total);
            for (i, &p) in w.iter().enumerate() {
                if u < p {
                    return i;
                }
                u -= p;
            }
            classes - 1
        }
    }
}

/// Renders sample `index` of the stream seeded by `seed`.
pub fn render(seed: u64, index: u64, config: &SynthConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let counts = config.mode.class_counts();
    let labels: [usize; 3] =
        std::array::from_fn(|g| sample_class(&mut rng, counts[g], config.class_priors.as_ref().map(|p| p[g].as_slice())));
    let mut pose = None;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let scale = rng.random_range(config.scale_range[0]..=config.scale_range[1]);
        let (mut p, reach) = match config.mode {
            DatasetMode::Mpii => (sample_human_pose(&mut rng, scale), 0.0),
            DatasetMode::Garment => (sample_garment_pose(&mut rng, scale), 0.0),
        };
        if place(&mut p, &mut rng, reach) {
            pose = Some(p);
            break;
        }
    }
    let pose = pose.ok_or_else(|| {
        Error::Generation(format!("sample {index}: no valid placement after {MAX_PLACEMENT_ATTEMPTS} attempts"))
    })?;

    let mut canvas = Canvas::new(config.image_size);
    draw_background(&mut canvas, &mut rng);
    let (mut lo, mut hi) = ([1.0f64; 2], [0.0f64; 2]);
    for p in &pose.keypoints {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a] - 0.05);
            hi[a] = hi[a].max(p[a] + 0.05);
        }
    }
    let n_distractors = rng.random_range(config.distractors[0]..=config.distractors[1]);
    draw_distractors(&mut canvas, &mut rng, n_distractors, (lo, hi));
    match config.mode {
        DatasetMode::Mpii => draw_human(&mut canvas, &mut rng, &pose, labels),
        DatasetMode::Garment => draw_garment(&mut canvas, &mut rng, &pose, labels),
    }

    let n = config.image_size;
    let mut bytes = vec![0u8; 3 * n * n];
    for (i, px) in canvas.px.iter().enumerate() {
        for c in 0..3 {
            let noise = if config.noise > 0.0 { rng.random_range(-config.noise..config.noise) } else { 0.0 };
            bytes[c * n * n + i] = ((px[c] + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(Sample { image: image_from_planar(&bytes, n), keypoints: KeypointSet::new(pose.keypoints), labels })
}

fn image_from_planar(bytes: &[u8], n: usize) -> Tensor<f32> {
    Tensor::from_vec_unchecked(vec![3, n, n], bytes.iter().map(|&b| b as f32 / 255.0).collect())
}

fn planar_to_rgb(image: &Tensor<f32>) -> Vec<u8> {
    let n = image.dim(1) * image.dim(2);
    let d = image.data();
    (0..n).flat_map(|i| (0..3).map(move |c| (d[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8)).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_png(rgb: &[u8], n: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(encoder, rgb, n as u32, n as u32, image::ExtendedColorType::Rgb8)?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(bytes).map_err(Error::io(path))
}

/// Renders `n` samples into `out` and writes the manifest last.
pub fn generate(seed: u64, n: usize, config: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    let v = config.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let img_dir = out.join("img");
    fs::create_dir_all(&img_dir).map_err(Error::io(&img_dir))?;
    let counts = config.mode.class_counts();
    let mut histogram: Vec<Vec<usize>> = counts.iter().map(|&c| vec![0; c]).collect();
    let mut files = Vec::with_capacity(n + 1);
    let mut jsonl = String::new();
    for i in 0..n {
        let sample = render(seed, i as u64, config)?;
        let name = format!("img/{i:06}.png");
        let png = encode_png(&planar_to_rgb(&sample.image), config.image_size)?;
        write_file(&out.join(&name), &png)?;
        files.push(FileEntry { path: name.clone(), sha256: sha256_hex(&png) });
        for (g, &l) in sample.labels.iter().enumerate() {
            histogram[g][l] += 1;
        }
        let record = SampleRecord { file: name, keypoints: sample.keypoints.to_flat(), labels: sample.labels };
        jsonl.push_str(&serde_json::to_string(&record)?);
        jsonl.push('\n');
    }
    write_file(&out.join("samples.jsonl"), jsonl.as_bytes())?;
    files.push(FileEntry { path: "samples.jsonl".into(), sha256: sha256_hex(jsonl.as_bytes()) });
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        generator_seed: seed,
        count: n,
        config: config.clone(),
        keypoint_names: config.mode.keypoint_names(),
        group_names: config.mode.group_names().iter().map(|s| s.to_string()).collect(),
        class_histogram: histogram,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&out.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

/// A loaded dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

/// Stacked tensors of one minibatch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    /// `[B, 2N]`.
    pub keypoints: Tensor<T>,
    /// `[group][sample]`.
    pub labels: Vec<Vec<usize>>,
}

fn read_verified(root: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    let path = root.join(&entry.path);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Integrity { path, reason: "checksum mismatch".into() });
    }
    Ok(bytes)
}

/// Accepts a dataset directory or its `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

impl Dataset {
    /// Loads and checksum-verifies every file listed in the manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let root = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&mpath).map_err(Error::io(&mpath))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Integrity { path: mpath.clone(), reason: format!("unreadable manifest: {e}") })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Integrity { path: mpath, reason: format!("unsupported version {}", manifest.version) });
        }
        let jsonl_entry = manifest
            .files
            .iter()
            .find(|f| f.path == "samples.jsonl")
            .ok_or_else(|| Error::Integrity { path: mpath.clone(), reason: "samples.jsonl is not listed".into() })?;
        let jsonl = read_verified(&root, jsonl_entry)?;
        let jsonl_path = root.join("samples.jsonl");
        let text = String::from_utf8(jsonl)
            .map_err(|_| Error::Integrity { path: jsonl_path.clone(), reason: "not UTF-8".into() })?;
        let n = manifest.config.image_size;
        let nk = manifest.config.mode.num_keypoints();
        let counts = manifest.config.mode.class_counts();
        let mut samples = Vec::with_capacity(manifest.count);
        for (line_no, line) in text.lines().enumerate() {
            let bad = |reason: String| Error::Integrity { path: jsonl_path.clone(), reason: format!("line {}: {reason}", line_no + 1) };
            let rec: SampleRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if rec.keypoints.len() != 2 * nk {
                return Err(bad(format!("{} keypoint values, expected {}", rec.keypoints.len(), 2 * nk)));
            }
            if rec.labels.iter().zip(counts).any(|(&l, c)| l >= c) {
                return Err(bad(format!("labels {:?} out of range", rec.labels)));
            }
            let entry = manifest
                .files
                .iter()
                .find(|f| f.path == rec.file)
                .ok_or_else(|| bad(format!("{} is not listed in the manifest", rec.file)))?;
            let png = read_verified(&root, entry)?;
            let img = image::load_from_memory_with_format(&png, image::ImageFormat::Png)
                .map_err(|e| Error::Integrity { path: root.join(&rec.file), reason: e.to_string() })?
                .to_rgb8();
            if img.width() as usize != n || img.height() as usize != n {
                return Err(Error::Integrity { path: root.join(&rec.file), reason: "unexpected image size".into() });
            }
            let rgb = img.into_raw();
            let planar: Vec<u8> = (0..3).flat_map(|c| rgb.iter().skip(c).step_by(3).copied().collect::<Vec<_>>()).collect();
            samples.push(Sample {
                image: image_from_planar(&planar, n),
                keypoints: KeypointSet::from_flat(&rec.keypoints)?,
                labels: rec.labels,
            });
        }
        if samples.len() != manifest.count {
            return Err(Error::Integrity {
                path: jsonl_path,
                reason: format!("{} records, manifest says {}", samples.len(), manifest.count),
            });
        }
        Ok(Self { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mode(&self) -> DatasetMode {
        self.manifest.config.mode
    }

    /// A permutation of the sample indices determined by `seed`.
    pub fn shuffled_order(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Batch<T> {
        let first = &self.samples[indices[0]];
        let img_len = first.image.len();
        let nk = first.keypoints.len();
        let mut images = Vec::with_capacity(indices.len() * img_len);
        let mut keypoints = Vec::with_capacity(indices.len() * 2 * nk);
        let mut labels: Vec<Vec<usize>> = (0..3).map(|_| Vec::with_capacity(indices.len())).collect();
        for &i in indices {
            let s = &self.samples[i];
            images.extend(s.image.data().iter().map(|&v| T::of(v as f64)));
            keypoints.extend(s.keypoints.to_flat().into_iter().map(T::of));
            for (g, &l) in s.labels.iter().enumerate() {
                labels[g].push(l);
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(first.image.shape());
        Batch {
            images: Tensor::from_vec_unchecked(shape, images),
            keypoints: Tensor::from_vec_unchecked(vec![indices.len(), 2 * nk], keypoints),
            labels,
        }
    }

    /// Consecutive batches over `order`; the last one may be short.
    pub fn batches<'a, T: Scalar>(&'a self, order: &'a [usize], size: usize) -> impl Iterator<Item = Batch<T>> + 'a {
        order.chunks(size.max(1)).map(move |c| self.batch(c))
    }
}

/// Reads an RGB PNG into a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io { path: path.to_path_buf(), source: io },
        other => Error::Input(format!("{}: {other}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let data = (0..3).flat_map(|c| raw.iter().skip(c).step_by(3).map(|&b| b as f32 / 255.0).collect::<Vec<_>>()).collect();
    Ok(Tensor::from_vec_unchecked(vec![3, h, w], data))
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as an RGB PNG.
pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (image.dim(1), image.dim(2));
    let n = h * w;
    let d = image.data();
    let rgb: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |c| (d[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8)).collect();
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(encoder, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypoints_stay_inside_margin() {
        let cfg = SynthConfig::new(DatasetMode::Mpii);
        for i in 0..10 {
            let s = render(7, i, &cfg).unwrap();
            assert_eq!(s.keypoints.len(), 14);
            for p in s.keypoints.points() {
                assert!(p.iter().all(|&v| (0.05..=0.95).contains(&v)), "{p:?}");
            }
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = SynthConfig::new(DatasetMode::Garment);
        assert_eq!(render(3, 5, &cfg).unwrap(), render(3, 5, &cfg).unwrap());
        assert_ne!(render(3, 5, &cfg).unwrap().image, render(3, 6, &cfg).unwrap().image);
    }

    #[test]
    fn convex_membership() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(in_convex([0.5, 0.5], &sq));
        assert!(!in_convex([1.5, 0.5], &sq));
        let rev: Vec<_> = sq.iter().rev().copied().collect();
        assert!(in_convex([0.5, 0.5], &rev));
    }

    #[test]
    fn unsatisfiable_placement_is_a_generation_error() {
        let mut cfg = SynthConfig::new(DatasetMode::Mpii);
        cfg.scale_range = [1.0, 1.0];
        assert!(matches!(render(1, 0, &cfg), Err(Error::Generation(_))));
    }
}
