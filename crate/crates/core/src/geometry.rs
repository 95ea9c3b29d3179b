//! Part boxes from keypoints.
//!
//! A part is a subset of keypoints. Its initial box is the `s`-enlarged
//! bounding box of those keypoints, centred on them:
//!
//! ```text
//! w = s (max_x - min_x)          h = s (max_y - min_y)
//! x = (min_x + max_x - w) / 2    y = (min_y + max_y - h) / 2
//! ```
//!
//! Learned offsets rescale and shift it to `[w (1 + dw), h (1 + dh), x + dx,
//! y + dy]`, and the result becomes the axis-aligned affine transform
//! `[[w, 0, x], [0, h, y]]` consumed by the bilinear sampler. All coordinates
//! are normalized image units with the origin at the upper-left corner.
//!
//! The backward pass through the min/max works like max pooling: the forward
//! call records which keypoints were extremal and only those receive
//! gradient.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower bound on box width and height.
pub const MIN_EXTENT: f64 = 0.05;
pub const DEFAULT_SCALE: f64 = 1.5;
/// Range the adjusted box corners are clipped to before sampling.
pub const CLIP_RANGE: (f64, f64) = (-0.25, 1.25);
/// Clamp applied to the raw log-scale outputs before exponentiation.
pub const LOG_SCALE_LIMIT: f64 = 2.0;
/// Clamp applied to the raw translation outputs.
pub const SHIFT_LIMIT: f64 = 1.0;

/// Keypoints in normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct KeypointSet {
    points: Vec<[f64; 2]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    /// From interleaved `x0, y0, x1, y1, ...`.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::Shape(format!("odd keypoint coordinate count {}", coords.len())));
        }
        Ok(Self { points: coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect() })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| *p).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.points
    }
}

fn default_scale() -> f64 {
    DEFAULT_SCALE
}

/// A named keypoint subset with its enlargement factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PartDefinition {
    pub name: String,
    pub keypoint_indices: Vec<usize>,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl PartDefinition {
    pub fn new(name: impl Into<String>, keypoint_indices: Vec<usize>, scale: f64) -> Self {
        Self { name: name.into(), keypoint_indices, scale }
    }

    /// Collects every violated invariant for `num_keypoints` keypoints.
    pub fn violations(&self, num_keypoints: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.keypoint_indices.len() < 2 {
            v.push(format!("part `{}` needs at least 2 keypoints", self.name));
        }
        if let Some(&bad) = self.keypoint_indices.iter().find(|&&i| i >= num_keypoints) {
            v.push(format!("part `{}` references keypoint {bad} of {num_keypoints}", self.name));
        }
        let mut sorted = self.keypoint_indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            v.push(format!("part `{}` repeats a keypoint index", self.name));
        }
        if !(self.scale > 1.0 && self.scale.is_finite()) {
            v.push(format!("part `{}` scale must exceed 1, got {}", self.name, self.scale));
        }
        v
    }

    pub fn validate(&self, num_keypoints: usize) -> Result<()> {
        let v = self.violations(num_keypoints);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Parses and validates a JSON array of part definitions.
pub fn parse_parts(json: &str, num_keypoints: usize) -> Result<Vec<PartDefinition>> {
    let parts: Vec<PartDefinition> = serde_json::from_str(json)?;
    let violations: Vec<String> = parts.iter().flat_map(|p| p.violations(num_keypoints)).collect();
    if parts.is_empty() {
        return Err(Error::config("part list is empty"));
    }
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    Ok(parts)
}

pub fn load_parts(path: &Path, num_keypoints: usize) -> Result<Vec<PartDefinition>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_parts(&text, num_keypoints)
}

/// `[w, h, x, y]` with `(x, y)` the upper-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BoundingBox {
    pub w: f64,
    pub h: f64,
    pub x: f64,
    pub y: f64,
}

impl BoundingBox {
    pub fn new(w: f64, h: f64, x: f64, y: f64) -> Self {
        Self { w, h, x, y }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.h, self.x, self.y]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { w: a[0], h: a[1], x: a[2], y: a[3] }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self { w: s[0], h: s[1], x: s[2], y: s[3] }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x && p[0] <= self.x + self.w && p[1] >= self.y && p[1] <= self.y + self.h
    }

    /// Longer side over shorter side.
    pub fn elongation(&self) -> f64 {
        self.w.max(self.h) / self.w.min(self.h)
    }
}

/// Learned `[dw, dh, dx, dy]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxAdjustment {
    pub dw: f64,
    pub dh: f64,
    pub dx: f64,
    pub dy: f64,
}

impl BoxAdjustment {
    pub fn to_array(self) -> [f64; 4] {
        [self.dw, self.dh, self.dx, self.dy]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self { dw: s[0], dh: s[1], dx: s[2], dy: s[3] }
    }
}

/// Row-major 2x3 affine matrix mapping target coordinates to source ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTheta(pub [[f64; 3]; 2]);

impl AffineTheta {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    pub fn to_array(self) -> [f64; 6] {
        let m = self.0;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self([[s[0], s[1], s[2]], [s[3], s[4], s[5]]])
    }

    /// `theta * [x, y, 1]^T`.
    pub fn apply(&self, x: f64, y: f64) -> [f64; 2] {
        let m = self.0;
        [m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RatioLossConfig {
    /// Shorter side should be at least `alpha` times the longer one.
    pub alpha: f64,
    pub weight: f64,
}

impl Default for RatioLossConfig {
    fn default() -> Self {
        Self { alpha: 0.6, weight: 0.1 }
    }
}

impl RatioLossConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            v.push(format!("ratio alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.weight.is_nan() || self.weight < 0.0 {
            v.push(format!("ratio loss weight must be nonnegative, got {}", self.weight));
        }
        v
    }
}

/// Which keypoints were extremal in the forward pass of [`initial_box`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingRecord {
    pub min_x: usize,
    pub max_x: usize,
    pub min_y: usize,
    pub max_y: usize,
    pub(crate) scale_bits: u64,
    pub w_floored: bool,
    pub h_floored: bool,
}

impl RoutingRecord {
    pub fn scale(&self) -> f64 {
        f64::from_bits(self.scale_bits)
    }

    pub fn extremal(&self) -> [usize; 4] {
        [self.min_x, self.max_x, self.min_y, self.max_y]
    }
}

/// Enlarged keypoint box of one part. Ties go to the lowest keypoint index.
pub fn initial_box(kp: &KeypointSet, part: &PartDefinition) -> Result<(BoundingBox, RoutingRecord)> {
    if part.keypoint_indices.is_empty() {
        return Err(Error::config(format!("part `{}` has no keypoints", part.name)));
    }
    if let Some(&bad) = part.keypoint_indices.iter().find(|&&i| i >= kp.len()) {
        return Err(Error::config(format!(
            "part `{}` references keypoint {bad} but only {} exist",
            part.name,
            kp.len()
        )));
    }
    let first = part.keypoint_indices[0];
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (first, first, first, first);
    for &i in &part.keypoint_indices[1..] {
        let [x, y] = kp.point(i);
        let better = |cur: usize, cond: bool, tie: bool| cond || (tie && i < cur);
        if better(min_x, x < kp.point(min_x)[0], x == kp.point(min_x)[0]) {
            min_x = i;
        }
        if better(max_x, x > kp.point(max_x)[0], x == kp.point(max_x)[0]) {
            max_x = i;
        }
        if better(min_y, y < kp.point(min_y)[1], y == kp.point(min_y)[1]) {
            min_y = i;
        }
        if better(max_y, y > kp.point(max_y)[1], y == kp.point(max_y)[1]) {
            max_y = i;
        }
    }
    let s = part.scale;
    let (lo_x, hi_x) = (kp.point(min_x)[0], kp.point(max_x)[0]);
    let (lo_y, hi_y) = (kp.point(min_y)[1], kp.point(max_y)[1]);
    let raw_w = s * (hi_x - lo_x);
    let raw_h = s * (hi_y - lo_y);
    let w_floored = raw_w < MIN_EXTENT;
    let h_floored = raw_h < MIN_EXTENT;
    let w = if w_floored { MIN_EXTENT } else { raw_w };
    let h = if h_floored { MIN_EXTENT } else { raw_h };
    let bbox = BoundingBox { w, h, x: 0.5 * (lo_x + hi_x - w), y: 0.5 * (lo_y + hi_y - h) };
    let routing = RoutingRecord {
        min_x,
        max_x,
        min_y,
        max_y,
        scale_bits: s.to_bits(),
        w_floored,
        h_floored,
    };
    Ok((bbox, routing))
}

/// Gradient of [`initial_box`] with respect to every keypoint; only the
/// recorded extremal keypoints can be nonzero.
pub fn initial_box_backward(grad: [f64; 4], routing: &RoutingRecord, num_keypoints: usize) -> Vec<[f64; 2]> {
    let mut out = vec![[0.0; 2]; num_keypoints];
    let s = routing.scale();
    let [gw, gh, gx, gy] = grad;
    // d extent / d (max, min) and d corner / d (min, max)
    let axis = |g_ext: f64, g_corner: f64, floored: bool| -> (f64, f64) {
        if floored {
            (0.5 * g_corner, 0.5 * g_corner)
        } else {
            (-s * g_ext + 0.5 * (1.0 + s) * g_corner, s * g_ext + 0.5 * (1.0 - s) * g_corner)
        }
    };
    let (g_min_x, g_max_x) = axis(gw, gx, routing.w_floored);
    let (g_min_y, g_max_y) = axis(gh, gy, routing.h_floored);
    out[routing.min_x][0] += g_min_x;
    out[routing.max_x][0] += g_max_x;
    out[routing.min_y][1] += g_min_y;
    out[routing.max_y][1] += g_max_y;
    out
}

/// Maps raw regressor outputs to an adjustment with positive scale factors:
/// `1 + dw = exp(clamp(u, -2, 2))`, `dx = clamp(u, -1, 1)`.
pub fn stabilize(raw: [f64; 4]) -> BoxAdjustment {
    let scale = |u: f64| u.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp() - 1.0;
    let shift = |u: f64| u.clamp(-SHIFT_LIMIT, SHIFT_LIMIT);
    BoxAdjustment { dw: scale(raw[0]), dh: scale(raw[1]), dx: shift(raw[2]), dy: shift(raw[3]) }
}

pub fn stabilize_backward(raw: [f64; 4], grad: [f64; 4]) -> [f64; 4] {
    let scale = |u: f64, g: f64| if u.abs() < LOG_SCALE_LIMIT { g * u.exp() } else { 0.0 };
    let shift = |u: f64, g: f64| if u.abs() < SHIFT_LIMIT { g } else { 0.0 };
    [
        scale(raw[0], grad[0]),
        scale(raw[1], grad[1]),
        shift(raw[2], grad[2]),
        shift(raw[3], grad[3]),
    ]
}

/// `[w (1 + dw), h (1 + dh), x + dx, y + dy]`.
pub fn apply_adjustment(b: BoundingBox, adj: BoxAdjustment) -> BoundingBox {
    BoundingBox { w: b.w * (1.0 + adj.dw), h: b.h * (1.0 + adj.dh), x: b.x + adj.dx, y: b.y + adj.dy }
}

/// Returns `(d box, d adjustment)`.
pub fn apply_adjustment_backward(b: BoundingBox, adj: BoxAdjustment, grad: [f64; 4]) -> ([f64; 4], [f64; 4]) {
    let [gw, gh, gx, gy] = grad;
    ([gw * (1.0 + adj.dw), gh * (1.0 + adj.dh), gx, gy], [gw * b.w, gh * b.h, gx, gy])
}

pub fn box_to_theta(b: BoundingBox) -> AffineTheta {
    AffineTheta([[b.w, 0.0, b.x], [0.0, b.h, b.y]])
}

pub fn box_to_theta_backward(grad: [f64; 6]) -> [f64; 4] {
    [grad[0], grad[4], grad[2], grad[5]]
}

/// Clips the box corners to `[lo, hi]`; the width and height are floored at
/// [`MIN_EXTENT`].
pub fn clip_box(b: BoundingBox, lo: f64, hi: f64) -> BoundingBox {
    let axis = |start: f64, extent: f64| -> (f64, f64) {
        let end = start + extent;
        if start >= lo && end <= hi {
            // untouched boxes keep their extent bit for bit
            return (start, extent.max(MIN_EXTENT));
        }
        let (s0, s1) = (start.clamp(lo, hi), end.clamp(lo, hi));
        (s0, (s1 - s0).max(MIN_EXTENT))
    };
    let (x, w) = axis(b.x, b.w);
    let (y, h) = axis(b.y, b.h);
    BoundingBox { w, h, x, y }
}

pub fn clip_box_backward(b: BoundingBox, lo: f64, hi: f64, grad: [f64; 4]) -> [f64; 4] {
    let inside = |v: f64| v > lo && v < hi;
    let axis = |start: f64, extent: f64, g_ext: f64, g_start: f64| -> (f64, f64) {
        let (s0, s1) = (start.clamp(lo, hi), (start + extent).clamp(lo, hi));
        let floored = s1 - s0 < MIN_EXTENT;
        let (g0, g1) = if floored { (g_start, 0.0) } else { (g_start - g_ext, g_ext) };
        let g0 = if inside(start) { g0 } else { 0.0 };
        let g1 = if inside(start + extent) { g1 } else { 0.0 };
        (g1, g0 + g1)
    };
    let (gw, gx) = axis(b.x, b.w, grad[0], grad[2]);
    let (gh, gy) = axis(b.y, b.h, grad[1], grad[3]);
    [gw, gh, gx, gy]
}

/// `0.5 * max(0, alpha * longer - shorter)^2`.
pub fn aspect_ratio_loss(b: BoundingBox, alpha: f64) -> f64 {
    let gap = alpha * b.w.max(b.h) - b.w.min(b.h);
    if gap > 0.0 {
        0.5 * gap * gap
    } else {
        0.0
    }
}

pub fn aspect_ratio_loss_backward(b: BoundingBox, alpha: f64, grad: f64) -> [f64; 4] {
    let gap = alpha * b.w.max(b.h) - b.w.min(b.h);
    if gap <= 0.0 {
        return [0.0; 4];
    }
    let (g_long, g_short) = (grad * gap * alpha, -grad * gap);
    if b.w >= b.h {
        [g_long, g_short, 0.0, 0.0]
    } else {
        [g_short, g_long, 0.0, 0.0]
    }
}

// ---------------------------------------------------------------------------
// batched tape operations on [B, 4] box rows

fn rows<T: Scalar>(t: &Tensor<T>, width: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    t.data().chunks_exact(width).map(|r| r.iter().map(|v| v.as_f64()).collect())
}

fn tensor_from_rows<T: Scalar>(batch: usize, width: usize, data: Vec<f64>) -> Tensor<T> {
    Tensor::from_vec_unchecked(vec![batch, width], data.into_iter().map(T::of).collect())
}

fn check_width<T: Scalar>(op: &'static str, t: &Tensor<T>, width: usize) -> Result<usize> {
    if t.rank() != 2 || t.dim(1) != width {
        return Err(Error::Dimension { op, lhs: t.shape().to_vec(), rhs: vec![t.shape()[0], width] });
    }
    Ok(t.dim(0))
}

struct InitialBoxBackward {
    routing: Vec<RoutingRecord>,
    num_keypoints: usize,
}

impl<T: Scalar> Backward<T> for InitialBoxBackward {
    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.routing.len() * self.num_keypoints * 2);
        for (g, r) in rows(grad, 4).zip(&self.routing) {
            let kp = initial_box_backward([g[0], g[1], g[2], g[3]], r, self.num_keypoints);
            out.extend(kp.into_iter().flatten());
        }
        vec![Some(tensor_from_rows(self.routing.len(), self.num_keypoints * 2, out))]
    }
}

/// Initial boxes `[B, 4]` for one part from keypoint rows `[B, 2N]`.
pub fn initial_boxes<T: Scalar>(
    tape: &mut Tape<T>,
    keypoints: Var,
    part: &PartDefinition,
) -> Result<(Var, Vec<RoutingRecord>)> {
    let kv = tape.value(keypoints);
    if kv.rank() != 2 || !kv.dim(1).is_multiple_of(2) {
        return Err(Error::Shape(format!("keypoint rows must be [B, 2N], got {:?}", kv.shape())));
    }
    let (batch, n) = (kv.dim(0), kv.dim(1) / 2);
    let mut out = Vec::with_capacity(batch * 4);
    let mut routing = Vec::with_capacity(batch);
    for row in rows(kv, 2 * n) {
        let (b, r) = initial_box(&KeypointSet::from_flat(&row)?, part)?;
        out.extend(b.to_array());
        routing.push(r);
    }
    let value = tensor_from_rows(batch, 4, out);
    let var = tape.push(value, &[keypoints], InitialBoxBackward { routing: routing.clone(), num_keypoints: n });
    Ok((var, routing))
}

struct StabilizeBackward;

impl<T: Scalar> Backward<T> for StabilizeBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let out = rows(inputs[0], 4)
            .zip(rows(grad, 4))
            .flat_map(|(u, g)| stabilize_backward([u[0], u[1], u[2], u[3]], [g[0], g[1], g[2], g[3]]))
            .collect();
        vec![Some(tensor_from_rows(inputs[0].dim(0), 4, out))]
    }
}

/// Raw `[B, 4]` regressor outputs to stabilized adjustments.
pub fn stabilize_rows<T: Scalar>(tape: &mut Tape<T>, raw: Var) -> Result<Var> {
    let batch = check_width("stabilize", tape.value(raw), 4)?;
    let out = rows(tape.value(raw), 4).flat_map(|u| stabilize([u[0], u[1], u[2], u[3]]).to_array()).collect();
    Ok(tape.push(tensor_from_rows(batch, 4, out), &[raw], StabilizeBackward))
}

struct AdjustBackward;

impl<T: Scalar> Backward<T> for AdjustBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let batch = inputs[0].dim(0);
        let (mut gb, mut ga) = (Vec::with_capacity(batch * 4), Vec::with_capacity(batch * 4));
        for ((b, a), g) in rows(inputs[0], 4).zip(rows(inputs[1], 4)).zip(rows(grad, 4)) {
            let (db, da) = apply_adjustment_backward(
                BoundingBox::from_slice(&b),
                BoxAdjustment::from_slice(&a),
                [g[0], g[1], g[2], g[3]],
            );
            gb.extend(db);
            ga.extend(da);
        }
        vec![Some(tensor_from_rows(batch, 4, gb)), Some(tensor_from_rows(batch, 4, ga))]
    }
}

/// Applies adjustment rows `[B, 4]` to box rows `[B, 4]`.
pub fn adjust_boxes<T: Scalar>(tape: &mut Tape<T>, boxes: Var, adjustments: Var) -> Result<Var> {
    let batch = check_width("adjust_boxes", tape.value(boxes), 4)?;
    if check_width("adjust_boxes", tape.value(adjustments), 4)? != batch {
        return Err(Error::Dimension {
            op: "adjust_boxes",
            lhs: tape.value(boxes).shape().to_vec(),
            rhs: tape.value(adjustments).shape().to_vec(),
        });
    }
    let out = rows(tape.value(boxes), 4)
        .zip(rows(tape.value(adjustments), 4))
        .flat_map(|(b, a)| apply_adjustment(BoundingBox::from_slice(&b), BoxAdjustment::from_slice(&a)).to_array())
        .collect();
    Ok(tape.push(tensor_from_rows(batch, 4, out), &[boxes, adjustments], AdjustBackward))
}

struct ClipBackward {
    lo: f64,
    hi: f64,
}

impl<T: Scalar> Backward<T> for ClipBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let out = rows(inputs[0], 4)
            .zip(rows(grad, 4))
            .flat_map(|(b, g)| clip_box_backward(BoundingBox::from_slice(&b), self.lo, self.hi, [g[0], g[1], g[2], g[3]]))
            .collect();
        vec![Some(tensor_from_rows(inputs[0].dim(0), 4, out))]
    }
}

pub fn clip_boxes<T: Scalar>(tape: &mut Tape<T>, boxes: Var, lo: f64, hi: f64) -> Result<Var> {
    let batch = check_width("clip_boxes", tape.value(boxes), 4)?;
    let out = rows(tape.value(boxes), 4).flat_map(|b| clip_box(BoundingBox::from_slice(&b), lo, hi).to_array()).collect();
    Ok(tape.push(tensor_from_rows(batch, 4, out), &[boxes], ClipBackward { lo, hi }))
}

struct ThetaBackward;

impl<T: Scalar> Backward<T> for ThetaBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let out = rows(grad, 6)
            .flat_map(|g| box_to_theta_backward([g[0], g[1], g[2], g[3], g[4], g[5]]))
            .collect();
        vec![Some(tensor_from_rows(inputs[0].dim(0), 4, out))]
    }
}

/// Box rows `[B, 4]` to flattened theta rows `[B, 6]`.
pub fn boxes_to_theta<T: Scalar>(tape: &mut Tape<T>, boxes: Var) -> Result<Var> {
    let batch = check_width("boxes_to_theta", tape.value(boxes), 4)?;
    let out = rows(tape.value(boxes), 4).flat_map(|b| box_to_theta(BoundingBox::from_slice(&b)).to_array()).collect();
    Ok(tape.push(tensor_from_rows(batch, 6, out), &[boxes], ThetaBackward))
}

struct RatioBackward {
    alpha: f64,
}

impl<T: Scalar> Backward<T> for RatioBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let batch = inputs[0].dim(0);
        let g = grad.item().as_f64() / batch as f64;
        let out = rows(inputs[0], 4)
            .flat_map(|b| aspect_ratio_loss_backward(BoundingBox::from_slice(&b), self.alpha, g))
            .collect();
        vec![Some(tensor_from_rows(batch, 4, out))]
    }
}

/// Batch mean of [`aspect_ratio_loss`].
pub fn aspect_ratio_loss_rows<T: Scalar>(tape: &mut Tape<T>, boxes: Var, alpha: f64) -> Result<Var> {
    let batch = check_width("aspect_ratio_loss", tape.value(boxes), 4)?;
    let total: f64 = rows(tape.value(boxes), 4).map(|b| aspect_ratio_loss(BoundingBox::from_slice(&b), alpha)).sum();
    Ok(tape.push(Tensor::scalar(T::of(total / batch as f64)), &[boxes], RatioBackward { alpha }))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn two_point() -> (KeypointSet, PartDefinition) {
        (KeypointSet::new(vec![[0.2, 0.3], [0.6, 0.5]]), PartDefinition::new("torso", vec![0, 1], 1.5))
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)
    }

    #[test]
    fn initial_box_hand_example() {
        let (kp, part) = two_point();
        let (b, r) = initial_box(&kp, &part).unwrap();
        assert!(close(&b.to_array(), &[0.6, 0.3, 0.1, 0.25]), "{b:?}");
        assert_eq!(r.extremal(), [0, 1, 0, 1]);
    }

    #[test]
    fn coincident_points_hit_the_floor() {
        let kp = KeypointSet::new(vec![[0.4, 0.7], [0.4, 0.7], [0.4, 0.7]]);
        let part = PartDefinition::new("p", vec![0, 1, 2], 1.5);
        let (b, r) = initial_box(&kp, &part).unwrap();
        assert!(close(&b.to_array(), &[MIN_EXTENT, MIN_EXTENT, 0.4 - MIN_EXTENT / 2.0, 0.7 - MIN_EXTENT / 2.0]));
        assert!(r.w_floored && r.h_floored);
        assert_eq!(r.extremal(), [0, 0, 0, 0]);
        let g = initial_box_backward([1.0, 1.0, 1.0, 1.0], &r, 3);
        // extents carry no gradient once floored; the corner follows the point
        assert_eq!(g, vec![[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn empty_subset_is_a_config_error() {
        let (kp, _) = two_point();
        let part = PartDefinition::new("empty", vec![], 1.5);
        assert!(matches!(initial_box(&kp, &part), Err(Error::Config(_))));
    }

    #[test]
    fn backward_hand_examples() {
        let (kp, part) = two_point();
        let (_, r) = initial_box(&kp, &part).unwrap();
        let g = initial_box_backward([1.0, 0.0, 0.0, 0.0], &r, 2);
        assert_eq!(g, vec![[-1.5, 0.0], [1.5, 0.0]]);
        let g = initial_box_backward([0.0, 0.0, 1.0, 0.0], &r, 2);
        assert!(close(&[g[0][0], g[1][0]], &[1.25, -0.25]));
    }

    #[test]
    fn random_subset_matches_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let kp = KeypointSet::new((0..10).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect());
            let idx = vec![1, 3, 4, 6, 8, 9];
            let part = PartDefinition::new("p", idx.clone(), 1.5);
            let (b, _) = initial_box(&kp, &part).unwrap();
            let xs: Vec<f64> = idx.iter().map(|&i| kp.point(i)[0]).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| kp.point(i)[1]).collect();
            let fold = |v: &[f64]| {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &e in v {
                    lo = lo.min(e);
                    hi = hi.max(e);
                }
                (lo, hi)
            };
            let ((x0, x1), (y0, y1)) = (fold(&xs), fold(&ys));
            let w = (1.5 * (x1 - x0)).max(MIN_EXTENT);
            let h = (1.5 * (y1 - y0)).max(MIN_EXTENT);
            assert!(close(&b.to_array(), &[w, h, 0.5 * (x0 + x1 - w), 0.5 * (y0 + y1 - h)]));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let kp = KeypointSet::new(vec![[0.1, 0.5], [0.9, 0.5], [0.1, 0.2], [0.9, 0.8]]);
        let part = PartDefinition::new("p", vec![3, 2, 1, 0], 1.5);
        let (_, r) = initial_box(&kp, &part).unwrap();
        assert_eq!(r.min_x, 0);
        assert_eq!(r.max_x, 1);
    }

    #[test]
    fn adjustment_examples() {
        let b = BoundingBox::new(0.6, 0.3, 0.1, 0.25);
        assert_eq!(apply_adjustment(b, BoxAdjustment::default()), b);
        let adj = BoxAdjustment { dw: 0.5, dh: 0.0, dx: -0.1, dy: 0.0 };
        assert!(close(&apply_adjustment(b, adj).to_array(), &[0.9, 0.3, 0.0, 0.25]));
    }

    #[test]
    fn stabilized_scales_stay_positive() {
        let a = stabilize([-50.0, 50.0, 3.0, -3.0]);
        assert!(1.0 + a.dw > 0.0 && 1.0 + a.dh > 0.0);
        assert_eq!((a.dx, a.dy), (1.0, -1.0));
        assert_eq!(stabilize([0.0; 4]), BoxAdjustment::default());
        assert_eq!(stabilize_backward([5.0, -5.0, 2.0, -2.0], [1.0; 4]), [0.0; 4]);
    }

    #[test]
    fn theta_examples() {
        let t = box_to_theta(BoundingBox::new(0.6, 0.3, 0.1, 0.25));
        assert_eq!(t.0, [[0.6, 0.0, 0.1], [0.0, 0.3, 0.25]]);
        assert_eq!(box_to_theta(BoundingBox::new(1.0, 1.0, 0.0, 0.0)), AffineTheta::identity());
    }

    #[test]
    fn ratio_loss_examples() {
        let cfg = RatioLossConfig::default();
        assert_eq!(aspect_ratio_loss(BoundingBox::new(0.5, 0.5, 0.0, 0.0), cfg.alpha), 0.0);
        assert!((aspect_ratio_loss(BoundingBox::new(0.4, 1.0, 0.0, 0.0), 0.6) - 0.02).abs() < 1e-12);
        assert_eq!(aspect_ratio_loss(BoundingBox::new(0.7, 1.0, 0.0, 0.0), 0.6), 0.0);
    }

    #[test]
    fn clip_keeps_inner_boxes() {
        let b = BoundingBox::new(0.5, 0.4, 0.1, 0.2);
        assert_eq!(clip_box(b, -0.25, 1.25), b);
        let c = clip_box(BoundingBox::new(2.0, 0.4, -1.0, 0.2), -0.25, 1.25);
        assert!(close(&c.to_array(), &[1.25, 0.4, -0.25, 0.2]));
    }

    #[test]
    fn parts_json_validation() {
        let ok = r#"[{"name": "head", "keypoint_indices": [0, 1], "scale": 1.5}, {"name": "legs", "keypoint_indices": [2, 3]}]"#;
        let parts = parse_parts(ok, 4).unwrap();
        assert_eq!(parts[1].scale, DEFAULT_SCALE);
        let bad = r#"[{"name": "x", "keypoint_indices": [0, 0], "scale": 0.9}, {"name": "y", "keypoint_indices": [7, 1]}]"#;
        match parse_parts(bad, 4) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.01f64..2.0, 0.01f64..2.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(w, h, x, y)| BoundingBox::new(w, h, x, y))
    }

    proptest! {
        #[test]
        fn initial_box_contains_its_keypoints(pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..8)) {
            let kp = KeypointSet::new(pts.iter().map(|&(x, y)| [x, y]).collect());
            let part = PartDefinition::new("p", (0..pts.len()).collect(), 1.5);
            let (b, r) = initial_box(&kp, &part).unwrap();
            for p in kp.points() {
                prop_assert!(b.contains(*p) || r.w_floored || r.h_floored);
                let eps = 1e-12;
                prop_assert!(p[0] >= b.x - eps && p[0] <= b.x + b.w + eps);
                prop_assert!(p[1] >= b.y - eps && p[1] <= b.y + b.h + eps);
            }
            let g = initial_box_backward([0.3, -0.7, 1.1, 0.5], &r, kp.len());
            let nonzero = g.iter().filter(|p| p[0] != 0.0 || p[1] != 0.0).count();
            prop_assert!(nonzero <= 4);
            for (i, p) in g.iter().enumerate() {
                if !r.extremal().contains(&i) {
                    prop_assert_eq!(*p, [0.0, 0.0]);
                }
            }
        }

        #[test]
        fn ratio_loss_symmetry_and_zero_set(b in arb_box(), alpha in 0.05f64..=1.0) {
            let swapped = BoundingBox::new(b.h, b.w, b.x, b.y);
            prop_assert_eq!(aspect_ratio_loss(b, alpha), aspect_ratio_loss(swapped, alpha));
            let zero = aspect_ratio_loss(b, alpha) == 0.0;
            prop_assert_eq!(zero, b.w.min(b.h) >= alpha * b.w.max(b.h));
        }

        #[test]
        fn theta_is_linear(b1 in arb_box(), b2 in arb_box(), a in -3.0f64..3.0, c in -3.0f64..3.0) {
            let mix = BoundingBox::from_array(std::array::from_fn(|i| a * b1.to_array()[i] + c * b2.to_array()[i]));
            let lhs = box_to_theta(mix).to_array();
            let (t1, t2) = (box_to_theta(b1).to_array(), box_to_theta(b2).to_array());
            for i in 0..6 {
                prop_assert!((lhs[i] - (a * t1[i] + c * t2[i])).abs() < 1e-12);
            }
        }
    }
}
