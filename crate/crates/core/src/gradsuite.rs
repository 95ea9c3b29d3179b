//! Finite-difference checks for every differentiable operation.
//!
//! Each check draws its inputs from a seed. Inputs are rejection-sampled to
//! stay at least [`KINK_MARGIN`] away from the points where an operation is
//! not differentiable (ReLU at zero, max-pool ties, box extremum ties, clamp
//! and clip edges, the ratio hinge, integer pixel lines for the sampler).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{grad_check, grad_check_params, GradCheckReport, GradIndex, DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::autodiff::{ops, Conv2dSpec, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    self, BoundingBox, KeypointSet, PartDefinition, RatioLossConfig, CLIP_RANGE, LOG_SCALE_LIMIT, MIN_EXTENT, SHIFT_LIMIT,
};
use crate::model::{LossWeights, ModelConfig, ModelState, Variant};
use crate::sampler;
use crate::tensor::Tensor;

pub const KINK_MARGIN: f64 = 1e-3;
pub const DEFAULT_SEEDS: usize = 20;
/// Tolerance for the whole-model check, which compounds many operations.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// A named check over one seed.
#[derive(Clone, Copy)]
pub struct GradCheck {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(u64, f64) -> Result<GradCheckReport>,
}

impl std::fmt::Debug for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCheck").field("name", &self.name).field("tolerance", &self.tolerance).finish()
    }
}

impl GradCheck {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed, self.tolerance)
    }
}

pub fn registry() -> Vec<GradCheck> {
    let op = |name, run| GradCheck { name, tolerance: DEFAULT_TOLERANCE, run };
    vec![
        op("fc", check_fc),
        op("relu", check_relu),
        op("dropout", check_dropout),
        op("conv2d", check_conv),
        op("maxpool2d", check_maxpool),
        op("softmax_ce", check_softmax_ce),
        op("keypoint_l2", check_keypoint_l2),
        op("initial_box", check_initial_box),
        op("stabilize", check_stabilize),
        op("adjustment", check_adjustment),
        op("clip", check_clip),
        op("theta", check_theta),
        op("aspect_ratio", check_ratio),
        op("sampler", check_sampler),
        op("box_chain", check_box_chain),
        GradCheck { name: "end_to_end", tolerance: END_TO_END_TOLERANCE, run: check_end_to_end },
    ]
}

pub fn find(name: &str) -> Result<GradCheck> {
    registry().into_iter().find(|c| c.name == name).ok_or_else(|| {
        let names: Vec<_> = registry().iter().map(|c| c.name).collect();
        Error::Input(format!("unknown operation `{name}`; available: {}", names.join(", ")))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailingCase {
    pub seed: u64,
    pub index: GradIndex,
}

/// Worst case of one check over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpSummary {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
    pub failing: Option<FailingCase>,
}

/// Runs `check` for seeds `0..seeds`.
pub fn run_check(check: &GradCheck, seeds: usize) -> Result<OpSummary> {
    let mut summary = OpSummary {
        name: check.name.into(),
        seeds,
        max_rel_error: 0.0,
        worst_seed: 0,
        tolerance: check.tolerance,
        checked: 0,
        passed: true,
        failing: None,
    };
    for seed in 0..seeds as u64 {
        let r = check.run(seed)?;
        summary.checked += r.checked;
        if r.max_rel_error > summary.max_rel_error {
            summary.max_rel_error = r.max_rel_error;
            summary.worst_seed = seed;
        }
        if let (Some(index), None) = (r.failing_index, &summary.failing) {
            summary.failing = Some(FailingCase { seed, index });
        }
        summary.passed &= r.passed;
    }
    Ok(summary)
}

pub fn run_all(seeds: usize) -> Result<Vec<OpSummary>> {
    registry().iter().map(|c| run_check(c, seeds)).collect()
}

/// Fixed-width table, one row per operation.
pub fn format_table(rows: &[OpSummary]) -> String {
    let mut s = format!("{:<14} {:>6} {:>12} {:>10} {:>8}  {}\n", "op", "seeds", "max_rel_err", "tolerance", "status", "failing");
    for r in rows {
        let failing = r
            .failing
            .as_ref()
            .map(|f| format!("seed {} input {} element {}", f.seed, f.index.input, f.index.element))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<14} {:>6} {:>12.3e} {:>10.0e} {:>8}  {}\n",
            r.name,
            r.seeds,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" },
            failing
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// input generation

fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Result<Tensor<f64>> {
    Tensor::new(shape, data)
}

/// Reduces any output to a scalar with fixed random weights.
fn reduced(tape: &mut Tape<f64>, weights: &[f64], f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> Result<Var> {
    let y = f(tape)?;
    Ok(ops::dot_const(tape, y, weights.to_vec()))
}

fn near(v: f64, targets: &[f64]) -> bool {
    targets.iter().any(|&t| (v - t).abs() < KINK_MARGIN)
}

// ---------------------------------------------------------------------------
// primitive layers

fn check_fc(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 1);
    let inputs = [
        tensor(&[4, 5], uniform(&mut rng, 20, -1.0, 1.0))?,
        tensor(&[5, 3], uniform(&mut rng, 15, -1.0, 1.0))?,
        tensor(&[3], uniform(&mut rng, 3, -1.0, 1.0))?,
    ];
    let w = uniform(&mut rng, 12, -1.0, 1.0);
    grad_check(&inputs, |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| ops::fc_affine(t, v[0], v[1], v[2])), DEFAULT_EPS, tol)
}

fn check_relu(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 2);
    let x: Vec<f64> = (0..21)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() >= KINK_MARGIN {
                break v;
            }
        })
        .collect();
    let w = uniform(&mut rng, 21, -1.0, 1.0);
    grad_check(&[tensor(&[3, 7], x)?], |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| Ok(ops::relu(t, v[0]))), DEFAULT_EPS, tol)
}

fn check_dropout(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 3);
    let x = uniform(&mut rng, 24, -1.0, 1.0);
    // ratio 0.5: survivors scaled by 2
    let mask: Vec<f64> = (0..24).map(|_| if rng.random_bool(0.5) { 2.0 } else { 0.0 }).collect();
    let w = uniform(&mut rng, 24, -1.0, 1.0);
    grad_check(
        &[tensor(&[4, 6], x)?],
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| Ok(ops::apply_mask(t, v[0], mask.clone()))),
        DEFAULT_EPS,
        tol,
    )
}

fn check_conv(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 4);
    // alternate padded stride-1 and unpadded stride-2 geometry
    let (spec, out) = if seed.is_multiple_of(2) { (Conv2dSpec { stride: 1, pad: 1 }, 5) } else { (Conv2dSpec { stride: 2, pad: 0 }, 2) };
    let inputs = [
        tensor(&[2, 2, 5, 5], uniform(&mut rng, 100, -1.0, 1.0))?,
        tensor(&[3, 2, 3, 3], uniform(&mut rng, 54, -1.0, 1.0))?,
        tensor(&[3], uniform(&mut rng, 3, -1.0, 1.0))?,
    ];
    let w = uniform(&mut rng, 2 * 3 * out * out, -1.0, 1.0);
    grad_check(
        &inputs,
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| ops::conv2d(t, v[0], v[1], v[2], spec)),
        DEFAULT_EPS,
        tol,
    )
}

fn check_maxpool(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 5);
    // distinct entries 0.01 apart
    let mut ranks: Vec<usize> = (0..64).collect();
    ranks.shuffle(&mut rng);
    let x: Vec<f64> = ranks.iter().map(|&r| r as f64 * 0.01 - 0.3).collect();
    let w = uniform(&mut rng, 16, -1.0, 1.0);
    grad_check(
        &[tensor(&[2, 2, 4, 4], x)?],
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| ops::maxpool2d(t, v[0], 2, 2)),
        DEFAULT_EPS,
        tol,
    )
}

fn check_softmax_ce(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 6);
    let logits = uniform(&mut rng, 20, -2.0, 2.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    grad_check(
        &[tensor(&[4, 5], logits)?],
        |t: &mut Tape<f64>, v: &[Var]| ops::softmax_cross_entropy(t, v[0], &labels),
        DEFAULT_EPS,
        tol,
    )
}

fn check_keypoint_l2(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 7);
    let inputs = [tensor(&[3, 8], uniform(&mut rng, 24, 0.0, 1.0))?, tensor(&[3, 8], uniform(&mut rng, 24, 0.0, 1.0))?];
    grad_check(&inputs, |t: &mut Tape<f64>, v: &[Var]| ops::l2_keypoint_loss(t, v[0], v[1]), DEFAULT_EPS, tol)
}

// ---------------------------------------------------------------------------
// part geometry

const CHAIN_KEYPOINTS: usize = 6;

fn chain_part() -> PartDefinition {
    PartDefinition::new("part", vec![0, 2, 3, 5], 1.5)
}

/// Keypoint rows whose part extrema are unique and whose boxes clear the floor.
fn keypoint_rows(rng: &mut ChaCha8Rng, batch: usize, part: &PartDefinition) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * 2 * CHAIN_KEYPOINTS);
    while out.len() < batch * 2 * CHAIN_KEYPOINTS {
        let row = uniform(rng, 2 * CHAIN_KEYPOINTS, 0.1, 0.9);
        let ok = (0..2).all(|axis| {
            let mut v: Vec<f64> = part.keypoint_indices.iter().map(|&k| row[2 * k + axis]).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            v[1] - v[0] >= KINK_MARGIN && v[n - 1] - v[n - 2] >= KINK_MARGIN && part.scale * (v[n - 1] - v[0]) >= MIN_EXTENT + KINK_MARGIN
        });
        if ok {
            out.extend(row);
        }
    }
    out
}

/// Raw adjustment rows strictly inside the clamp limits.
fn raw_rows(rng: &mut ChaCha8Rng, batch: usize) -> Vec<f64> {
    let (s, t) = (LOG_SCALE_LIMIT - 0.1, SHIFT_LIMIT - 0.1);
    (0..batch).flat_map(|_| [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-t..t), rng.random_range(-t..t)]).collect()
}

/// True when clipping `b` is differentiable with margin.
fn clip_smooth(b: BoundingBox) -> bool {
    let (lo, hi) = CLIP_RANGE;
    [(b.x, b.w), (b.y, b.h)].iter().all(|&(start, extent)| {
        let end = start + extent;
        let clipped = end.clamp(lo, hi) - start.clamp(lo, hi);
        !near(start, &[lo, hi]) && !near(end, &[lo, hi]) && !near(clipped, &[MIN_EXTENT]) && !near(extent, &[MIN_EXTENT])
    })
}

fn check_initial_box(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 8);
    let part = chain_part();
    let kp = keypoint_rows(&mut rng, 3, &part);
    let w = uniform(&mut rng, 12, -1.0, 1.0);
    grad_check(
        &[tensor(&[3, 2 * CHAIN_KEYPOINTS], kp)?],
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| geometry::initial_boxes(t, v[0], &part).map(|r| r.0)),
        DEFAULT_EPS,
        tol,
    )
}

fn check_stabilize(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 9);
    let raw = raw_rows(&mut rng, 3);
    let w = uniform(&mut rng, 12, -1.0, 1.0);
    grad_check(
        &[tensor(&[3, 4], raw)?],
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| geometry::stabilize_rows(t, v[0])),
        DEFAULT_EPS,
        tol,
    )
}

fn check_adjustment(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 10);
    let boxes: Vec<f64> = (0..3).flat_map(|_| [rng.random_range(0.1..0.8), rng.random_range(0.1..0.8), rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)]).collect();
    let adj: Vec<f64> = (0..3).flat_map(|_| [rng.random_range(-0.8..2.0), rng.random_range(-0.8..2.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]).collect();
    let w = uniform(&mut rng, 12, -1.0, 1.0);
    grad_check(
        &[tensor(&[3, 4], boxes)?, tensor(&[3, 4], adj)?],
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| geometry::adjust_boxes(t, v[0], v[1])),
        DEFAULT_EPS,
        tol,
    )
}

fn check_clip(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 11);
    let mut boxes = Vec::with_capacity(16);
    while boxes.len() < 16 {
        let b = BoundingBox::new(rng.random_range(0.02..1.2), rng.random_range(0.02..1.2), rng.random_range(-0.6..1.2), rng.random_range(-0.6..1.2));
        if clip_smooth(b) {
            boxes.extend(b.to_array());
        }
    }
    let w = uniform(&mut rng, 16, -1.0, 1.0);
    grad_check(
        &[tensor(&[4, 4], boxes)?],
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| geometry::clip_boxes(t, v[0], CLIP_RANGE.0, CLIP_RANGE.1)),
        DEFAULT_EPS,
        tol,
    )
}

fn check_theta(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 12);
    let boxes = uniform(&mut rng, 12, 0.05, 1.0);
    let w = uniform(&mut rng, 18, -1.0, 1.0);
    grad_check(
        &[tensor(&[3, 4], boxes)?],
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| geometry::boxes_to_theta(t, v[0])),
        DEFAULT_EPS,
        tol,
    )
}

fn check_ratio(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 13);
    let alpha = RatioLossConfig::default().alpha;
    let mut boxes = Vec::with_capacity(16);
    while boxes.len() < 16 {
        let (w, h) = (rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));
        let gap = alpha * f64::max(w, h) - f64::min(w, h);
        if (w - h).abs() >= KINK_MARGIN && gap.abs() >= KINK_MARGIN {
            boxes.extend([w, h, rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)]);
        }
    }
    grad_check(
        &[tensor(&[4, 4], boxes)?],
        |t: &mut Tape<f64>, v: &[Var]| geometry::aspect_ratio_loss_rows(t, v[0], alpha),
        DEFAULT_EPS,
        tol,
    )
}

fn check_sampler(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 14);
    let (batch, c, src, out) = (2, 2, 5, 3);
    let mut theta = Vec::with_capacity(batch * 6);
    while theta.len() < batch * 6 {
        let t = [
            rng.random_range(0.3..1.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.1..0.4),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.3..1.0),
            rng.random_range(-0.1..0.4),
        ];
        let grid = sampler::make_grid(&geometry::AffineTheta::from_slice(&t), out, out, src, src)?;
        let clear = grid.coords.iter().flatten().all(|&v| (v - v.round()).abs() >= KINK_MARGIN);
        if clear {
            theta.extend(t);
        }
    }
    let features = uniform(&mut rng, batch * c * src * src, -1.0, 1.0);
    let w = uniform(&mut rng, batch * c * out * out, -1.0, 1.0);
    grad_check(
        &[tensor(&[batch, c, src, src], features)?, tensor(&[batch, 6], theta)?],
        |t: &mut Tape<f64>, v: &[Var]| reduced(t, &w, |t| sampler::sample_features(t, v[0], v[1], out, out)),
        DEFAULT_EPS,
        tol,
    )
}

/// Keypoints and raw offsets through initial box, stabilization,
/// adjustment, clipping and theta.
fn check_box_chain(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 15);
    let part = chain_part();
    let (mut kp, mut raw) = (Vec::new(), Vec::new());
    while kp.len() < 3 * 2 * CHAIN_KEYPOINTS {
        let k = keypoint_rows(&mut rng, 1, &part);
        let r = raw_rows(&mut rng, 1);
        let (b0, _) = geometry::initial_box(&KeypointSet::from_flat(&k)?, &part)?;
        let adjusted = geometry::apply_adjustment(b0, geometry::stabilize([r[0], r[1], r[2], r[3]]));
        if clip_smooth(adjusted) {
            kp.extend(k);
            raw.extend(r);
        }
    }
    let w = uniform(&mut rng, 18, -1.0, 1.0);
    grad_check(
        &[tensor(&[3, 2 * CHAIN_KEYPOINTS], kp)?, tensor(&[3, 4], raw)?],
        |t: &mut Tape<f64>, v: &[Var]| {
            let (b0, _) = geometry::initial_boxes(t, v[0], &part)?;
            let adj = geometry::stabilize_rows(t, v[1])?;
            let b1 = geometry::adjust_boxes(t, b0, adj)?;
            let b2 = geometry::clip_boxes(t, b1, CLIP_RANGE.0, CLIP_RANGE.1)?;
            reduced(t, &w, |t| geometry::boxes_to_theta(t, b2))
        },
        DEFAULT_EPS,
        tol,
    )
}

// ---------------------------------------------------------------------------
// whole model

/// A three-keypoint, one-part network on 8x8 images.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Ours,
        image_size: 8,
        in_channels: 3,
        extractor_channels: vec![2],
        num_keypoints: 3,
        parts: vec![PartDefinition::new("part", vec![0, 1, 2], 1.5)],
        class_counts: vec![3],
        localization_widths: [6, 6],
        attribute_widths: [5, 4],
        delta_width: 4,
        dropout: 0.5,
        part_size: 2,
        loss_weights: LossWeights::default(),
        ratio: RatioLossConfig::default(),
        stn_box_fraction: 0.6,
        box_lr_mult: 0.1,
        adaptive_enabled: true,
        ratio_loss_enabled: true,
    }
}

/// Full training loss of the micro network with respect to every parameter,
/// with dropout masks fixed by reseeding each evaluation.
fn check_end_to_end(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 16);
    let mut model = ModelState::<f64>::build(micro_config(), seed)?;
    // Nonzero offsets and biases keep pre-activations off exact zeros, and
    // keypoints near the centre keep the part boxes on the feature map.
    for p in model.params.iter_mut() {
        let (scale, shift, reset) = match p.name.as_str() {
            "fc8.w" => (0.1, 0.0, false),
            "fc8.b" => (0.0, 0.5, true),
            n if n.starts_with("fc8_adj") => (0.0, 0.0, true),
            n if n.ends_with(".b") => (0.0, 0.0, true),
            _ => continue,
        };
        for v in p.value.data_mut() {
            *v = if reset { shift + rng.random_range(-0.1..0.1) } else { *v * scale };
        }
    }
    let batch = 2;
    let images = tensor(&[batch, 3, 8, 8], uniform(&mut rng, batch * 192, 0.0, 1.0))?;
    let gt = tensor(&[batch, 6], uniform(&mut rng, batch * 6, 0.2, 0.8))?;
    let labels = vec![(0..batch).map(|_| rng.random_range(0..3)).collect::<Vec<usize>>()];
    let dropout_seed = rng.random::<u64>();
    let template = model.clone();
    let store = std::mem::take(&mut model.params);
    grad_check_params(
        &store,
        |tape, params| {
            let mut m = template.clone();
            m.params = params.clone();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let out = m.forward(tape, &images, Some(&gt), Mode::Train, &mut drop_rng)?;
            Ok(m.loss(tape, &out, &labels, Some(&gt))?.0)
        },
        DEFAULT_EPS,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Backward;

    #[test]
    fn every_check_passes_one_seed() {
        for c in registry() {
            let r = c.run(0).unwrap();
            assert!(r.passed, "{}: {r:?}", c.name);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn unknown_name_lists_options() {
        let e = find("nope").unwrap_err().to_string();
        assert!(e.contains("sampler") && e.contains("end_to_end"), "{e}");
    }

    /// Doubles its input but reports a gradient 10% too large for element 0.
    struct Corrupted;

    impl Backward<f64> for Corrupted {
        fn backward(&self, _i: &[&Tensor<f64>], _o: &Tensor<f64>, grad: &Tensor<f64>, _n: &[bool]) -> Vec<Option<Tensor<f64>>> {
            let mut g = grad.map(|v| 2.0 * v);
            g.data_mut()[0] *= 1.1;
            vec![Some(g)]
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = Tensor::from_f64(&[1, 3], &[0.5, -0.2, 0.9]).unwrap();
        let r = grad_check(
            &[x],
            |t: &mut Tape<f64>, v: &[Var]| {
                let doubled = t.value(v[0]).map(|a| 2.0 * a);
                let y = t.push(doubled, &[v[0]], Corrupted);
                Ok(ops::dot_const(t, y, vec![1.0, 2.0, 3.0]))
            },
            DEFAULT_EPS,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.failing_index, Some(GradIndex { input: 0, element: 0 }));
    }

    #[test]
    fn table_marks_failures() {
        let row = OpSummary {
            name: "fc".into(),
            seeds: 2,
            max_rel_error: 0.5,
            worst_seed: 1,
            tolerance: 1e-4,
            checked: 10,
            passed: false,
            failing: Some(FailingCase { seed: 1, index: GradIndex { input: 0, element: 3 } }),
        };
        let t = format_table(&[row]);
        assert!(t.contains("FAIL") && t.contains("seed 1 input 0 element 3"), "{t}");
    }
}
