//! The multi-task network and its baselines.
//!
//! `ours` regresses keypoints from convolutional features, builds one box per
//! part from them, adjusts it by learned offsets read off the penultimate
//! localization layer, samples a fixed-size part feature map through the
//! box's affine transform and classifies each part's attribute. Baselines:
//!
//! * `full`: whole-image attribute heads, no parts.
//! * `stn`: a fixed centred box per part plus learned offsets.
//! * `separate`: the `ours` graph trained in two phases, keypoints first.
//! * `oracle`: boxes from ground-truth keypoints.
//!
//! Variants without a localization head read their offsets from a small
//! dedicated stream over pooled extractor features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, ops, Mode, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, BoundingBox, KeypointSet, PartDefinition, RatioLossConfig, CLIP_RANGE};
use crate::sampler;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Stn,
    Separate,
    Oracle,
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Stn, Variant::Separate, Variant::Oracle, Variant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Stn => "stn",
            Variant::Separate => "separate",
            Variant::Oracle => "oracle",
            Variant::Ours => "ours",
        }
    }

    pub fn has_parts(self) -> bool {
        self != Variant::Full
    }

    pub fn has_localization(self) -> bool {
        matches!(self, Variant::Ours | Variant::Separate)
    }

    pub fn needs_gt_keypoints(self) -> bool {
        self == Variant::Oracle
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}` (expected full, stn, separate, oracle or ours)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parts of the graph are trained. Only `separate` leaves `Joint`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Joint,
    /// Extractor and localization head on the keypoint loss alone.
    KeypointsOnly,
    /// Parts built from a frozen snapshot's keypoint predictions.
    PartsFromFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LossWeights {
    pub keypoint: f64,
    /// Per part.
    pub attribute: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { keypoint: 1.0, attribute: 0.3 }
    }
}

/// `keypoint * L_kp + sum_t (attribute * L_cls_t + ratio * L_ratio_t)`.
pub fn weighted_total(weights: &LossWeights, ratio_weight: f64, keypoint: f64, cls: &[f64], ratio: &[f64]) -> f64 {
    let mut total = weights.keypoint * keypoint;
    for &c in cls {
        total += weights.attribute * c;
    }
    for &r in ratio {
        total += ratio_weight * r;
    }
    total
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each conv 3x3 -> relu -> maxpool 2 stage.
    pub extractor_channels: Vec<usize>,
    pub num_keypoints: usize,
    pub parts: Vec<PartDefinition>,
    /// Attribute classes per part, in part order.
    pub class_counts: Vec<usize>,
    pub localization_widths: [usize; 2],
    pub attribute_widths: [usize; 2],
    /// Hidden width of the offset stream used when there is no localization head.
    pub delta_width: usize,
    pub dropout: f64,
    pub part_size: usize,
    pub loss_weights: LossWeights,
    pub ratio: RatioLossConfig,
    pub stn_box_fraction: f64,
    pub box_lr_mult: f64,
    #[serde(default = "default_true")]
    pub adaptive_enabled: bool,
    #[serde(default = "default_true")]
    pub ratio_loss_enabled: bool,
}

impl ModelConfig {
    /// Three-part human layout over 14 keypoints with 3/4/4 classes.
    pub fn human(variant: Variant) -> Self {
        Self {
            variant,
            image_size: 64,
            in_channels: 3,
            extractor_channels: vec![16, 32, 32],
            num_keypoints: 14,
            parts: crate::synth::human_parts(),
            class_counts: vec![3, 4, 4],
            localization_widths: [128, 128],
            attribute_widths: [128, 64],
            delta_width: 64,
            dropout: 0.5,
            part_size: sampler::DEFAULT_OUT_SIZE,
            loss_weights: LossWeights::default(),
            ratio: RatioLossConfig::default(),
            stn_box_fraction: 0.6,
            box_lr_mult: 0.1,
            adaptive_enabled: true,
            ratio_loss_enabled: true,
        }
    }

    /// Three-part garment layout over 8 keypoints with 4 classes each.
    pub fn garment(variant: Variant) -> Self {
        Self {
            num_keypoints: 8,
            parts: crate::synth::garment_parts(),
            class_counts: vec![4, 4, 4],
            ..Self::human(variant)
        }
    }

    pub fn feature_size(&self) -> usize {
        self.image_size >> self.extractor_channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.extractor_channels.last().unwrap_or(&self.in_channels)
    }

    fn uses_delta_stream(&self) -> bool {
        matches!(self.variant, Variant::Stn | Variant::Oracle) && self.adaptive_enabled
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let stages = self.extractor_channels.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << stages) {
            v.push(format!("image size {} is not divisible by 2^{stages}", self.image_size));
        }
        if self.in_channels == 0 || self.extractor_channels.contains(&0) {
            v.push("channel counts must be positive".into());
        }
        if self.uses_delta_stream() && !self.feature_size().is_multiple_of(2) {
            v.push(format!("offset stream pools the {0}x{0} feature map and needs an even extent", self.feature_size()));
        }
        if self.parts.is_empty() {
            v.push("at least one part is required".into());
        }
        for p in &self.parts {
            v.extend(p.violations(self.num_keypoints));
        }
        if self.class_counts.len() != self.parts.len() {
            v.push(format!("{} class counts for {} parts", self.class_counts.len(), self.parts.len()));
        }
        if self.class_counts.iter().any(|&c| c < 2) {
            v.push("every part needs at least 2 classes".into());
        }
        let widths = self.localization_widths.iter().chain(&self.attribute_widths).chain([&self.delta_width]);
        if widths.into_iter().any(|&w| w == 0) {
            v.push("layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.part_size == 0 {
            v.push("part size must be positive".into());
        }
        if !(self.loss_weights.keypoint >= 0.0 && self.loss_weights.attribute >= 0.0) {
            v.push("loss weights must be nonnegative".into());
        }
        v.extend(self.ratio.violations());
        if !(self.stn_box_fraction > 0.0 && self.stn_box_fraction <= 1.0) {
            v.push(format!("stn box fraction must lie in (0, 1], got {}", self.stn_box_fraction));
        }
        if self.box_lr_mult.is_nan() || self.box_lr_mult < 0.0 {
            v.push("box learning-rate multiplier must be nonnegative".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<Dense>,
    /// fc6, fc7, fc8.
    loc: Option<[Dense; 3]>,
    delta_stream: Option<Dense>,
    /// fc8_adj per part.
    adj: Vec<Dense>,
    heads: Vec<[Dense; 3]>,
}

#[derive(Debug, Clone)]
struct Frozen<T> {
    params: ParamStore<T>,
    convs: Vec<Dense>,
    loc: [Dense; 3],
}

/// Configuration, parameters and training phase of one network.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub phase: Phase,
    layout: Layout,
    frozen: Option<Frozen<T>>,
}

/// JSON written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelSidecar {
    pub config: ModelConfig,
    pub phase: Phase,
}

const FROZEN_PREFIX: &str = "frozen.";

/// He-initialized when followed by a ReLU, Xavier otherwise.
fn add_dense<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    lr_mult: f64,
    relu: bool,
    rng: &mut ChaCha8Rng,
) -> Dense {
    let w = if relu {
        store.add_he(format!("{name}.w"), &[fan_in, fan_out], fan_in, lr_mult, rng)
    } else {
        store.add_xavier(format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, lr_mult, rng)
    };
    let b = store.add_zeros(format!("{name}.b"), &[fan_out], lr_mult);
    Dense { w, b }
}

fn add_zero_dense<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, lr_mult: f64) -> Dense {
    let w = store.add_zeros(format!("{name}.w"), &[fan_in, fan_out], lr_mult);
    let b = store.add_zeros(format!("{name}.b"), &[fan_out], lr_mult);
    Dense { w, b }
}

/// Per-part network outputs on the tape.
#[derive(Debug, Clone)]
pub struct PartOutput {
    pub name: String,
    pub boxes: Option<PartBoxes>,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct PartBoxes {
    pub initial: Var,
    /// Stabilized offsets, absent when adaptation is disabled.
    pub adjustment: Option<Var>,
    pub adjusted: Var,
    /// Clipped box that is actually sampled.
    pub final_boxes: Var,
    pub theta: Var,
    pub ratio_loss: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub batch: usize,
    /// `[B, 2N]` keypoints the boxes were built from, when they are predicted.
    pub keypoints: Option<Var>,
    pub parts: Vec<PartOutput>,
}

/// Loss components of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub keypoint: Option<f64>,
    pub classification: Vec<f64>,
    pub ratio: Vec<f64>,
    pub total: f64,
}

/// Inference results of one batch, detached from any tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub keypoints: Option<Vec<KeypointSet>>,
    /// `[part][sample]`.
    pub boxes: Option<Vec<Vec<BoundingBox>>>,
    /// `[part][sample][class]` softmax scores.
    pub probabilities: Vec<Vec<Vec<f64>>>,
}

impl Prediction {
    /// Arg-max class per part and sample.
    pub fn labels(&self) -> Vec<Vec<usize>> {
        self.probabilities
            .iter()
            .map(|part| {
                part.iter()
                    .map(|p| {
                        // first maximum wins
                        p.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
                    })
                    .collect()
            })
            .collect()
    }
}

/// Prediction for one part of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PartPrediction {
    pub part: String,
    /// Final sampled box; absent for the whole-image variant.
    pub bbox: Option<BoundingBox>,
    pub label: usize,
    pub probabilities: Vec<f64>,
}

/// Prediction for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SamplePrediction {
    pub variant: Variant,
    /// Normalized `[x, y]` per keypoint; absent for variants without keypoint output.
    pub keypoints: Option<Vec<[f64; 2]>>,
    pub parts: Vec<PartPrediction>,
}

impl Prediction {
    /// The `index`-th image of the batch; `names` labels the parts.
    pub fn sample(&self, index: usize, variant: Variant, names: &[String]) -> SamplePrediction {
        let labels = self.labels();
        SamplePrediction {
            variant,
            keypoints: self.keypoints.as_ref().map(|k| k[index].points().to_vec()),
            parts: self
                .probabilities
                .iter()
                .enumerate()
                .map(|(t, p)| PartPrediction {
                    part: names.get(t).cloned().unwrap_or_else(|| format!("part{t}")),
                    bbox: self.boxes.as_ref().map(|b| b[t][index]),
                    label: labels[t][index],
                    probabilities: p[index].clone(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> ModelState<T> {
    /// Creates every parameter from `seed`; offset layers start at zero.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = config.in_channels;
        for (i, &c) in config.extractor_channels.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let w = store.add_he(format!("{name}.w"), &[c, cin, 3, 3], cin * 9, 1.0, &mut rng);
            let b = store.add_zeros(format!("{name}.b"), &[c], 1.0);
            convs.push(Dense { w, b });
            cin = c;
        }
        let fs = config.feature_size();
        let feat_dim = config.feature_channels() * fs * fs;
        let [l6, l7] = config.localization_widths;
        let box_lr = config.box_lr_mult;
        let loc = config.variant.has_localization().then(|| {
            [
                add_dense(&mut store, "fc6", feat_dim, l6, 1.0, true, &mut rng),
                add_dense(&mut store, "fc7", l6, l7, 1.0, true, &mut rng),
                add_dense(&mut store, "fc8", l7, 2 * config.num_keypoints, 1.0, false, &mut rng),
            ]
        });
        // Untrained keypoints start at the image centre so sampled parts see content.
        if let Some(loc) = &loc {
            store.get_mut(loc[2].b).value = Tensor::full(&[2 * config.num_keypoints], T::of(0.5));
        }
        let delta_stream = config.uses_delta_stream().then(|| {
            let pooled = config.feature_channels() * (fs / 2) * (fs / 2);
            add_dense(&mut store, "adj_stream", pooled, config.delta_width, box_lr, true, &mut rng)
        });
        let adj_in = if loc.is_some() { l7 } else { config.delta_width };
        let adj = if config.variant.has_parts() && config.adaptive_enabled {
            config.parts.iter().map(|p| add_zero_dense(&mut store, &format!("fc8_adj.{}", p.name), adj_in, 4, box_lr)).collect()
        } else {
            Vec::new()
        };
        let head_in = if config.variant.has_parts() {
            config.feature_channels() * config.part_size * config.part_size
        } else {
            feat_dim
        };
        let [a1, a2] = config.attribute_widths;
        let heads = config
            .parts
            .iter()
            .zip(&config.class_counts)
            .map(|(p, &classes)| {
                [
                    add_dense(&mut store, &format!("{}.fc1", p.name), head_in, a1, 1.0, true, &mut rng),
                    add_dense(&mut store, &format!("{}.fc2", p.name), a1, a2, 1.0, true, &mut rng),
                    add_dense(&mut store, &format!("{}.cls", p.name), a2, classes, 1.0, false, &mut rng),
                ]
            })
            .collect();
        let phase = if config.variant == Variant::Separate { Phase::KeypointsOnly } else { Phase::Joint };
        Ok(Self {
            config,
            params: store,
            phase,
            layout: Layout { convs, loc, delta_stream, adj, heads },
            frozen: None,
        })
    }

    /// Ids of the attribute classifier parameters.
    pub fn classifier_params(&self) -> Vec<ParamId> {
        self.layout.heads.iter().flatten().flat_map(|d| [d.w, d.b]).collect()
    }

    /// Ids of the localization head (empty for variants without one).
    pub fn localization_params(&self) -> Vec<ParamId> {
        self.layout.loc.iter().flatten().flat_map(|d| [d.w, d.b]).collect()
    }

    pub fn has_frozen_snapshot(&self) -> bool {
        self.frozen.is_some()
    }

    /// Ends the keypoint phase of `separate`: snapshots the extractor and
    /// localization head for keypoint prediction and stops training the head.
    pub fn begin_parts_phase(&mut self) -> Result<()> {
        if self.config.variant != Variant::Separate || self.phase != Phase::KeypointsOnly {
            return Err(Error::config("only a separate model in its keypoint phase can switch phases"));
        }
        let loc = self.layout.loc.expect("separate has a localization head");
        let mut params = ParamStore::new();
        let copy = |d: Dense, params: &mut ParamStore<T>| -> Dense {
            let src = (self.params.get(d.w), self.params.get(d.b));
            Dense {
                w: params.add(format!("{FROZEN_PREFIX}{}", src.0.name), src.0.value.clone(), 0.0),
                b: params.add(format!("{FROZEN_PREFIX}{}", src.1.name), src.1.value.clone(), 0.0),
            }
        };
        let convs = self.layout.convs.iter().map(|&d| copy(d, &mut params)).collect();
        let loc_copy = [copy(loc[0], &mut params), copy(loc[1], &mut params), copy(loc[2], &mut params)];
        for p in params.iter_mut() {
            p.trainable = false;
        }
        for id in self.localization_params() {
            self.params.get_mut(id).trainable = false;
        }
        self.frozen = Some(Frozen { params, convs, loc: loc_copy });
        self.phase = Phase::PartsFromFrozen;
        Ok(())
    }

    fn extract(&self, tape: &mut Tape<T>, store: &ParamStore<T>, convs: &[Dense], x: Var, constant: bool) -> Result<Var> {
        let mut h = x;
        for d in convs {
            let (w, b) = leaf_pair(tape, store, *d, constant);
            h = ops::conv2d(tape, h, w, b, ops::Conv2dSpec { stride: 1, pad: 1 })?;
            h = ops::relu(tape, h);
            h = ops::maxpool2d(tape, h, 2, 2)?;
        }
        Ok(h)
    }

    /// Returns `(fc7 activations, keypoints)`.
    #[allow(clippy::too_many_arguments)]
    fn localize(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        loc: &[Dense; 3],
        features: Var,
        constant: bool,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let flat = ops::flatten(tape, features);
        let (w, b) = leaf_pair(tape, store, loc[0], constant);
        let h6 = ops::fc_affine(tape, flat, w, b)?;
        let h6 = ops::relu(tape, h6);
        let h6 = ops::dropout(tape, h6, self.config.dropout, mode, rng)?;
        let (w, b) = leaf_pair(tape, store, loc[1], constant);
        let h7 = ops::fc_affine(tape, h6, w, b)?;
        let h7 = ops::relu(tape, h7);
        let h7_drop = ops::dropout(tape, h7, self.config.dropout, mode, rng)?;
        let (w, b) = leaf_pair(tape, store, loc[2], constant);
        let kp = ops::fc_affine(tape, h7_drop, w, b)?;
        Ok((h7, kp))
    }

    fn head(&self, tape: &mut Tape<T>, layers: &[Dense; 3], x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let mut h = x;
        for d in &layers[..2] {
            let (w, b) = leaf_pair(tape, &self.params, *d, false);
            h = ops::fc_affine(tape, h, w, b)?;
            h = ops::relu(tape, h);
            h = ops::dropout(tape, h, self.config.dropout, mode, rng)?;
        }
        let (w, b) = leaf_pair(tape, &self.params, layers[2], false);
        ops::fc_affine(tape, h, w, b)
    }

    /// Records the forward pass. `keypoints_in` carries ground-truth
    /// keypoints `[B, 2N]` and is required exactly for `oracle`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        keypoints_in: Option<&Tensor<T>>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let expected = [cfg.in_channels, cfg.image_size, cfg.image_size];
        if images.rank() != 4 || images.shape()[1..] != expected {
            return Err(Error::Dimension { op: "forward", lhs: images.shape().to_vec(), rhs: expected.to_vec() });
        }
        let batch = images.dim(0);
        if cfg.variant.needs_gt_keypoints() {
            match keypoints_in {
                None => return Err(Error::Input("the oracle variant needs ground-truth keypoints".into())),
                Some(k) if k.shape() != [batch, 2 * cfg.num_keypoints] => {
                    return Err(Error::Dimension {
                        op: "forward",
                        lhs: k.shape().to_vec(),
                        rhs: vec![batch, 2 * cfg.num_keypoints],
                    })
                }
                Some(_) => {}
            }
        }
        let centred = images.map(|v| v - T::of(0.5));
        let x = tape.constant(centred.clone());
        let features = self.extract(tape, &self.params, &self.layout.convs, x, false)?;

        let mut keypoints = None;
        let mut box_source = None;
        let mut delta_source = None;
        match (cfg.variant, self.phase) {
            (Variant::Full, _) => {}
            (Variant::Ours, _) | (Variant::Separate, Phase::KeypointsOnly | Phase::Joint) => {
                let loc = self.layout.loc.as_ref().expect("localization head");
                let (h7, kp) = self.localize(tape, &self.params, loc, features, false, mode, rng)?;
                keypoints = Some(kp);
                box_source = Some(kp);
                delta_source = Some(h7);
                if self.phase == Phase::KeypointsOnly {
                    return Ok(ForwardOutput { batch, keypoints, parts: Vec::new() });
                }
            }
            (Variant::Separate, Phase::PartsFromFrozen) => {
                let frozen = self.frozen.as_ref().expect("frozen snapshot in the parts phase");
                let fx = tape.constant(centred);
                let ff = self.extract(tape, &frozen.params, &frozen.convs, fx, true)?;
                let (_, kp) = self.localize(tape, &frozen.params, &frozen.loc, ff, true, Mode::Eval, rng)?;
                keypoints = Some(kp);
                box_source = Some(kp);
                let loc = self.layout.loc.as_ref().expect("localization head");
                let flat = ops::flatten(tape, features);
                let (w, b) = leaf_pair(tape, &self.params, loc[0], false);
                let h6 = ops::fc_affine(tape, flat, w, b)?;
                let h6 = ops::relu(tape, h6);
                let h6 = ops::dropout(tape, h6, cfg.dropout, mode, rng)?;
                let (w, b) = leaf_pair(tape, &self.params, loc[1], false);
                let h7 = ops::fc_affine(tape, h6, w, b)?;
                delta_source = Some(ops::relu(tape, h7));
            }
            (Variant::Oracle, _) => {
                box_source = Some(tape.constant(keypoints_in.expect("checked above").clone()));
            }
            (Variant::Stn, _) => {}
        }
        if let Some(d) = self.layout.delta_stream {
            let pooled = ops::maxpool2d(tape, features, 2, 2)?;
            let flat = ops::flatten(tape, pooled);
            let (w, b) = leaf_pair(tape, &self.params, d, false);
            let h = ops::fc_affine(tape, flat, w, b)?;
            delta_source = Some(ops::relu(tape, h));
        }

        let mut parts = Vec::with_capacity(cfg.parts.len());
        for (t, part) in cfg.parts.iter().enumerate() {
            let (boxes, head_input) = if cfg.variant.has_parts() {
                let initial = match box_source {
                    Some(kp) => geometry::initial_boxes(tape, kp, part)?.0,
                    None => {
                        let f = cfg.stn_box_fraction;
                        let row = [f, f, 0.5 * (1.0 - f), 0.5 * (1.0 - f)];
                        let data: Vec<f64> = (0..batch).flat_map(|_| row).collect();
                        tape.constant(Tensor::from_f64(&[batch, 4], &data)?)
                    }
                };
                let (adjustment, adjusted) = if cfg.adaptive_enabled {
                    let src = delta_source.expect("offset source");
                    let d = self.layout.adj[t];
                    let (w, b) = leaf_pair(tape, &self.params, d, false);
                    let raw = ops::fc_affine(tape, src, w, b)?;
                    let adj = geometry::stabilize_rows(tape, raw)?;
                    (Some(adj), geometry::adjust_boxes(tape, initial, adj)?)
                } else {
                    (None, initial)
                };
                let ratio_loss = if cfg.ratio_loss_enabled {
                    Some(geometry::aspect_ratio_loss_rows(tape, adjusted, cfg.ratio.alpha)?)
                } else {
                    None
                };
                let final_boxes = geometry::clip_boxes(tape, adjusted, CLIP_RANGE.0, CLIP_RANGE.1)?;
                let theta = geometry::boxes_to_theta(tape, final_boxes)?;
                let sampled = sampler::sample_features(tape, features, theta, cfg.part_size, cfg.part_size)?;
                let flat = ops::flatten(tape, sampled);
                (Some(PartBoxes { initial, adjustment, adjusted, final_boxes, theta, ratio_loss }), flat)
            } else {
                (None, ops::flatten(tape, features))
            };
            let logits = self.head(tape, &self.layout.heads[t], head_input, mode, rng)?;
            parts.push(PartOutput { name: part.name.clone(), boxes, logits });
        }
        Ok(ForwardOutput { batch, keypoints, parts })
    }

    /// Adds the label-dependent losses, backpropagates the weighted total and
    /// accumulates parameter gradients. `labels[t][b]` is the class of part
    /// `t` for sample `b`.
    pub fn loss_and_backward(
        &mut self,
        tape: &mut Tape<T>,
        output: &ForwardOutput,
        labels: &[Vec<usize>],
        gt_keypoints: Option<&Tensor<T>>,
    ) -> Result<LossBreakdown> {
        let (total, breakdown) = self.loss(tape, output, labels, gt_keypoints)?;
        let grads = tape.backward(total)?;
        tape.accumulate_param_grads(&grads, &mut self.params);
        Ok(breakdown)
    }

    /// Records the weighted total loss without backpropagating.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        output: &ForwardOutput,
        labels: &[Vec<usize>],
        gt_keypoints: Option<&Tensor<T>>,
    ) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.config;
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut breakdown = LossBreakdown { keypoint: None, classification: Vec::new(), ratio: Vec::new(), total: 0.0 };
        let train_keypoints = cfg.variant.has_localization() && self.phase != Phase::PartsFromFrozen;
        if train_keypoints {
            let gt = gt_keypoints.ok_or_else(|| Error::Input("keypoint loss needs ground-truth keypoints".into()))?;
            let pred = output.keypoints.expect("keypoint prediction");
            let gt = tape.constant(gt.clone());
            let l = ops::l2_keypoint_loss(tape, pred, gt)?;
            breakdown.keypoint = Some(tape.value(l).item().as_f64());
            terms.push((l, cfg.loss_weights.keypoint));
        }
        if !output.parts.is_empty() {
            if labels.len() != output.parts.len() || labels.iter().any(|l| l.len() != output.batch) {
                return Err(Error::Input(format!(
                    "expected labels for {} parts x {} samples",
                    output.parts.len(),
                    output.batch
                )));
            }
            for (part, l) in output.parts.iter().zip(labels) {
                let ce = ops::softmax_cross_entropy(tape, part.logits, l)?;
                breakdown.classification.push(tape.value(ce).item().as_f64());
                terms.push((ce, cfg.loss_weights.attribute));
            }
            for part in &output.parts {
                if let Some(r) = part.boxes.as_ref().and_then(|b| b.ratio_loss) {
                    breakdown.ratio.push(tape.value(r).item().as_f64());
                    terms.push((r, cfg.ratio.weight));
                }
            }
        }
        let total = ops::weighted_sum(tape, &terms)?;
        breakdown.total = tape.value(total).item().as_f64();
        Ok((total, breakdown))
    }

    /// Evaluation-mode forward pass with results copied off the tape.
    pub fn predict(&self, images: &Tensor<T>, keypoints_in: Option<&Tensor<T>>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, images, keypoints_in, Mode::Eval, &mut rng)?;
        let rows = |v: Var, width: usize| -> Vec<Vec<f64>> {
            tape.value(v).data().chunks_exact(width).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
        };
        let keypoints = out
            .keypoints
            .map(|k| rows(k, 2 * self.config.num_keypoints).iter().map(|r| KeypointSet::from_flat(r)).collect::<Result<Vec<_>>>())
            .transpose()?;
        let boxes = self.config.variant.has_parts().then(|| {
            out.parts
                .iter()
                .map(|p| rows(p.boxes.as_ref().expect("part boxes").final_boxes, 4).iter().map(|r| BoundingBox::from_slice(r)).collect())
                .collect()
        });
        let probabilities = out
            .parts
            .iter()
            .map(|p| {
                let logits = tape.value(p.logits);
                let classes = logits.dim(1);
                ops::softmax_rows(logits).chunks_exact(classes).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
            })
            .collect();
        Ok(Prediction { keypoints, boxes, probabilities })
    }

    /// Trainable parameters plus the frozen snapshot, for checkpointing.
    pub fn checkpoint_store(&self) -> ParamStore<T> {
        let mut all = self.params.clone();
        if let Some(f) = &self.frozen {
            for p in f.params.iter() {
                all.add(p.name.clone(), p.value.clone(), 0.0);
            }
        }
        all
    }

    pub fn sidecar(&self) -> ModelSidecar {
        ModelSidecar { config: self.config.clone(), phase: self.phase }
    }

    /// Writes `<path>` (parameters) and `<path>.json` (configuration).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.checkpoint_store(), path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(&side, json).map_err(Error::io(&side))
    }

    /// Rebuilds a model from a checkpoint and its sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(Error::io(&side))?;
        let sidecar: ModelSidecar = serde_json::from_str(&text)?;
        let mut state = Self::build(sidecar.config, 0)?;
        if sidecar.phase == Phase::PartsFromFrozen {
            state.begin_parts_phase()?;
        }
        let mut values = checkpoint::read::<T>(path)?;
        let frozen_values: Vec<(String, Tensor<T>)> = values
            .iter()
            .filter(|(n, _)| n.starts_with(FROZEN_PREFIX))
            .cloned()
            .collect();
        values.retain(|(n, _)| !n.starts_with(FROZEN_PREFIX));
        state.params.load_values(values)?;
        match state.frozen.as_mut() {
            Some(f) => f.params.load_values(frozen_values)?,
            None if !frozen_values.is_empty() => {
                return Err(Error::Checkpoint("unexpected frozen parameters for this phase".into()))
            }
            None => {}
        }
        Ok(state)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn leaf_pair<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, d: Dense, constant: bool) -> (Var, Var) {
    if constant {
        (tape.constant(store.value(d.w).clone()), tape.constant(store.value(d.b).clone()))
    } else {
        (tape.param(store, d.w), tape.param(store, d.b))
    }
}

/// A seeded dropout stream for one training iteration.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let _: u64 = rng.random();
    rng
}
