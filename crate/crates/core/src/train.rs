//! SGD with momentum, the step schedule and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::{iteration_rng, ModelConfig, ModelState, Phase, Variant};
use crate::synth::Dataset;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Iterations per training phase.
    pub iterations: usize,
    /// First iteration that runs at the decayed rate.
    pub decay_iteration: usize,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { base_lr: 0.0008, momentum: 0.9, batch_size: 32, iterations: 4000, decay_iteration: 2000, decay_factor: 0.1 }
    }
}

impl OptimizerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            v.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if self.iterations == 0 {
            v.push("iterations must be at least 1".into());
        }
        if self.decay_iteration >= self.iterations {
            v.push(format!("decay_iteration {} must be below iterations {}", self.decay_iteration, self.iterations));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            v.push(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
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

    /// Learning rate for a parameter with multiplier `mult` at `iteration`.
    pub fn effective_lr(&self, iteration: usize, mult: f64) -> f64 {
        if iteration < self.decay_iteration {
            self.base_lr * mult
        } else {
            self.decay_factor * self.base_lr * mult
        }
    }
}

/// Momentum buffers, one per parameter, created on first use.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }

    /// Applies one momentum step to every trainable parameter and clears all
    /// gradients. Nothing is updated when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, config: &OptimizerConfig, iteration: usize) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && !p.grad.all_finite()) {
            return Err(Error::NonFiniteGrad { name: p.name.clone(), iteration });
        }
        self.velocity.resize(store.len(), None);
        let m = T::of(config.momentum);
        for (p, slot) in store.iter_mut().zip(self.velocity.iter_mut()) {
            if p.trainable && p.lr_mult != 0.0 {
                let lr = T::of(config.effective_lr(iteration, p.lr_mult));
                let v = slot.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                for ((v, x), &g) in v.data_mut().iter_mut().zip(p.value.data_mut()).zip(p.grad.data()) {
                    *v = m * *v - lr * g;
                    *x = *x + *v;
                }
            }
            p.grad.fill(T::zero());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final model.
    #[serde(default)]
    pub checkpoint_every: usize,
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Counts across phases.
    pub iteration: usize,
    pub phase: Phase,
    pub total: f64,
    pub keypoint: Option<f64>,
    pub classification: Vec<f64>,
    pub ratio: Vec<f64>,
    /// Base rate after the schedule.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: ModelState<T>,
    pub log: Vec<LogRow>,
    /// Final model path when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

pub const LOG_FILE: &str = "log.csv";
pub const MODEL_FILE: &str = "model.aprt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Derives an independent 64-bit seed for `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ tag) ^ index)
}

const ORDER_TAG: u64 = 1;
const DROPOUT_TAG: u64 = 2;

/// Checks that a dataset matches the model's input and label layout.
pub fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let cfg = &data.manifest.config;
    let mut v = Vec::new();
    if cfg.image_size != model.image_size {
        v.push(format!("dataset images are {0}x{0}, model expects {1}x{1}", cfg.image_size, model.image_size));
    }
    if cfg.mode.num_keypoints() != model.num_keypoints {
        v.push(format!("dataset has {} keypoints, model expects {}", cfg.mode.num_keypoints(), model.num_keypoints));
    }
    if cfg.mode.class_counts().as_slice() != model.class_counts.as_slice() {
        v.push(format!("dataset class counts {:?} differ from model {:?}", cfg.mode.class_counts(), model.class_counts));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v))
    }
}

fn log_header(model: &ModelConfig) -> Vec<String> {
    let mut h = vec!["iteration".to_string(), "phase".into(), "total".into(), "keypoint".into()];
    h.extend(model.parts.iter().map(|p| format!("cls_{}", p.name)));
    if model.variant.has_parts() && model.ratio_loss_enabled {
        h.extend(model.parts.iter().map(|p| format!("ratio_{}", p.name)));
    }
    h.push("lr".into());
    h
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Joint => "joint",
        Phase::KeypointsOnly => "keypoints",
        Phase::PartsFromFrozen => "parts",
    }
}

/// Writes the loss log as CSV; absent components are empty cells.
pub fn write_log(path: &Path, model: &ModelConfig, rows: &[LogRow]) -> Result<()> {
    let header = log_header(model);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    let ratio_cols = header.iter().filter(|h| h.starts_with("ratio_")).count();
    let cls_cols = model.parts.len();
    for r in rows {
        let mut rec = vec![r.iteration.to_string(), phase_name(r.phase).into(), r.total.to_string()];
        rec.push(r.keypoint.map(|k| k.to_string()).unwrap_or_default());
        for i in 0..cls_cols {
            rec.push(r.classification.get(i).map(|c| c.to_string()).unwrap_or_default());
        }
        for i in 0..ratio_cols {
            rec.push(r.ratio.get(i).map(|c| c.to_string()).unwrap_or_default());
        }
        rec.push(r.lr.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Splits the iteration budget into phases. `separate` spends the first half
/// on keypoints and the second half on parts, each half running the schedule
/// compressed to its length, so every variant takes the same number of steps.
pub fn phase_schedules(variant: Variant, opt: &OptimizerConfig) -> Vec<(Phase, OptimizerConfig)> {
    if variant != Variant::Separate {
        return vec![(Phase::Joint, opt.clone())];
    }
    let first = opt.iterations / 2;
    [(Phase::KeypointsOnly, first), (Phase::PartsFromFrozen, opt.iterations - first)]
        .into_iter()
        .map(|(phase, len)| {
            let decay_iteration = opt.decay_iteration * len / opt.iterations.max(1);
            (phase, OptimizerConfig { iterations: len, decay_iteration, ..opt.clone() })
        })
        .collect()
}

/// Trains a fresh model. `separate` runs a keypoint phase followed by a parts
/// phase (see [`phase_schedules`]); every other variant trains jointly. With `out`, writes periodic checkpoints, the final model
/// and `log.csv` there.
pub fn train<T: Scalar>(config: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome<T>> {
    config.optimizer.validate()?;
    check_compatible(&config.model, data)?;
    let opt = &config.optimizer;
    let batch_size = opt.batch_size.min(data.len());
    let batches_per_epoch = data.len() / batch_size;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(Error::io(dir))?;
    }
    let phases = phase_schedules(config.model.variant, opt);
    if phases.iter().any(|(_, p)| p.iterations == 0) {
        return Err(Error::config("separate training needs at least 2 iterations, one per phase"));
    }
    let mut model = ModelState::<T>::build(config.model.clone(), config.seed)?;
    let mut log = Vec::with_capacity(opt.iterations);
    let mut last_good: Option<PathBuf> = None;
    let mut order: (usize, Vec<usize>) = (usize::MAX, Vec::new());
    let dropout_seed = derive_seed(config.seed, DROPOUT_TAG, 0);
    let mut offset = 0;
    for (phase, opt) in &phases {
        let phase = *phase;
        if phase == Phase::PartsFromFrozen {
            model.begin_parts_phase()?;
        }
        let mut sgd = Sgd::new();
        for it in 0..opt.iterations {
            let global = offset + it;
            let epoch = global / batches_per_epoch;
            if order.0 != epoch {
                order = (epoch, data.shuffled_order(derive_seed(config.seed, ORDER_TAG, epoch as u64)));
            }
            let slot = global % batches_per_epoch;
            let batch = data.batch::<T>(&order.1[slot * batch_size..(slot + 1) * batch_size]);
            let mut tape = Tape::new();
            let mut rng = iteration_rng(dropout_seed, global as u64);
            let fwd = model.forward(&mut tape, &batch.images, Some(&batch.keypoints), Mode::Train, &mut rng)?;
            let loss = model.loss_and_backward(&mut tape, &fwd, &batch.labels, Some(&batch.keypoints))?;
            let diverged = |reason: String, log: &[LogRow]| -> Error {
                if let Some(dir) = out {
                    let _ = write_log(&dir.join(LOG_FILE), &config.model, log);
                }
                Error::Diverged { iteration: global, reason, last_checkpoint: last_good.clone() }
            };
            if !loss.total.is_finite() {
                return Err(diverged(format!("loss is {}", loss.total), &log));
            }
            if let Err(e) = sgd.step(&mut model.params, opt, it) {
                return Err(diverged(e.to_string(), &log));
            }
            log.push(LogRow {
                iteration: global,
                phase,
                total: loss.total,
                keypoint: loss.keypoint,
                classification: loss.classification,
                ratio: loss.ratio,
                lr: opt.effective_lr(it, 1.0),
            });
            if (global + 1) % 100 == 0 {
                log::info!("iteration {} loss {:.5}", global + 1, log[global].total);
            }
            if let Some(dir) = out {
                if config.checkpoint_every > 0 && (global + 1) % config.checkpoint_every == 0 {
                    let path = dir.join(CHECKPOINT_DIR).join(format!("iter_{:06}.aprt", global + 1));
                    model.save(&path)?;
                    last_good = Some(path);
                }
            }
        }
        offset += opt.iterations;
    }
    let checkpoint = match out {
        Some(dir) => {
            let path = dir.join(MODEL_FILE);
            model.save(&path)?;
            write_log(&dir.join(LOG_FILE), &config.model, &log)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { model, log, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, lr_mult: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(value), lr_mult);
        s
    }

    #[test]
    fn plain_step() {
        let cfg = OptimizerConfig { base_lr: 0.1, momentum: 0.0, ..Default::default() };
        let mut s = scalar_store(0.0, 1.0);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        Sgd::new().step(&mut s, &cfg, 0).unwrap();
        let p = s.iter().next().unwrap();
        assert_eq!(p.value.item(), -0.1);
        assert_eq!(p.grad.item(), 0.0);
    }

    #[test]
    fn box_branch_rate() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.effective_lr(0, 0.1), 0.0008 * 0.1);
        assert!((cfg.effective_lr(1999, 0.1) - 0.00008).abs() < 1e-18);
        assert_eq!(cfg.effective_lr(2000, 0.1), 0.1 * 0.0008 * 0.1);
        assert_eq!(cfg.effective_lr(2000, 1.0), 0.1 * 0.0008);
    }

    #[test]
    fn quadratic_contracts() {
        let cfg = OptimizerConfig { base_lr: 0.4, momentum: 0.0, iterations: 100, decay_iteration: 99, ..Default::default() };
        let mut s = scalar_store(1.0, 1.0);
        let mut sgd = Sgd::new();
        for k in 0..25 {
            let x = s.iter().next().unwrap().value.item();
            s.iter_mut().next().unwrap().grad = Tensor::scalar(2.0 * x);
            sgd.step(&mut s, &cfg, k).unwrap();
        }
        let x = s.iter().next().unwrap().value.item();
        // (1 - 2 lr)^25 = 0.2^25
        assert!(x.abs() < 1e-3);
        assert!((x - 0.2f64.powi(25)).abs() < 1e-20);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let cfg = OptimizerConfig::default();
        let mut s = scalar_store(1.0, 1.0);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(f64::NAN);
        match Sgd::new().step(&mut s, &cfg, 3) {
            Err(Error::NonFiniteGrad { name, iteration }) => assert_eq!((name.as_str(), iteration), ("x", 3)),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let cfg = OptimizerConfig::default();
        let mut s = scalar_store(1.0, 1.0);
        let p = s.iter_mut().next().unwrap();
        p.trainable = false;
        p.grad = Tensor::scalar(5.0);
        Sgd::new().step(&mut s, &cfg, 0).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0);
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = OptimizerConfig { base_lr: 1.0, momentum: 0.5, ..Default::default() };
        let mut s = scalar_store(0.0, 1.0);
        let mut sgd = Sgd::new();
        for _ in 0..2 {
            s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
            sgd.step(&mut s, &cfg, 0).unwrap();
        }
        // v1 = -1, v2 = -1.5
        assert_eq!(s.iter().next().unwrap().value.item(), -2.5);
    }

    #[test]
    fn config_violations() {
        let cfg = OptimizerConfig { base_lr: 0.0, decay_iteration: 5000, ..Default::default() };
        assert_eq!(cfg.violations().len(), 2);
    }

    #[test]
    fn separate_splits_the_budget() {
        let opt = OptimizerConfig { iterations: 2001, decay_iteration: 1000, ..Default::default() };
        let phases = phase_schedules(Variant::Separate, &opt);
        let lens: Vec<(Phase, usize, usize)> = phases.iter().map(|(p, o)| (*p, o.iterations, o.decay_iteration)).collect();
        assert_eq!(lens, vec![(Phase::KeypointsOnly, 1000, 499), (Phase::PartsFromFrozen, 1001, 500)]);
        assert_eq!(phase_schedules(Variant::Ours, &opt), vec![(Phase::Joint, opt.clone())]);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 2, 0));
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 1, 1));
        assert_eq!(derive_seed(9, 3, 4), derive_seed(9, 3, 4));
    }
}
