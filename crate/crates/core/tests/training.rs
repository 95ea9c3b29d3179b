use adapart::autodiff::{checkpoint, Mode, Tape};
use adapart::model::{ModelConfig, ModelState, Phase, Variant};
use adapart::synth::{self, Dataset, DatasetMode, SynthConfig};
use adapart::train::{self, OptimizerConfig, Sgd, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(seed: u64, n: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(seed, n, &SynthConfig::new(DatasetMode::Mpii), dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    (dir, data)
}

fn small(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::human(variant);
    cfg.extractor_channels = vec![8, 16, 32];
    cfg.dropout = 0.0;
    cfg
}

#[test]
fn two_hundred_iterations_are_reproducible() {
    let (_dir, data) = dataset(1, 48);
    let mut model = small(Variant::Ours);
    model.extractor_channels = vec![4, 8, 8];
    model.dropout = 0.5;
    let config = TrainConfig {
        model,
        optimizer: OptimizerConfig { iterations: 200, decay_iteration: 100, batch_size: 8, base_lr: 0.01, ..Default::default() },
        seed: 3,
        checkpoint_every: 0,
    };
    let a = train::train::<f32>(&config, &data, None).unwrap();
    let b = train::train::<f32>(&config, &data, None).unwrap();
    assert_eq!(a.log.len(), 200);
    assert_eq!(checkpoint::encode(&a.model.params), checkpoint::encode(&b.model.params));
}

#[test]
fn keypoint_phase_leaves_classifiers_untouched() {
    let (_dir, data) = dataset(2, 16);
    let mut state = ModelState::<f32>::build(small(Variant::Separate), 4).unwrap();
    assert_eq!(state.phase, Phase::KeypointsOnly);
    let snapshot = |s: &ModelState<f32>| -> Vec<Vec<u32>> {
        s.classifier_params().iter().map(|&id| s.params.value(id).data().iter().map(|v| v.to_bits()).collect()).collect()
    };
    let before = snapshot(&state);
    assert!(!before.is_empty());
    let localization_before = checkpoint::encode(&state.params);
    let opt = OptimizerConfig { base_lr: 0.01, ..Default::default() };
    let mut sgd = Sgd::new();
    let order = data.shuffled_order(0);
    for (it, batch) in data.batches::<f32>(&order, 8).enumerate() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(it as u64);
        let out = state.forward(&mut tape, &batch.images, Some(&batch.keypoints), Mode::Train, &mut rng).unwrap();
        assert!(out.parts.is_empty());
        let loss = state.loss_and_backward(&mut tape, &out, &batch.labels, Some(&batch.keypoints)).unwrap();
        assert_eq!(loss.total, loss.keypoint.unwrap());
        sgd.step(&mut state.params, &opt, it).unwrap();
    }
    assert_eq!(snapshot(&state), before);
    assert_ne!(checkpoint::encode(&state.params), localization_before, "the keypoint pathway trained");
}

/// Keypoint regression on 2000 samples at the settings used by the
/// experiment suite: the loss must fall below a quarter of where it started.
#[test]
fn ours_keypoint_loss_drops_below_a_quarter() {
    let (_dir, data) = dataset(1, 2000);
    let config = TrainConfig {
        model: small(Variant::Ours),
        optimizer: OptimizerConfig { iterations: 600, decay_iteration: 400, base_lr: 0.01, ..Default::default() },
        seed: 0,
        checkpoint_every: 0,
    };
    let log = train::train::<f32>(&config, &data, None).unwrap().log;
    let kp: Vec<f64> = log.iter().map(|r| r.keypoint.unwrap()).collect();
    let initial = kp[0];
    let last = &kp[kp.len() - 50..];
    let final_loss = last.iter().sum::<f64>() / last.len() as f64;
    assert!(final_loss < 0.25 * initial, "initial {initial}, final {final_loss}");
}
