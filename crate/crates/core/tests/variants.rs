use adapart::autodiff::{Mode, Tape};
use adapart::geometry::{initial_boxes, RatioLossConfig};
use adapart::model::{ForwardOutput, LossWeights, ModelConfig, ModelState, Variant};
use adapart::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PARTS: usize = 3;

fn small(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::human(variant);
    cfg.extractor_channels = vec![4, 8, 8];
    cfg.dropout = 0.0;
    cfg
}

fn images(batch: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(&[batch, 3, 64, 64], |i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 1000.0)
}

fn keypoints(batch: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(&[batch, 28], |i| 0.1 + 0.8 * (((i as u64 + 3) * 40503 + seed * 7919) % 997) as f64 / 997.0)
}

fn labels(batch: usize) -> Vec<Vec<usize>> {
    (0..PARTS).map(|t| (0..batch).map(|b| (b + t) % 3).collect()).collect()
}

fn run(state: &ModelState<f64>, tape: &mut Tape<f64>, x: &Tensor<f64>, kp: Option<&Tensor<f64>>) -> ForwardOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    state.forward(tape, x, kp, Mode::Eval, &mut rng).unwrap()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn oracle_two_point_torso_box() {
    let state = ModelState::<f64>::build(small(Variant::Oracle), 1).unwrap();
    // torso = keypoints {2, 3, 5, 6, 8, 11}; keypoint 2 sits at one corner, the rest at the other
    let mut kp = vec![0.4; 28];
    for k in [2usize, 3, 5, 6, 8, 11] {
        let p = if k == 2 { [0.2, 0.3] } else { [0.6, 0.5] };
        kp[2 * k..2 * k + 2].copy_from_slice(&p);
    }
    let kp = Tensor::from_f64(&[1, 28], &kp).unwrap();
    let mut tape = Tape::new();
    let out = run(&state, &mut tape, &images(1, 0), Some(&kp));
    let torso = out.parts.iter().find(|p| p.name == "torso").unwrap();
    let got = tape.value(torso.boxes.as_ref().unwrap().initial).data().to_vec();
    for (g, e) in got.iter().zip([0.6, 0.3, 0.1, 0.25]) {
        assert!((g - e).abs() < 1e-12, "{got:?}");
    }
}

#[test]
fn stn_uses_one_centred_box() {
    let state = ModelState::<f64>::build(small(Variant::Stn), 2).unwrap();
    let mut tape = Tape::new();
    let out = run(&state, &mut tape, &images(5, 1), None);
    assert!(out.keypoints.is_none());
    for part in &out.parts {
        let initial = tape.value(part.boxes.as_ref().unwrap().initial);
        for row in initial.data().chunks(4) {
            assert_eq!(row, [0.6, 0.6, 0.2, 0.2]);
        }
    }
}

#[test]
fn stn_ignores_keypoints() {
    let state = ModelState::<f64>::build(small(Variant::Stn), 2).unwrap();
    let x = images(3, 4);
    let logits = |kp: Option<&Tensor<f64>>| -> Vec<Vec<u64>> {
        let mut tape = Tape::new();
        let out = run(&state, &mut tape, &x, kp);
        out.parts.iter().map(|p| bits(tape.value(p.logits))).collect()
    };
    let base = logits(None);
    assert_eq!(base, logits(Some(&keypoints(3, 1))));
    assert_eq!(base, logits(Some(&keypoints(3, 2))));
}

#[test]
fn zero_offsets_reproduce_keypoint_boxes() {
    let state = ModelState::<f64>::build(small(Variant::Ours), 5).unwrap();
    let mut tape = Tape::new();
    let out = run(&state, &mut tape, &images(4, 2), None);
    let predicted = tape.value(out.keypoints.unwrap()).clone();
    for (part, def) in out.parts.iter().zip(&state.config.parts) {
        let b = part.boxes.as_ref().unwrap();
        assert_eq!(bits(tape.value(b.adjusted)), bits(tape.value(b.initial)), "{}", part.name);
        let mut fresh = Tape::new();
        let kp = fresh.constant(predicted.clone());
        let (direct, _) = initial_boxes(&mut fresh, kp, def).unwrap();
        assert_eq!(bits(fresh.value(direct)), bits(tape.value(b.adjusted)), "{}", part.name);
    }
}

#[test]
fn zero_weights_give_zero_total_and_finite_grads() {
    let mut cfg = small(Variant::Ours);
    cfg.loss_weights = LossWeights { keypoint: 0.0, attribute: 0.0 };
    cfg.ratio = RatioLossConfig { weight: 0.0, ..cfg.ratio };
    let mut state = ModelState::<f64>::build(cfg, 6).unwrap();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let kp = keypoints(2, 0);
    let out = state.forward(&mut tape, &images(2, 3), Some(&kp), Mode::Train, &mut rng).unwrap();
    let loss = state.loss_and_backward(&mut tape, &out, &labels(2), Some(&kp)).unwrap();
    assert_eq!(loss.total, 0.0);
    for p in state.params.iter() {
        assert!(p.grad.data().iter().all(|g| g.is_finite()), "{}", p.name);
    }
}

#[test]
fn initial_losses_are_finite_for_every_variant() {
    for variant in [Variant::Full, Variant::Stn, Variant::Separate, Variant::Oracle, Variant::Ours] {
        let mut state = ModelState::<f64>::build(small(variant), 7).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kp = keypoints(2, 5);
        let out = state.forward(&mut tape, &images(2, 5), Some(&kp), Mode::Train, &mut rng).unwrap();
        let loss = state.loss_and_backward(&mut tape, &out, &labels(2), Some(&kp)).unwrap();
        assert!(loss.total.is_finite() && loss.total > 0.0, "{variant:?}: {}", loss.total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn without_adaptation_final_boxes_are_initial(
        seed in 0u64..1000,
        variant in prop::sample::select(vec![Variant::Ours, Variant::Stn, Variant::Oracle]),
    ) {
        let mut cfg = small(variant);
        cfg.adaptive_enabled = false;
        let state = ModelState::<f64>::build(cfg, seed).unwrap();
        let kp = keypoints(2, seed);
        let mut tape = Tape::new();
        let out = run(&state, &mut tape, &images(2, seed), Some(&kp));
        for part in &out.parts {
            let b = part.boxes.as_ref().unwrap();
            prop_assert!(b.adjustment.is_none());
            prop_assert_eq!(b.adjusted, b.initial);
            // inside the clip range, clipping is the identity
            let initial = tape.value(b.initial);
            let inside = initial.data().chunks(4).all(|r| r[2] >= -0.25 && r[3] >= -0.25 && r[2] + r[0] <= 1.25 && r[3] + r[1] <= 1.25);
            if inside {
                prop_assert_eq!(bits(tape.value(b.final_boxes)), bits(initial));
            }
        }
    }
}
