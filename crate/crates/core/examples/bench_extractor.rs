use std::time::Instant;

use adapart::autodiff::{ops, Conv2dSpec, ParamStore, Tape};
use adapart::Tensor;
use rand::SeedableRng;

fn main() {
    let chans: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let chans = if chans.is_empty() { vec![16, 32, 32] } else { chans };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &c) in chans.iter().enumerate() {
        let k = store.add_xavier(format!("c{i}.w"), &[c, cin, 3, 3], cin * 9, c * 9, 1.0, &mut rng);
        let b = store.add_zeros(format!("c{i}.b"), &[c], 1.0);
        layers.push((k, b));
        cin = c;
    }
    let x = Tensor::<f32>::full(&[32, 3, 64, 64], 0.5);
    let iters = 10;
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        for &(k, b) in &layers {
            let (kv, bv) = (tape.param(&store, k), tape.param(&store, b));
            h = ops::conv2d(&mut tape, h, kv, bv, Conv2dSpec { stride: 1, pad: 1 }).unwrap();
            h = ops::relu(&mut tape, h);
            h = ops::maxpool2d(&mut tape, h, 2, 2).unwrap();
        }
        let n = tape.value(h).len();
        let loss = ops::dot_const(&mut tape, h, vec![1.0; n]);
        let g = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&g, &mut store);
    }
    println!("{:?}: {:.1} ms / iter (batch 32)", chans, t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}
