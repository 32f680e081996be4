use burstsr_core::harness::optim::Adam;
use burstsr_core::model::{BsrtModel, ModelConfig, Preset};
use burstsr_core::autodiff::Tape;
use burstsr_core::rng::Rng;
use burstsr_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::preset(Preset::Tiny);
    let mut model = BsrtModel::<f32>::new(cfg, 1).unwrap();
    let mut rng = Rng::new(2);
    let burst: Vec<Tensor<f32>> = (0..4)
        .map(|_| Tensor::from_vec(&[4, 8, 8], (0..256).map(|_| rng.uniform() as f32).collect()))
        .collect();
    let hr = Tensor::from_vec(&[3, 64, 64], (0..12288).map(|_| rng.uniform() as f32).collect());
    let mut opt = Adam::new(&model.params, 0.9, 0.999);
    // warmup
    for _ in 0..3 {
        let mut tape = Tape::<f32>::new();
        let bp = model.bind(&mut tape);
        let out = model.forward_t(&mut tape, &bp, &burst).unwrap();
        let hrv = tape.constant(hr.clone());
        let d = tape.sub(out, hrv);
        let a = tape.abs(d);
        let loss = tape.mean_all(a);
        let mut grads = tape.backward(loss);
        let g = bp.collect_grads(&mut grads);
        opt.step(&mut model.params, &g, 1e-4);
    }
    let t0 = Instant::now();
    let iters = 20;
    for _ in 0..iters {
        let mut tape = Tape::<f32>::new();
        let bp = model.bind(&mut tape);
        let out = model.forward_t(&mut tape, &bp, &burst).unwrap();
        let hrv = tape.constant(hr.clone());
        let d = tape.sub(out, hrv);
        let a = tape.abs(d);
        let loss = tape.mean_all(a);
        let mut grads = tape.backward(loss);
        let g = bp.collect_grads(&mut grads);
        opt.step(&mut model.params, &g, 1e-4);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("tiny N=4 8x8 step: {:.3} s  ({:.0} steps/min)", dt, 60.0 / dt);
    // forward only
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = model.forward(&burst).unwrap();
    }
    println!("forward only: {:.3} s", t0.elapsed().as_secs_f64() / iters as f64);
}
