use burstsr_core::autodiff::Tape;
use burstsr_core::flow::{estimate_pyramid_t, FlowNetConfig, FlowNetParams};
use burstsr_core::harness::dataset::demo_texture;
use burstsr_core::harness::optim::Adam;
use burstsr_core::params::BoundParams;
use burstsr_core::raw::{apply_inverse_pipeline, degrade, naive_demosaic, synthesize_burst, unpack, BurstConfig, NoiseParams, PackedRaw, TransformParams};
use burstsr_core::rng::Rng;
use burstsr_core::tensor::Tensor;

fn rgb_view(frame: &PackedRaw) -> Tensor<f32> {
    naive_demosaic(&unpack(frame).data).cast()
}

fn avg_pool(f: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = f.dims3();
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    for ci in 0..c {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let s = f.at3(ci, 2 * y, 2 * x) + f.at3(ci, 2 * y, 2 * x + 1)
                    + f.at3(ci, 2 * y + 1, 2 * x) + f.at3(ci, 2 * y + 1, 2 * x + 1);
                out.set3(ci, y, x, s * 0.25);
            }
        }
    }
    out
}

fn interior_epe(f: &Tensor<f32>, gx: f64, gy: f64, margin: usize) -> f64 {
    let (_, h, w) = f.dims3();
    let hw = h * w;
    let mut epe = 0.0f64;
    let mut n = 0usize;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let p = y * w + x;
            let ex = f.data()[p] as f64 - gx;
            let ey = f.data()[hw + p] as f64 - gy;
            epe += (ex * ex + ey * ey).sqrt();
            n += 1;
        }
    }
    epe / n as f64
}

fn run_config(levels: usize, hidden: usize, steps: usize, lr: f64) {
    let scale = 2usize;
    let cfg = FlowNetConfig { levels, hidden };
    let mut rng = Rng::new(400);
    let mut params = FlowNetParams::<f32>::init(cfg, &mut rng);
    let mut opt = Adam::new(&params.set, 0.9, 0.999);
    let burst_cfg = |seed: u64| BurstConfig {
        frames: 3, scale, max_shift: 10.0, max_rot_deg: 0.0,
        read_range: (0.0, 0.0), shot_range: (0.0, 0.0), seed,
    };
    let mut pool: Vec<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> = Vec::new();
    for i in 0..200u64 {
        let hr = demo_texture(64, 1000 + i);
        let b = synthesize_burst(&hr, &burst_cfg(50 + i)).unwrap();
        let reference = rgb_view(&b.frames[0]);
        for j in 1..3 {
            pool.push((rgb_view(&b.frames[j]), reference.clone(), b.gt_flows.as_ref().unwrap()[j].cast()));
        }
    }
    for step in 0..steps {
        let mut tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&mut tape, &params.set, &[]);
        let mut terms = Vec::new();
        for b in 0..4usize {
            let (img, reference, gt) = &pool[(step * 4 + b) % pool.len()];
            let iv = tape.constant(img.clone());
            let rv = tape.constant(reference.clone());
            let pyr = estimate_pyramid_t(&mut tape, iv, rv, &bp, "flow", cfg.levels);
            let gt2 = avg_pool(gt).scale(0.5);
            let gt3 = avg_pool(&gt2).scale(0.5);
            for (f, g, margin) in [(pyr.f1, gt.clone(), 6usize), (pyr.f2, gt2, 3), (pyr.f3, gt3, 1)] {
                let (_, fh, fw) = g.dims3();
                let mut mask = Tensor::zeros(&[2, fh, fw]);
                let mut count = 0.0f32;
                for ch in 0..2 {
                    for y in margin..fh - margin {
                        for x in margin..fw - margin {
                            mask.set3(ch, y, x, 1.0);
                            count += 1.0;
                        }
                    }
                }
                let gv = tape.constant(g);
                let mv = tape.constant(mask);
                let d = tape.sub(f, gv);
                let a = tape.abs(d);
                let ma = tape.mul(a, mv);
                let s = tape.sum_all(ma);
                terms.push(tape.scale_var(s, 1.0 / count));
            }
        }
        let mut total = terms[0];
        for &t in &terms[1..] { total = tape.add(total, t); }
        let total = tape.scale_var(total, 1.0 / terms.len() as f32);
        let loss_v = tape.value(total).data()[0];
        if step % 500 == 0 { println!("step {step}: loss {loss_v:.4}"); }
        let mut grads = tape.backward(total);
        let mut g = bp.collect_grads(&mut grads);
        burstsr_core::harness::optim::clip_global_norm(&mut g, 5.0);
        let lr_now = if step >= 5500 { lr * 0.25 } else if step >= 4000 { lr * 0.5 } else { lr };
        opt.step(&mut params.set, &g, lr_now);
    }
    let mut mean1 = 0.0;
    for (i, (kx, ky)) in [(0u64, (1i32, -1i32)), (1, (-2, 2)), (2, (3, 0)), (3, (0, -4)), (4, (-3, -2))] {
        let hr = demo_texture(64, 2000 + i);
        let cam = burstsr_core::raw::draw_camera_params(&mut Rng::new(3000 + i));
        let hr_linear = apply_inverse_pipeline(&hr, &cam).unwrap();
        let t = TransformParams { dx: (scale as i32 * kx) as f64, dy: (scale as i32 * ky) as f64, rot: 0.0 };
        let zero = NoiseParams::default();
        let reference = degrade(&hr_linear, &TransformParams::identity(), scale, &zero, &mut Rng::new(1)).unwrap();
        let moved = degrade(&hr_linear, &t, scale, &zero, &mut Rng::new(1)).unwrap();
        let pyr = burstsr_core::flow::estimate_pyramid(&rgb_view(&moved), &rgb_view(&reference), &params).unwrap();
        let (gx, gy) = (-(kx as f64), -(ky as f64));
        let e1 = interior_epe(&pyr.f1, gx, gy, 6);
        println!("  shift ({kx},{ky}): f1 epe {e1:.3}");
        mean1 += e1;
    }
    println!("levels={levels} hidden={hidden} steps={steps}: f1_epe={:.3}", mean1 / 5.0);
}

fn main() {
    run_config(4, 16, 7000, 1e-3);
}
