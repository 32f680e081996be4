use std::path::{Path, PathBuf};

use burstsr_core::harness::checkpoint;
use burstsr_core::harness::config::HarnessConfig;
use burstsr_core::harness::dataset::{list_samples, load_sample};
use burstsr_core::harness::evalrun::evaluate_samples;
use burstsr_core::harness::train::cmd_train;
use burstsr_core::harness::cmd_synth;
use burstsr_core::model::{BsrtModel, ModelConfig, Preset};

fn eval_ckpt(ckpt: &Path, dataset: &Path, burst: usize) -> f64 {
    let _ = burst;
    let ck = checkpoint::load::<f32>(ckpt).unwrap();
    let (model, _) = burstsr_core::harness::evalrun::model_from_checkpoint(&ck).unwrap();
    let samples: Vec<_> = list_samples(dataset)
        .unwrap()
        .iter()
        .map(|d| load_sample(d).unwrap())
        .collect();
    let refs: Vec<_> = samples.iter().collect();
    evaluate_samples(&model, &refs).unwrap().mean_psnr
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map(|s| s.parse().unwrap()).unwrap_or(600);
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4e-4);
    let root = PathBuf::from("/tmp/burstsr_calib_c5");
    let _ = std::fs::remove_dir_all(&root);
    let ds = root.join("ds");

    let mut cfg = HarnessConfig::default();
    cfg.data.demo_images = 8;
    cfg.data.demo_size = 96;
    cfg.data.frames = 4;
    cfg.data.scale = 4;
    cfg.data.seed = 50;
    cfg.data.max_shift = 8.0;
    cfg.data.out_dir = ds.to_string_lossy().to_string();
    cmd_synth(&cfg).unwrap();

    // baseline
    let mut mc = ModelConfig::preset(Preset::Tiny);
    mc.burst = 4;
    let base_model = BsrtModel::<f32>::new(mc, 0).unwrap();
    let samples: Vec<_> = list_samples(&ds)
        .unwrap()
        .iter()
        .map(|d| load_sample(d).unwrap())
        .collect();
    let refs: Vec<_> = samples.iter().collect();
    let baseline = evaluate_samples(&base_model, &refs).unwrap().mean_psnr;
    println!("baseline psnr {baseline:.3}");

    cfg.model.preset = "tiny".to_string();
    cfg.model.burst = Some(4);
    cfg.train.dataset = cfg.data.out_dir.clone();
    cfg.train.out_dir = root.join("run").to_string_lossy().to_string();
    cfg.train.steps = steps;
    cfg.train.batch_size = 2;
    cfg.train.hr_crop = 64;
    cfg.train.seed = 51;
    cfg.train.lr = lr;
    cfg.train.eval_interval = 0;
    cfg.train.ckpt_interval = 200;
    cfg.train.val_fraction = 0.0;
    cfg.train.flow_loss_weight = 0.05;
    let t0 = std::time::Instant::now();
    let out = cmd_train(&cfg).unwrap();
    println!(
        "trained {} steps in {:.0}s: loss {:.5} -> {:.5}",
        out.steps_run,
        t0.elapsed().as_secs_f64(),
        out.first_loss,
        out.final_loss
    );
    let trained = eval_ckpt(&out.latest_ckpt, &ds, 4);
    println!("trained psnr {trained:.3}  gain {:.3} dB", trained - baseline);
}
