//! End-to-end harness behavior: dataset synthesis, short training runs,
//! checkpoint resume determinism, evaluation and inference consistency.

use std::path::{Path, PathBuf};

use burstsr_core::harness::checkpoint;
use burstsr_core::harness::config::HarnessConfig;
use burstsr_core::harness::dataset::{list_samples, load_sample};
use burstsr_core::harness::evalrun::{cmd_eval, cmd_infer, evaluate_samples, quantize_u16};
use burstsr_core::harness::pngio;
use burstsr_core::harness::train::cmd_train;
use burstsr_core::harness::cmd_synth;
use burstsr_core::metrics::psnr;
use burstsr_core::model::BsrtModel;
use burstsr_core::tensor::Tensor;
use burstsr_core::Error;

fn work_dir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("burstsr_pipe_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Config for a fast double-precision run on a small demo dataset.
fn fast_cfg(root: &Path) -> HarnessConfig {
    let mut cfg = HarnessConfig::default();
    cfg.data.demo_images = 4;
    cfg.data.demo_size = 64;
    cfg.data.frames = 3;
    cfg.data.scale = 4;
    cfg.data.seed = 11;
    cfg.data.out_dir = root.join("ds").to_string_lossy().to_string();
    cfg.model.preset = "tiny".to_string();
    cfg.model.channels = Some(8);
    cfg.train.dataset = cfg.data.out_dir.clone();
    cfg.train.out_dir = root.join("run").to_string_lossy().to_string();
    cfg.train.precision = "f64".to_string();
    cfg.train.batch_size = 2;
    cfg.train.hr_crop = 64;
    cfg.train.seed = 11;
    cfg.train.steps = 24;
    cfg.train.lr = 2e-4;
    cfg.train.eval_interval = 12;
    cfg.train.ckpt_interval = 12;
    cfg.train.val_fraction = 0.0;
    cfg.eval.checkpoint = root.join("run/latest.ckpt").to_string_lossy().to_string();
    cfg.eval.dataset = cfg.data.out_dir.clone();
    cfg.eval.report = root.join("run/report.txt").to_string_lossy().to_string();
    cfg.eval.log_path = root.join("run/train.log").to_string_lossy().to_string();
    cfg.eval.plot_dir = root.join("run/plots").to_string_lossy().to_string();
    cfg
}

#[test]
fn train_eval_infer_roundtrip_and_resume() {
    let root = work_dir("roundtrip");
    let cfg = fast_cfg(&root);
    let summary = cmd_synth(&cfg).unwrap();
    assert_eq!(summary.samples, 4);

    // uninterrupted run
    let out_a = cmd_train(&cfg).unwrap();
    assert_eq!(out_a.steps_run, 24);
    assert!(out_a.final_loss.is_finite());

    // interrupted at step 12, then resumed to 24
    let mut cfg_b = cfg.clone();
    cfg_b.train.out_dir = root.join("run_b").to_string_lossy().to_string();
    cfg_b.train.steps = 12;
    let mid = cmd_train(&cfg_b).unwrap();
    assert_eq!(mid.steps_run, 12);
    let mut cfg_b2 = cfg_b.clone();
    cfg_b2.train.steps = 24;
    cfg_b2.train.resume = root.join("run_b/latest.ckpt").to_string_lossy().to_string();
    let out_b = cmd_train(&cfg_b2).unwrap();
    assert_eq!(out_b.steps_run, 12);
    assert_eq!(
        out_a.final_loss.to_bits(),
        out_b.final_loss.to_bits(),
        "resumed run must reproduce the uninterrupted loss exactly: {} vs {}",
        out_a.final_loss,
        out_b.final_loss
    );
    // checkpoints hold bit-identical parameters
    let ck_a = checkpoint::load::<f64>(&out_a.latest_ckpt).unwrap();
    let ck_b = checkpoint::load::<f64>(&out_b.latest_ckpt).unwrap();
    for (i, name) in ck_a.params.names().iter().enumerate() {
        assert_eq!(
            ck_a.params.tensor(i).data(),
            ck_b.params.get(name).unwrap().data(),
            "{name}"
        );
    }

    // eval determinism: two runs produce identical reports
    let (report1, path1) = cmd_eval(&cfg).unwrap();
    let bytes1 = std::fs::read(&path1).unwrap();
    let (_report2, path2) = cmd_eval(&cfg).unwrap();
    let bytes2 = std::fs::read(&path2).unwrap();
    assert_eq!(bytes1, bytes2);

    // infer on a training sample reproduces the eval PSNR
    let samples = list_samples(Path::new(&cfg.eval.dataset)).unwrap();
    let mut icfg = cfg.clone();
    icfg.eval.burst_dir = samples[0].to_string_lossy().to_string();
    icfg.eval.out_path = root.join("run/sr.png").to_string_lossy().to_string();
    let png_path = cmd_infer(&icfg).unwrap();
    assert_eq!(pngio::png_bit_depth(&png_path).unwrap(), 16);
    let sr = pngio::read_png(&png_path).unwrap();
    let hr = pngio::read_png(&samples[0].join("hr.png")).unwrap();
    // output dims: (2 h s) x (2 w s) for 4 x h x w packed frames
    let s0 = load_sample(&samples[0]).unwrap();
    let (_, fh, fw) = s0.frames[0].dims3();
    assert_eq!(sr.shape(), &[3, 2 * fh * 4, 2 * fw * 4]);
    let p = psnr(&sr, &hr, 1.0).unwrap();
    let row = &report1.per_image[0];
    assert!(
        (p - row.1).abs() < 1e-6,
        "infer psnr {p} vs eval psnr {}",
        row.1
    );

    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn identity_init_eval_equals_naive_baseline() {
    let root = work_dir("baseline");
    let cfg = fast_cfg(&root);
    cmd_synth(&cfg).unwrap();
    let model_cfg = cfg.model.model_config(&cfg.data).unwrap();
    let model = BsrtModel::<f64>::new(model_cfg, cfg.train.seed).unwrap();
    let samples: Vec<_> = list_samples(Path::new(&cfg.train.dataset))
        .unwrap()
        .iter()
        .map(|d| load_sample(d).unwrap())
        .collect();
    let refs: Vec<_> = samples.iter().collect();
    let report = evaluate_samples(&model, &refs).unwrap();
    for (s, row) in samples.iter().zip(report.per_image.iter()) {
        let burst: Vec<Tensor<f64>> = s.frames[..model.cfg.burst].to_vec();
        let skip = quantize_u16(&model.skip_image(&burst[0]));
        let baseline = psnr(&skip, &s.hr, 1.0).unwrap();
        assert_eq!(
            row.1.to_bits(),
            baseline.to_bits(),
            "untrained model must score exactly the naive-demosaic baseline"
        );
    }
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn nan_loss_aborts_with_batch_diagnostic() {
    let root = work_dir("nan");
    let mut cfg = fast_cfg(&root);
    cfg.train.steps = 1;
    cmd_synth(&cfg).unwrap();
    let out = cmd_train(&cfg).unwrap();
    // poison one parameter and resume
    let mut ck = checkpoint::load::<f64>(&out.latest_ckpt).unwrap();
    let idx = ck.params.index_of("fusion.w").unwrap();
    ck.params.tensor_mut(idx).data_mut()[0] = f64::NAN;
    let poisoned = root.join("poisoned.ckpt");
    checkpoint::save(&poisoned, &ck).unwrap();
    cfg.train.steps = 3;
    cfg.train.resume = poisoned.to_string_lossy().to_string();
    match cmd_train(&cfg) {
        Err(Error::NanLoss { step, batch }) => {
            assert_eq!(step, 1);
            assert!(batch.contains("sample_"), "batch diagnostic: {batch}");
        }
        other => panic!("expected NanLoss, got {other:?}"),
    }
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn reference_frame_dependence_after_training() {
    let root = work_dir("refdep");
    let mut cfg = fast_cfg(&root);
    cfg.train.steps = 100;
    cfg.train.lr = 1e-3;
    cmd_synth(&cfg).unwrap();
    let out = cmd_train(&cfg).unwrap();
    let ck = checkpoint::load::<f64>(&out.latest_ckpt).unwrap();
    let (model, _) = burstsr_core::harness::evalrun::model_from_checkpoint(&ck).unwrap();
    let samples = list_samples(Path::new(&cfg.train.dataset)).unwrap();
    let s = load_sample(&samples[0]).unwrap();
    let burst: Vec<Tensor<f64>> = s.frames[..model.cfg.burst].to_vec();
    let full = model.forward(&burst).unwrap();
    let mut zeroed = burst.clone();
    for f in zeroed.iter_mut().skip(1) {
        *f = Tensor::zeros(f.shape());
    }
    let without = model.forward(&zeroed).unwrap();
    let diff = burstsr_core::tensor::max_abs_diff(&full, &without);
    assert!(
        diff > 0.0,
        "fusion must actually consume non-reference frames"
    );
    std::fs::remove_dir_all(&root).ok();
}
