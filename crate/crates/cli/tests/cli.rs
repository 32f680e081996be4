//! CLI contract: exit codes, status lines, config overrides and the
//! environment seed override, exercised through the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn work_dir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("burstsr_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn burstsr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_burstsr"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn last_line(out: &Output) -> String {
    stdout(out).lines().last().unwrap_or_default().to_string()
}

#[test]
fn unknown_command_fails_with_status_line() {
    let out = burstsr(&["frobnicate"], &[]);
    assert!(!out.status.success());
    let line = last_line(&out);
    assert!(line.starts_with("status=error"), "{line}");
}

#[test]
fn synth_train_eval_infer_plot_succeed() {
    let root = work_dir("full");
    let ds = root.join("ds");
    let run = root.join("run");
    let base_sets: Vec<String> = vec![
        format!("data.out_dir={}", ds.display()),
        "data.demo_images=2".into(),
        "data.demo_size=64".into(),
        "data.frames=2".into(),
        "data.seed=5".into(),
        "model.channels=8".into(),
        format!("train.dataset={}", ds.display()),
        format!("train.out_dir={}", run.display()),
        "train.steps=2".into(),
        "train.batch_size=1".into(),
        "train.eval_interval=2".into(),
        "train.val_fraction=0.0".into(),
    ];
    let to_args = |extra: &[String]| -> Vec<String> {
        let mut v = Vec::new();
        for s in base_sets.iter().chain(extra.iter()) {
            v.push("--set".to_string());
            v.push(s.clone());
        }
        v
    };

    let args: Vec<String> = to_args(&[]);
    let mut synth_args = vec!["synth".to_string()];
    synth_args.extend(args.clone());
    let out = burstsr(
        &synth_args.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        &[],
    );
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(last_line(&out).starts_with("status=ok command=synth samples=2"));
    assert!(ds.join("manifest").exists());

    let mut train_args = vec!["train".to_string()];
    train_args.extend(args.clone());
    let out = burstsr(
        &train_args.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        &[],
    );
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(last_line(&out).starts_with("status=ok command=train steps=2"));

    let eval_extra = vec![
        format!("eval.checkpoint={}", run.join("latest.ckpt").display()),
        format!("eval.dataset={}", ds.display()),
        format!("eval.report={}", run.join("report.txt").display()),
    ];
    let mut eval_args = vec!["eval".to_string()];
    eval_args.extend(to_args(&eval_extra));
    let out = burstsr(
        &eval_args.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        &[],
    );
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(last_line(&out).starts_with("status=ok command=eval images=2"));
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    assert!(report.contains("id psnr ssim"));
    assert!(report.contains("config_hash"));

    let infer_extra = vec![
        format!("eval.checkpoint={}", run.join("latest.ckpt").display()),
        format!("eval.burst_dir={}", ds.join("sample_0000").display()),
        format!("eval.out_path={}", run.join("sr.png").display()),
    ];
    let mut infer_args = vec!["infer".to_string()];
    infer_args.extend(to_args(&infer_extra));
    let out = burstsr(
        &infer_args.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        &[],
    );
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(run.join("sr.png").exists());

    let plot_extra = vec![
        format!("eval.log_path={}", run.join("train.log").display()),
        format!("eval.plot_dir={}", run.join("plots").display()),
    ];
    let mut plot_args = vec!["plot".to_string()];
    plot_args.extend(to_args(&plot_extra));
    let out = burstsr(
        &plot_args.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        &[],
    );
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(run.join("plots/loss_curve.png").exists());

    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn missing_dataset_exits_nonzero() {
    let root = work_dir("missing");
    let out = burstsr(
        &[
            "train",
            "--set",
            &format!("train.dataset={}", root.join("nope").display()),
            "--set",
            &format!("train.out_dir={}", root.join("run").display()),
            "--set",
            "train.steps=1",
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(last_line(&out).starts_with("status=error command=train"));
    std::fs::remove_dir_all(&root).ok();
}

#[test]
fn env_seed_overrides_config_seed() {
    let root = work_dir("envseed");
    let ds_a = root.join("a");
    let ds_b = root.join("b");
    let ds_c = root.join("c");
    let synth = |dir: &Path, seed_env: Option<&str>| {
        let args = [
            "synth",
            "--set",
            &format!("data.out_dir={}", dir.display()),
            "--set",
            "data.demo_images=1",
            "--set",
            "data.demo_size=32",
            "--set",
            "data.frames=2",
            "--set",
            "data.scale=2",
            "--set",
            "data.seed=1",
        ];
        let envs: Vec<(&str, &str)> = seed_env.map(|s| ("BURSTSR_SEED", s)).into_iter().collect();
        let out = burstsr(&args, &envs);
        assert!(out.status.success(), "{}", stdout(&out));
    };
    synth(&ds_a, None);
    synth(&ds_b, Some("99"));
    synth(&ds_c, Some("99"));
    let fa = std::fs::read(ds_a.join("sample_0000/frame_01.bin")).unwrap();
    let fb = std::fs::read(ds_b.join("sample_0000/frame_01.bin")).unwrap();
    let fc = std::fs::read(ds_c.join("sample_0000/frame_01.bin")).unwrap();
    assert_ne!(fa, fb, "env seed must override the config seed");
    assert_eq!(fb, fc, "same env seed reproduces the dataset");
    std::fs::remove_dir_all(&root).ok();
}
