//! Command-line interface: `burstsr synth|train|eval|infer|plot` with
//! `--config <file>` plus per-key `--set section.key=value` overrides.
//! Every run ends with a machine-parseable `status=...` line and a
//! matching exit code.

use std::process::ExitCode;

use burstsr_core::harness::{cmd_eval, cmd_infer, cmd_plot, cmd_synth, cmd_train, HarnessConfig};

const USAGE: &str =
    "usage: burstsr <synth|train|eval|infer|plot> [--config FILE] [--set section.key=value]...";

fn parse_args(args: &[String]) -> Result<(String, Option<String>, Vec<(String, String)>), String> {
    if args.is_empty() {
        return Err(USAGE.to_string());
    }
    let command = args[0].clone();
    let mut config = None;
    let mut overrides = Vec::new();
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                i += 1;
                config = Some(
                    args.get(i)
                        .ok_or("--config requires a file argument")?
                        .clone(),
                );
            }
            "--set" => {
                i += 1;
                let kv = args.get(i).ok_or("--set requires key=value")?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| format!("--set '{kv}' is not key=value"))?;
                overrides.push((k.to_string(), v.to_string()));
            }
            other => return Err(format!("unknown argument '{other}'\n{USAGE}")),
        }
        i += 1;
    }
    Ok((command, config, overrides))
}

fn run(command: &str, cfg: &HarnessConfig) -> burstsr_core::Result<String> {
    match command {
        "synth" => {
            let summary = cmd_synth(cfg)?;
            Ok(format!(
                "samples={} skipped={} out_dir={}",
                summary.samples,
                summary.skipped.len(),
                summary.out_dir.display()
            ))
        }
        "train" => {
            let out = cmd_train(cfg)?;
            Ok(format!(
                "steps={} first_loss={} final_loss={} log={} checkpoint={}",
                out.steps_run,
                out.first_loss,
                out.final_loss,
                out.log_path.display(),
                out.latest_ckpt.display()
            ))
        }
        "eval" => {
            let (report, path) = cmd_eval(cfg)?;
            Ok(format!(
                "images={} mean_psnr={} mean_ssim={} report={}",
                report.per_image.len(),
                report.mean_psnr,
                report.mean_ssim,
                path.display()
            ))
        }
        "infer" => {
            let path = cmd_infer(cfg)?;
            Ok(format!("output={}", path.display()))
        }
        "plot" => {
            let out = cmd_plot(cfg)?;
            let mut parts = Vec::new();
            if let Some(p) = out.loss_curve {
                parts.push(format!("loss_curve={}", p.display()));
            }
            if let Some(p) = out.psnr_curve {
                parts.push(format!("psnr_curve={}", p.display()));
            }
            if let Some(p) = out.scatter {
                parts.push(format!("scatter={}", p.display()));
            }
            Ok(parts.join(" "))
        }
        other => Err(burstsr_core::Error::Config(format!(
            "unknown command '{other}'\n{USAGE}"
        ))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (command, config_path, overrides) = match parse_args(&args) {
        Ok(parsed) => parsed,
        Err(msg) => {
            println!("status=error msg={:?}", msg);
            return ExitCode::FAILURE;
        }
    };
    let cfg = match HarnessConfig::load(config_path.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            println!("status=error msg={:?}", e.to_string());
            return ExitCode::FAILURE;
        }
    };
    match run(&command, &cfg) {
        Ok(detail) => {
            println!("status=ok command={command} {detail}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("status=error command={command} msg={:?}", e.to_string());
            ExitCode::FAILURE
        }
    }
}
