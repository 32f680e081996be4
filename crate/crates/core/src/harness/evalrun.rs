//! Evaluation and inference over stored datasets and checkpoints.
//!
//! Metrics are computed on the 16-bit quantized output (the same values
//! an inference PNG stores), so evaluation and inference agree exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::harness::checkpoint::{self, Checkpoint};
use crate::harness::config::HarnessConfig;
use crate::harness::dataset::{list_samples, load_sample, LoadedSample};
use crate::harness::pngio;
use crate::metrics::{psnr, ssim, MetricReport};
use crate::model::BsrtModel;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Snap values to the 16-bit grid used by stored outputs.
pub fn quantize_u16(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0)
}

/// Forward a set of samples through the model and measure PSNR/SSIM
/// against their ground truth.
pub fn evaluate_samples<T: Scalar>(
    model: &BsrtModel<T>,
    samples: &[&LoadedSample],
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        if s.frames.len() < model.cfg.burst {
            return Err(Error::dim(format!(
                "sample {} has {} frames, model needs {}",
                s.name,
                s.frames.len(),
                model.cfg.burst
            )));
        }
        let burst: Vec<Tensor<T>> = s.frames[..model.cfg.burst]
            .iter()
            .map(|f| f.cast::<T>())
            .collect();
        let out = model.forward(&burst)?;
        let out_q = quantize_u16(&out.cast::<f64>());
        let p = psnr(&out_q, &s.hr, 1.0)?;
        let sm = ssim(&out_q, &s.hr)?;
        rows.push((s.name.clone(), p, sm));
    }
    Ok(MetricReport::from_rows(rows))
}

/// Build the model a checkpoint describes and load its weights.
pub fn model_from_checkpoint<T: Scalar>(
    ck: &Checkpoint<T>,
) -> Result<(BsrtModel<T>, HarnessConfig)> {
    let echo = HarnessConfig::from_toml(&ck.config_toml)?;
    let model_cfg = echo.model.model_config(&echo.data)?;
    let mut model = BsrtModel::<T>::new(model_cfg, echo.train.seed)?;
    checkpoint::check_compatible(&ck.params, &model.params)?;
    for (i, name) in model.params.names().to_vec().iter().enumerate() {
        *model.params.tensor_mut(i) = ck.params.get(name).unwrap().clone();
    }
    Ok((model, echo))
}

fn eval_with<T: Scalar>(cfg: &HarnessConfig) -> Result<(MetricReport, PathBuf)> {
    let ck = checkpoint::load::<T>(Path::new(&cfg.eval.checkpoint))?;
    let (model, echo) = model_from_checkpoint(&ck)?;
    let dirs = list_samples(Path::new(&cfg.eval.dataset))?;
    let samples: Vec<LoadedSample> = dirs.iter().map(|d| load_sample(d)).collect::<Result<_>>()?;
    let refs: Vec<&LoadedSample> = samples.iter().collect();
    let report = evaluate_samples(&model, &refs)?;

    let report_path = PathBuf::from(&cfg.eval.report);
    if let Some(parent) = report_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(&report_path)?;
    writeln!(f, "# burstsr eval report")?;
    writeln!(f, "# checkpoint: {}", cfg.eval.checkpoint)?;
    writeln!(f, "id psnr ssim")?;
    for (id, p, s) in &report.per_image {
        writeln!(f, "{id} {p:.9} {s:.9}")?;
    }
    writeln!(f, "mean {:.9} {:.9}", report.mean_psnr, report.mean_ssim)?;
    writeln!(f, "config_hash {:016x}", echo.hash())?;
    Ok((report, report_path))
}

/// Evaluate the checkpoint in [eval] over a dataset; writes the report
/// file and returns the metrics.
pub fn cmd_eval(cfg: &HarnessConfig) -> Result<(MetricReport, PathBuf)> {
    match checkpoint::peek_dtype(Path::new(&cfg.eval.checkpoint))? {
        0 => eval_with::<f32>(cfg),
        1 => eval_with::<f64>(cfg),
        d => Err(Error::parse(format!("unknown checkpoint dtype {d}"))),
    }
}

fn infer_with<T: Scalar>(cfg: &HarnessConfig) -> Result<PathBuf> {
    let ck = checkpoint::load::<T>(Path::new(&cfg.eval.checkpoint))?;
    let (model, _) = model_from_checkpoint(&ck)?;
    let sample = load_sample(Path::new(&cfg.eval.burst_dir))?;
    if sample.frames.len() < model.cfg.burst {
        return Err(Error::dim(format!(
            "burst at {} has {} frames, model needs {}",
            cfg.eval.burst_dir,
            sample.frames.len(),
            model.cfg.burst
        )));
    }
    let burst: Vec<Tensor<T>> = sample.frames[..model.cfg.burst]
        .iter()
        .map(|f| f.cast::<T>())
        .collect();
    let out = model.forward(&burst)?;
    let out_q = quantize_u16(&out.cast::<f64>());
    let out_path = PathBuf::from(&cfg.eval.out_path);
    pngio::write_png16(&out_path, &out_q)?;
    Ok(out_path)
}

/// Super-resolve one stored burst and write a 16-bit PNG.
pub fn cmd_infer(cfg: &HarnessConfig) -> Result<PathBuf> {
    match checkpoint::peek_dtype(Path::new(&cfg.eval.checkpoint))? {
        0 => infer_with::<f32>(cfg),
        1 => infer_with::<f64>(cfg),
        d => Err(Error::parse(format!("unknown checkpoint dtype {d}"))),
    }
}
