//! Static plot emission from training logs: loss and PSNR curves plus an
//! optional PSNR-vs-parameter-count scatter over checkpoints. Rendering
//! is a minimal polyline rasterizer; every plot ships with a JSON sidecar
//! listing the exact plotted coordinates.

use std::path::{Path, PathBuf};

use crate::harness::checkpoint;
use crate::harness::config::HarnessConfig;
use crate::harness::pngio::write_png8;
use crate::model::BsrtModel;
use crate::{Error, Result};

const PLOT_W: usize = 640;
const PLOT_H: usize = 420;
const MARGIN: usize = 40;

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            rgb: vec![255; w * h * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && (x as usize) < self.w && y >= 0 && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&color);
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn disc(&mut self, cx: i64, cy: i64, r: i64, color: [u8; 3]) {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y <= r * r {
                    self.put(cx + x, cy + y, color);
                }
            }
        }
    }
}

fn draw_series(points: &[(f64, f64)], path: &Path, color: [u8; 3], scatter: bool) -> Result<()> {
    let mut canvas = Canvas::new(PLOT_W, PLOT_H);
    let (x0, x1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (y0, y1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let xspan = (x1 - x0).max(1e-12);
    let yspan = (y1 - y0).max(1e-12);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = MARGIN as f64 + (x - x0) / xspan * (PLOT_W - 2 * MARGIN) as f64;
        let py = (PLOT_H - MARGIN) as f64 - (y - y0) / yspan * (PLOT_H - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    };

    let axis = [0u8, 0, 0];
    let m = MARGIN as i64;
    canvas.line(m, PLOT_H as i64 - m, PLOT_W as i64 - m, PLOT_H as i64 - m, axis);
    canvas.line(m, m, m, PLOT_H as i64 - m, axis);
    for t in 0..=4 {
        let fx = m + t * (PLOT_W as i64 - 2 * m) / 4;
        canvas.line(fx, PLOT_H as i64 - m, fx, PLOT_H as i64 - m + 4, axis);
        let fy = m + t * (PLOT_H as i64 - 2 * m) / 4;
        canvas.line(m - 4, fy, m, fy, axis);
    }

    if scatter {
        for &(x, y) in points {
            let (px, py) = to_px(x, y);
            canvas.disc(px, py, 3, color);
        }
    } else {
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in points {
            let (px, py) = to_px(x, y);
            if let Some((qx, qy)) = prev {
                canvas.line(qx, qy, px, py, color);
            }
            prev = Some((px, py));
        }
    }
    write_png8(path, PLOT_W, PLOT_H, &canvas.rgb)
}

fn write_sidecar(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let arr: Vec<serde_json::Value> = points
        .iter()
        .map(|&(x, y)| serde_json::json!([x, y]))
        .collect();
    let text = serde_json::to_string_pretty(&serde_json::json!({ "points": arr }))
        .map_err(|e| Error::parse(format!("sidecar encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Default)]
pub struct PlotOutcome {
    pub loss_curve: Option<PathBuf>,
    pub psnr_curve: Option<PathBuf>,
    pub scatter: Option<PathBuf>,
}

/// Parse a training log into (step, loss) and (step, psnr) series.
pub fn parse_log(text: &str) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut loss = Vec::new();
    let mut psnr = Vec::new();
    for line in text.lines() {
        let mut step = None;
        let mut loss_v = None;
        let mut psnr_v = None;
        for tok in line.split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                match k {
                    "step" => step = v.parse::<f64>().ok(),
                    "loss" => loss_v = v.parse::<f64>().ok(),
                    "val_psnr" => psnr_v = v.parse::<f64>().ok(),
                    _ => {}
                }
            }
        }
        if let (Some(s), Some(l)) = (step, loss_v) {
            loss.push((s, l));
        }
        if let (Some(s), Some(p)) = (step, psnr_v) {
            psnr.push((s, p));
        }
    }
    (loss, psnr)
}

/// Emit loss/PSNR curves from the training log in [eval].log_path and,
/// when [eval].scatter lists checkpoints, a PSNR-vs-parameters scatter.
pub fn cmd_plot(cfg: &HarnessConfig) -> Result<PlotOutcome> {
    let log_path = Path::new(&cfg.eval.log_path);
    let text = std::fs::read_to_string(log_path)
        .map_err(|e| Error::config(format!("cannot read log {}: {e}", log_path.display())))?;
    let (loss, psnr) = parse_log(&text);
    if loss.is_empty() && psnr.is_empty() {
        return Err(Error::parse(format!(
            "log {} contains no plottable entries",
            log_path.display()
        )));
    }
    let dir = PathBuf::from(&cfg.eval.plot_dir);
    std::fs::create_dir_all(&dir)?;
    let mut outcome = PlotOutcome::default();

    if !loss.is_empty() {
        let png = dir.join("loss_curve.png");
        draw_series(&loss, &png, [200, 40, 40], false)?;
        write_sidecar(&loss, &dir.join("loss_curve.json"))?;
        outcome.loss_curve = Some(png);
    }
    if !psnr.is_empty() {
        let png = dir.join("psnr_curve.png");
        draw_series(&psnr, &png, [40, 80, 200], false)?;
        write_sidecar(&psnr, &dir.join("psnr_curve.json"))?;
        outcome.psnr_curve = Some(png);
    }

    if !cfg.eval.scatter.is_empty() {
        let mut points = Vec::new();
        for ckpt_path in &cfg.eval.scatter {
            let path = Path::new(ckpt_path);
            let (config_toml, best) = match checkpoint::peek_dtype(path)? {
                0 => {
                    let ck = checkpoint::load::<f32>(path)?;
                    (ck.config_toml, ck.state.map(|s| s.best_psnr))
                }
                _ => {
                    let ck = checkpoint::load::<f64>(path)?;
                    (ck.config_toml, ck.state.map(|s| s.best_psnr))
                }
            };
            let best = best.unwrap_or(f64::NAN);
            if !best.is_finite() {
                return Err(Error::config(format!(
                    "checkpoint {ckpt_path} has no recorded validation PSNR"
                )));
            }
            let echo = HarnessConfig::from_toml(&config_toml)?;
            let model_cfg = echo.model.model_config(&echo.data)?;
            let count = BsrtModel::<f32>::count_parameters(&model_cfg)?;
            points.push((count as f64, best));
        }
        let png = dir.join("psnr_vs_params.png");
        draw_series(&points, &png, [30, 140, 60], true)?;
        write_sidecar(&points, &dir.join("psnr_vs_params.json"))?;
        outcome.scatter = Some(png);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_log_lines() {
        let text = "step=1 loss=0.5 lr=0.0001\nstep=2 loss=0.4 lr=0.0001\nstep=2 val_psnr=21.5 val_ssim=0.7\nnoise\n";
        let (loss, psnr) = parse_log(text);
        assert_eq!(loss, vec![(1.0, 0.5), (2.0, 0.4)]);
        assert_eq!(psnr, vec![(2.0, 21.5)]);
    }

    #[test]
    fn plots_and_sidecars_from_log() {
        let dir = std::env::temp_dir().join(format!("burstsr_plot_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let log = dir.join("train.log");
        let mut text = String::new();
        for i in 1..=10 {
            text.push_str(&format!("step={} loss={} lr=8e-5\n", i, 1.0 / i as f64));
        }
        text.push_str("step=10 val_psnr=24.25 val_ssim=0.8\n");
        std::fs::write(&log, text).unwrap();

        let mut cfg = HarnessConfig::default();
        cfg.eval.log_path = log.to_string_lossy().to_string();
        cfg.eval.plot_dir = dir.join("plots").to_string_lossy().to_string();
        let out = cmd_plot(&cfg).unwrap();
        let loss_png = out.loss_curve.unwrap();
        assert!(loss_png.exists());
        assert!(std::fs::metadata(&loss_png).unwrap().len() > 0);
        // sidecar equality: final plotted psnr equals the logged value
        let sidecar: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("plots/psnr_curve.json")).unwrap(),
        )
        .unwrap();
        let points = sidecar["points"].as_array().unwrap();
        let last = points.last().unwrap().as_array().unwrap();
        assert_eq!(last[1].as_f64().unwrap(), 24.25);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_log_errors() {
        let dir = std::env::temp_dir().join(format!("burstsr_plot_empty_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let log = dir.join("train.log");
        std::fs::write(&log, "nothing here\n").unwrap();
        let mut cfg = HarnessConfig::default();
        cfg.eval.log_path = log.to_string_lossy().to_string();
        cfg.eval.plot_dir = dir.join("plots").to_string_lossy().to_string();
        assert!(cmd_plot(&cfg).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
