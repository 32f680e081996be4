//! Dataset generation and the on-disk sample format.
//!
//! One directory per sample:
//!   hr.png              16-bit RGB ground truth (linear light)
//!   frame_{i:02}.bin    little-endian u16, channel-major 4 x h x w,
//!                       values = round(x * 65535)
//!   meta.json           transforms, noise, camera draw, seed, scale
//! A top-level `manifest` file lists the sample directories in order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::harness::config::HarnessConfig;
use crate::harness::pngio;
use crate::raw::{
    analytic_flow, synthesize_burst, CameraParams, ColorSpace, NoiseParams, RgbImage,
    TransformParams,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub transforms: Vec<TransformParams>,
    pub noise: NoiseParams,
    pub camera: CameraParams,
    pub seed: u64,
    pub scale: usize,
    pub frames: usize,
    pub source: String,
}

#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub name: String,
    pub frames: Vec<Tensor<f64>>,
    pub hr: Tensor<f64>,
    pub meta: SampleMeta,
}

impl LoadedSample {
    /// Analytic flow of frame `i` at LR mosaic resolution, derived from
    /// the recorded rigid transform.
    pub fn gt_flow(&self, i: usize) -> Tensor<f64> {
        let (_, hh, hw) = self.hr.dims3();
        analytic_flow(&self.meta.transforms[i], hh, hw, self.meta.scale)
    }
}

/// Procedural sRGB texture for demo datasets and tests: a luminance field
/// of oriented sinusoids plus soft disks and a few hard edges, lightly
/// colored. Deterministic in (size, seed).
pub fn demo_texture(size: usize, seed: u64) -> RgbImage {
    let mut rng = Rng::derive(seed, 0xD3A0);
    let mut waves = Vec::new();
    for _ in 0..7 {
        waves.push((
            rng.uniform_in(0.01, 0.35),
            rng.uniform_in(0.01, 0.35),
            rng.uniform_in(0.0, std::f64::consts::TAU),
            rng.uniform_in(0.03, 0.10),
        ));
    }
    // sharp structure that survives heavy downscaling: soft disks plus
    // oriented step edges
    let mut disks = Vec::new();
    for _ in 0..8 {
        disks.push((
            rng.uniform_in(0.08, 0.92) * size as f64,
            rng.uniform_in(0.08, 0.92) * size as f64,
            rng.uniform_in(0.04, 0.3) * size as f64,
            rng.uniform_in(-0.3, 0.3),
        ));
    }
    let mut edges = Vec::new();
    for _ in 0..3 {
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        edges.push((
            theta.cos(),
            theta.sin(),
            rng.uniform_in(0.25, 0.75) * size as f64,
            rng.uniform_in(-0.18, 0.18),
        ));
    }
    let tint = [
        rng.uniform_in(-0.08, 0.08),
        rng.uniform_in(-0.08, 0.08),
        rng.uniform_in(-0.08, 0.08),
    ];
    let mut data = Tensor::zeros(&[3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let mut lum = 0.5;
            for &(fx, fy, ph, amp) in &waves {
                lum += amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin();
            }
            for &(cx, cy, r, amp) in &disks {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                lum += amp / (1.0 + (1.5 * (d - r)).exp());
            }
            for &(nx, ny, offset, amp) in &edges {
                let d = nx * x as f64 + ny * y as f64 - offset;
                lum += amp / (1.0 + (-1.2 * d).exp());
            }
            for c in 0..3 {
                let chroma = tint[c] * (0.02 * (x as f64 + 2.0 * c as f64 * 7.0)).sin();
                data.set3(c, y, x, (lum + chroma).clamp(0.02, 0.98));
            }
        }
    }
    RgbImage::new(data, ColorSpace::Srgb).expect("demo texture in range")
}

fn write_frame_bin(path: &Path, frame: &Tensor<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(frame.numel() * 2);
    for &v in frame.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_frame_bin(path: &Path, h: usize, w: usize) -> Result<Tensor<f64>> {
    let bytes = fs::read(path)?;
    let expect = 4 * h * w * 2;
    if bytes.len() != expect {
        return Err(Error::parse(format!(
            "{}: expected {expect} bytes for a 4x{h}x{w} frame, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(4 * h * w);
    for ch in bytes.chunks_exact(2) {
        data.push(u16::from_le_bytes([ch[0], ch[1]]) as f64 / 65535.0);
    }
    Ok(Tensor::from_vec(&[4, h, w], data))
}

/// Write one burst sample directory.
pub fn write_sample(
    dir: &Path,
    hr_linear: &Tensor<f64>,
    frames: &[Tensor<f64>],
    meta: &SampleMeta,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    pngio::write_png16(&dir.join("hr.png"), hr_linear)?;
    for (i, f) in frames.iter().enumerate() {
        write_frame_bin(&dir.join(format!("frame_{i:02}.bin")), f)?;
    }
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::parse(format!("meta encode: {e}")))?;
    fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

/// Load one sample directory (hr, frames, meta).
pub fn load_sample(dir: &Path) -> Result<LoadedSample> {
    let meta_text = fs::read_to_string(dir.join("meta.json"))
        .map_err(|e| Error::parse(format!("{}: {e}", dir.join("meta.json").display())))?;
    let meta: SampleMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::parse(format!("{}: {e}", dir.join("meta.json").display())))?;
    let hr = pngio::read_png(&dir.join("hr.png"))?;
    let (_, hh, hw) = hr.dims3();
    let (fh, fw) = (hh / (2 * meta.scale), hw / (2 * meta.scale));
    let mut frames = Vec::with_capacity(meta.frames);
    for i in 0..meta.frames {
        frames.push(read_frame_bin(
            &dir.join(format!("frame_{i:02}.bin")),
            fh,
            fw,
        )?);
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedSample {
        name,
        frames,
        hr,
        meta,
    })
}

/// Sample directories listed by a dataset manifest, in manifest order.
pub fn list_samples(dataset_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dataset_dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest)
        .map_err(|e| Error::parse(format!("{}: {e}", manifest.display())))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| dataset_dir.join(l.trim()))
        .collect())
}

pub struct SynthSummary {
    pub samples: usize,
    pub skipped: Vec<String>,
    pub out_dir: PathBuf,
}

/// Synthesize a dataset from source RGB images (or procedural textures
/// when data.demo_images > 0). Deterministic given the config seed.
pub fn cmd_synth(cfg: &HarnessConfig) -> Result<SynthSummary> {
    let data = &cfg.data;
    let out_dir = PathBuf::from(&data.out_dir);
    fs::create_dir_all(&out_dir)?;

    enum Source {
        File(PathBuf),
        Demo(u64),
    }

    let sources: Vec<(String, Source)> = if data.demo_images > 0 {
        (0..data.demo_images)
            .map(|i| (format!("demo_{i:03}"), Source::Demo(i as u64)))
            .collect()
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(&data.rgb_dir)
            .map_err(|e| Error::config(format!("cannot read rgb_dir {}: {e}", data.rgb_dir)))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let name = p.file_stem().unwrap().to_string_lossy().to_string();
                (name, Source::File(p))
            })
            .collect()
    };
    if sources.is_empty() {
        return Err(Error::config(format!(
            "no source images in {}",
            data.rgb_dir
        )));
    }

    let mut lines = Vec::new();
    let mut skipped = Vec::new();
    for (idx, (name, source)) in sources.iter().enumerate() {
        let img = match source {
            Source::Demo(i) => demo_texture(data.demo_size, data.seed ^ (0xDE30 + i)),
            Source::File(path) => match pngio::read_png(path) {
                Ok(t) => match RgbImage::new(t, ColorSpace::Srgb) {
                    Ok(img) => img,
                    Err(e) => {
                        eprintln!("warning: skipping {}: {e}", path.display());
                        skipped.push(name.clone());
                        continue;
                    }
                },
                Err(e) => {
                    eprintln!("warning: skipping {}: {e}", path.display());
                    skipped.push(name.clone());
                    continue;
                }
            },
        };
        let sample_seed = crate::rng::Rng::derive(data.seed, 0x5A3F + idx as u64).next_u64();
        let burst_cfg = data.burst_config(sample_seed);
        let sample = synthesize_burst(&img, &burst_cfg)?;
        let meta = SampleMeta {
            transforms: sample.transforms.clone(),
            noise: sample.noise,
            camera: sample.camera.clone(),
            seed: sample_seed,
            scale: data.scale,
            frames: data.frames,
            source: name.clone(),
        };
        let dir_name = format!("sample_{idx:04}");
        let frames: Vec<Tensor<f64>> = sample.frames.iter().map(|f| f.data.clone()).collect();
        write_sample(&out_dir.join(&dir_name), &sample.hr.data, &frames, &meta)?;
        lines.push(dir_name);
    }
    if lines.is_empty() {
        return Err(Error::config("every source image failed to load".to_string()));
    }

    let mut manifest = fs::File::create(out_dir.join(MANIFEST))?;
    for line in &lines {
        writeln!(manifest, "{line}")?;
    }
    Ok(SynthSummary {
        samples: lines.len(),
        skipped,
        out_dir,
    })
}
