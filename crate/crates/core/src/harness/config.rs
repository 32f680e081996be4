//! Harness configuration: a TOML file with [data], [model], [train] and
//! [eval] sections, per-key `--set section.key=value` overrides, and the
//! BURSTSR_SEED environment override.

use serde::{Deserialize, Serialize};

use crate::model::{ExtractorKind, ModelConfig, Preset, ReconstructorKind};
use crate::raw::BurstConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Directory of source RGB images for synthesis.
    pub rgb_dir: String,
    /// Output dataset directory (holds sample dirs + manifest).
    pub out_dir: String,
    /// When > 0, generate this many procedural source images instead of
    /// reading rgb_dir.
    pub demo_images: usize,
    /// Edge length of generated demo images.
    pub demo_size: usize,
    pub frames: usize,
    pub scale: usize,
    pub max_shift: f64,
    pub max_rot_deg: f64,
    pub read_lo: f64,
    pub read_hi: f64,
    pub shot_lo: f64,
    pub shot_hi: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            rgb_dir: String::new(),
            out_dir: "dataset".to_string(),
            demo_images: 0,
            demo_size: 128,
            frames: 4,
            scale: 4,
            max_shift: 8.0,
            max_rot_deg: 1.0,
            read_lo: 0.001,
            read_hi: 0.015,
            shot_lo: 0.0001,
            shot_hi: 0.001,
            seed: 0,
        }
    }
}

impl DataSection {
    pub fn burst_config(&self, sample_seed: u64) -> BurstConfig {
        BurstConfig {
            frames: self.frames,
            scale: self.scale,
            max_shift: self.max_shift,
            max_rot_deg: self.max_rot_deg,
            read_range: (self.read_lo, self.read_hi),
            shot_range: (self.shot_lo, self.shot_hi),
            seed: sample_seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// tiny | small | large
    pub preset: String,
    pub burst: Option<usize>,
    pub scale: Option<usize>,
    pub channels: Option<usize>,
    pub use_new_pipeline: Option<bool>,
    pub use_flow_guidance: Option<bool>,
    /// residual_cnn | stb
    pub extractor: Option<String>,
    /// residual_cnn | stg
    pub reconstructor: Option<String>,
    pub tie_fusion: Option<bool>,
    pub warp_reference: Option<bool>,
    pub freeze_flow: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".to_string(),
            burst: None,
            scale: None,
            channels: None,
            use_new_pipeline: None,
            use_flow_guidance: None,
            extractor: None,
            reconstructor: None,
            tie_fusion: None,
            warp_reference: None,
            freeze_flow: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, data: &DataSection) -> Result<ModelConfig> {
        let preset = match self.preset.as_str() {
            "tiny" => Preset::Tiny,
            "small" => Preset::Small,
            "large" => Preset::Large,
            other => return Err(Error::config(format!("unknown preset '{other}'"))),
        };
        let mut cfg = ModelConfig::preset(preset);
        cfg.burst = self.burst.unwrap_or(data.frames);
        cfg.scale = self.scale.unwrap_or(data.scale);
        if let Some(c) = self.channels {
            cfg.channels = c;
        }
        if let Some(v) = self.use_new_pipeline {
            cfg.use_new_pipeline = v;
        }
        if let Some(v) = self.use_flow_guidance {
            cfg.use_flow_guidance = v;
        }
        if let Some(kind) = &self.extractor {
            cfg.extractor_kind = match kind.as_str() {
                "residual_cnn" => ExtractorKind::ResidualCnn,
                "stb" => ExtractorKind::Stb,
                other => return Err(Error::config(format!("unknown extractor '{other}'"))),
            };
        }
        if let Some(kind) = &self.reconstructor {
            cfg.reconstructor_kind = match kind.as_str() {
                "residual_cnn" => ReconstructorKind::ResidualCnn,
                "stg" => ReconstructorKind::Stg,
                other => return Err(Error::config(format!("unknown reconstructor '{other}'"))),
            };
        }
        if let Some(v) = self.tie_fusion {
            cfg.tie_fusion = v;
        }
        if let Some(v) = self.warp_reference {
            cfg.warp_reference = v;
        }
        if let Some(v) = self.freeze_flow {
            cfg.freeze_flow = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Epochs between learning-rate halvings.
    pub halving_interval: u64,
    pub epochs: u64,
    /// When > 0, overrides the epoch count with an absolute step budget.
    pub steps: u64,
    pub batch_size: usize,
    /// HR crop edge; must be divisible by 4*scale.
    pub hr_crop: usize,
    pub seed: u64,
    /// f32 | f64
    pub precision: String,
    pub clip_norm: f64,
    pub ckpt_interval: u64,
    pub eval_interval: u64,
    pub val_fraction: f64,
    /// Auxiliary supervision of the flow network against the synthesis
    /// ground-truth flows (0 disables).
    pub flow_loss_weight: f64,
    /// Use aligned L1 (warp ground truth toward the prediction) instead
    /// of plain L1.
    pub aligned_l1: bool,
    pub dataset: String,
    pub out_dir: String,
    /// Resume from this checkpoint when it exists.
    pub resume: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 8e-5,
            beta1: 0.9,
            beta2: 0.999,
            halving_interval: 150,
            epochs: 300,
            steps: 0,
            batch_size: 2,
            hr_crop: 64,
            seed: 0,
            precision: "f32".to_string(),
            clip_norm: 5.0,
            ckpt_interval: 500,
            eval_interval: 250,
            val_fraction: 0.1,
            flow_loss_weight: 0.0,
            aligned_l1: false,
            dataset: "dataset".to_string(),
            out_dir: "run".to_string(),
            resume: String::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub checkpoint: String,
    pub dataset: String,
    pub report: String,
    /// Sample directory for single-burst inference.
    pub burst_dir: String,
    /// Output path of the inferred 16-bit PNG.
    pub out_path: String,
    /// Training log consumed by the plot command.
    pub log_path: String,
    pub plot_dir: String,
    /// Checkpoints for the PSNR-vs-parameters scatter.
    pub scatter: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: "run/latest.ckpt".to_string(),
            dataset: "dataset".to_string(),
            report: "run/eval_report.txt".to_string(),
            burst_dir: String::new(),
            out_path: "run/inferred.png".to_string(),
            log_path: "run/train.log".to_string(),
            plot_dir: "run/plots".to_string(),
            scatter: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl HarnessConfig {
    /// Load from a TOML file, apply `--set section.key=value` overrides,
    /// then the BURSTSR_SEED env override (data and train seeds).
    pub fn load(path: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {p}: {e}")))?;
                text.parse()
                    .map_err(|e| Error::config(format!("bad TOML in {p}: {e}")))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let mut cfg: HarnessConfig = value
            .try_into()
            .map_err(|e| Error::config(format!("bad config: {e}")))?;
        if let Ok(seed) = std::env::var("BURSTSR_SEED") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::config(format!("BURSTSR_SEED '{seed}' is not an integer")))?;
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    /// Canonical TOML serialization (config echo in checkpoints).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad config echo: {e}")))
    }

    /// FNV-1a hash of the canonical serialization.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(value: &mut toml::Value, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.len() < 2 {
        return Err(Error::config(format!(
            "override key '{dotted}' must be section.key"
        )));
    }
    let mut node = value;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("'{dotted}' does not address a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("'{dotted}' does not address a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_toml_scalar(raw));
    Ok(())
}
