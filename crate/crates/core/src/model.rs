//! Full burst super-resolution model.
//!
//! The forward pass follows the low-resolution-first pipeline: features
//! are extracted from packed 4-channel RAW at (h, w), upscaled 2x by
//! pixel shuffle to mosaic resolution, aligned to the reference frame
//! with pyramid flow-guided deformable convolutions, fused by a 1x1
//! convolution, reconstructed by windowed-attention groups and upsampled
//! to the HR RGB output. A bilinearly demosaicked, bilinearly upsampled
//! copy of the reference frame is added as a global skip; with the final
//! RGB convolution zero-initialized the whole network starts as exactly
//! that naive baseline.
//!
//! Ablation switches select the legacy full-resolution pipeline, plain
//! residual CNN stacks in place of attention blocks for extraction or
//! reconstruction, and zero flows in place of estimated flow guidance.

use std::sync::Arc;

use crate::align::{
    feature_enhance_t, init_align_params, init_enhance_params, pyramid_align_t, AlignConfig,
};
use crate::autodiff::{ConvSpec, GatherMap, Tape, Var};
use crate::flow::{estimate_pyramid_t, init_flow_params, FlowNetConfig, FlowPyramid};
use crate::params::{register_conv, BoundParams, ParamSet};
use crate::raw::naive_demosaic;
use crate::rng::Rng;
use crate::swin::{
    init_stb_params, init_stg_params, stb_forward_t, stg_forward_t, StbConfig, StgConfig,
};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub use crate::params::ParamSet as ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    ResidualCnn,
    Stb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconstructorKind {
    ResidualCnn,
    Stg,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: f64,
    pub extractor_blocks: usize,
    pub recon_groups: usize,
    pub recon_blocks: usize,
    pub deform_groups: usize,
    pub flow_levels: usize,
    pub flow_hidden: usize,
    pub enhance_blocks: usize,
    /// Super-resolution factor from mosaic to output; 2 or 4.
    pub scale: usize,
    /// Burst size N consumed by the fusion layer.
    pub burst: usize,
    pub use_new_pipeline: bool,
    pub use_flow_guidance: bool,
    pub extractor_kind: ExtractorKind,
    pub reconstructor_kind: ReconstructorKind,
    /// Tie fusion weights across non-reference frame slots (testing aid;
    /// makes the output invariant to non-reference frame order).
    pub tie_fusion: bool,
    /// Warp the reference feature instead of the current frame's feature
    /// in the flow-guided alignment.
    pub warp_reference: bool,
    /// Do not propagate gradients into the flow network.
    pub freeze_flow: bool,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let base = ModelConfig {
            channels: 32,
            heads: 4,
            window: 4,
            mlp_ratio: 2.0,
            extractor_blocks: 2,
            recon_groups: 2,
            recon_blocks: 2,
            deform_groups: 1,
            flow_levels: 4,
            flow_hidden: 16,
            enhance_blocks: 3,
            scale: 4,
            burst: 4,
            use_new_pipeline: true,
            use_flow_guidance: true,
            extractor_kind: ExtractorKind::Stb,
            reconstructor_kind: ReconstructorKind::Stg,
            tie_fusion: false,
            warp_reference: false,
            freeze_flow: false,
        };
        match p {
            Preset::Tiny => base,
            Preset::Small => ModelConfig {
                channels: 72,
                heads: 8,
                window: 8,
                extractor_blocks: 6,
                recon_groups: 8,
                recon_blocks: 6,
                deform_groups: 8,
                flow_levels: 5,
                flow_hidden: 24,
                burst: 14,
                ..base
            },
            Preset::Large => ModelConfig {
                channels: 144,
                heads: 8,
                window: 8,
                extractor_blocks: 6,
                recon_groups: 8,
                recon_blocks: 8,
                deform_groups: 8,
                flow_levels: 5,
                flow_hidden: 32,
                burst: 14,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![2, 4].contains(&self.scale) {
            return Err(Error::config(format!("scale {} not in {{2,4}}", self.scale)));
        }
        if self.burst == 0 {
            return Err(Error::config("burst size must be >= 1".to_string()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.channels % self.deform_groups != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by deform groups {}",
                self.channels, self.deform_groups
            )));
        }
        if self.flow_levels < 3 {
            return Err(Error::config("flow pyramid needs >= 3 levels".to_string()));
        }
        Ok(())
    }

    fn stb(&self, shifted: bool) -> StbConfig {
        StbConfig {
            dim: self.channels,
            heads: self.heads,
            window: self.window,
            shifted,
            mlp_ratio: self.mlp_ratio,
        }
    }

    fn stg(&self) -> StgConfig {
        StgConfig {
            blocks: self.recon_blocks,
            block: self.stb(false),
        }
    }

    fn align(&self) -> AlignConfig {
        AlignConfig {
            channels: self.channels,
            groups: self.deform_groups,
            warp_reference: self.warp_reference,
        }
    }

    fn flow(&self) -> FlowNetConfig {
        FlowNetConfig {
            levels: self.flow_levels,
            hidden: self.flow_hidden,
        }
    }

    fn up_stages(&self) -> usize {
        if self.scale == 4 {
            2
        } else {
            1
        }
    }

    /// Channel width after each upsampling stage (tapers on the last
    /// stage of 4x models to keep the full-resolution conv cheap).
    fn up_channels(&self, stage: usize) -> usize {
        if self.scale == 4 && stage == 1 {
            (self.channels / 2).max(8)
        } else {
            self.channels
        }
    }
}

/// The assembled model: configuration plus named parameters.
pub struct BsrtModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
}

fn register_residual_block<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    c: usize,
    rng: &mut Rng,
) {
    register_conv(ps, &format!("{prefix}.conv1"), c, c, 3, 1.0, rng);
    register_conv(ps, &format!("{prefix}.conv2"), c, c, 3, 0.1, rng);
}

fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamSet<T> {
    let mut rng = Rng::derive(seed, 0x9A7A);
    let mut ps = ParamSet::new();
    let c = cfg.channels;

    // 3-channel projection feeding the flow network
    register_conv(&mut ps, "flow_in", 3, 1, 3, 1.0, &mut rng);
    init_flow_params(&mut ps, "flow", &cfg.flow(), &mut rng);

    // feature extraction
    if cfg.use_new_pipeline {
        register_conv(&mut ps, "extract.first", c, 4, 3, 1.0, &mut rng);
    } else {
        register_conv(&mut ps, "extract.first", c, 1, 3, 1.0, &mut rng);
    }
    for b in 0..cfg.extractor_blocks {
        match cfg.extractor_kind {
            ExtractorKind::Stb => init_stb_params(
                &mut ps,
                &format!("extract.stb{b}"),
                &cfg.stb(StgConfig::block_shifted(b)),
                &mut rng,
            ),
            ExtractorKind::ResidualCnn => {
                register_residual_block(&mut ps, &format!("extract.rb{b}"), c, &mut rng)
            }
        }
    }
    if cfg.use_new_pipeline {
        register_conv(&mut ps, "extract.up", 4 * c, c, 3, 1.0, &mut rng);
    }

    // alignment feature pyramid + enhancement + flow-guided alignment
    register_conv(&mut ps, "pyr.l2", c, c, 3, 1.0, &mut rng);
    register_conv(&mut ps, "pyr.l3", c, c, 3, 1.0, &mut rng);
    init_enhance_params(&mut ps, "enhance", c, cfg.enhance_blocks, &mut rng);
    init_align_params(&mut ps, "align", &cfg.align(), &mut rng);

    // fusion
    if cfg.tie_fusion {
        register_conv(&mut ps, "fusion.ref", c, c, 1, 1.0, &mut rng);
        register_conv(&mut ps, "fusion.other", c, c, 1, 1.0, &mut rng);
    } else {
        register_conv(&mut ps, "fusion", c, cfg.burst * c, 1, 1.0, &mut rng);
    }

    // reconstruction
    match cfg.reconstructor_kind {
        ReconstructorKind::Stg => {
            for g in 0..cfg.recon_groups {
                init_stg_params(&mut ps, &format!("recon.g{g}"), &cfg.stg(), &mut rng);
            }
        }
        ReconstructorKind::ResidualCnn => {
            for b in 0..cfg.recon_groups * cfg.recon_blocks {
                register_residual_block(&mut ps, &format!("recon.rb{b}"), c, &mut rng);
            }
        }
    }

    // upsampler; the final RGB conv is zero-initialized so the model
    // starts as the global skip
    let mut ch = c;
    for stage in 0..cfg.up_stages() {
        let out_ch = cfg.up_channels(stage);
        register_conv(&mut ps, &format!("up{stage}"), 4 * out_ch, ch, 3, 1.0, &mut rng);
        ch = out_ch;
    }
    register_conv(&mut ps, "to_rgb", 3, ch, 3, 0.0, &mut rng);
    ps
}

/// Pixel shuffle r=2 as a gather: (4c, h, w) -> (c, 2h, 2w).
fn pixel_shuffle2_map(c_out: usize, h: usize, w: usize) -> Arc<GatherMap> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = vec![0i64; c_out * oh * ow];
    for c in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let src_c = c * 4 + (y % 2) * 2 + (x % 2);
                idx[(c * oh + y) * ow + x] = ((src_c * h + y / 2) * w + x / 2) as i64;
            }
        }
    }
    GatherMap::new(vec![c_out, oh, ow], idx, 4 * c_out * h * w)
}

fn two_adic(mut n: usize) -> usize {
    let mut k = 0;
    while n % 2 == 0 && n > 1 {
        n /= 2;
        k += 1;
    }
    k
}

impl<T: Scalar> BsrtModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(BsrtModel { cfg, params })
    }

    /// Construct a model for a given switch combination (the ablation
    /// axes are plain fields on [`ModelConfig`]).
    pub fn ablation_variant(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, seed)
    }

    /// Exact learnable scalar count for a configuration.
    pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
        cfg.validate()?;
        Ok(init_params::<f32>(cfg, 0).total_scalars())
    }

    /// Bind parameters onto a tape, honoring the flow freeze flag.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> BoundParams<'a, T> {
        let frozen: &[&str] = if self.cfg.freeze_flow {
            &["flow_in", "flow."]
        } else {
            &[]
        };
        BoundParams::bind(tape, &self.params, frozen)
    }

    fn validate_burst(&self, burst: &[Tensor<T>]) -> Result<(usize, usize)> {
        if burst.is_empty() {
            return Err(Error::contract("empty burst".to_string()));
        }
        if burst.len() != self.cfg.burst {
            return Err(Error::dim(format!(
                "burst has {} frames but the model was built for {}",
                burst.len(),
                self.cfg.burst
            )));
        }
        let (c, h, w) = burst[0].dims3();
        if c != 4 {
            return Err(Error::dim(format!("frames must be 4-channel RAW, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::dim(format!(
                "frame dims {h}x{w} must be divisible by 4"
            )));
        }
        for f in burst {
            if f.shape() != burst[0].shape() {
                return Err(Error::dim("burst frames differ in shape".to_string()));
            }
        }
        Ok((h, w))
    }

    /// The global-skip image: naive demosaic of the reference frame,
    /// bilinearly upsampled to output resolution.
    pub fn skip_image(&self, reference: &Tensor<T>) -> Tensor<T> {
        let (_, h, w) = reference.dims3();
        let mosaic = pixel_shuffle_tensor(reference);
        let rgb = naive_demosaic(&mosaic);
        crate::autodiff::upsample_bilinear_tensor(
            &rgb,
            2 * h * self.cfg.scale,
            2 * w * self.cfg.scale,
        )
    }

    fn extract_feature(&self, tape: &mut Tape<T>, bp: &BoundParams<T>, frame: Var) -> Var {
        let cfg = &self.cfg;
        let spec = ConvSpec::unit(1);
        let alpha = T::from_f64(0.1);
        let input = if cfg.use_new_pipeline {
            frame
        } else {
            let (_, h, w) = tape.value(frame).dims3();
            tape.gather(frame, pixel_shuffle2_map(1, h, w))
        };
        let mut x = tape.conv2d(
            input,
            bp.var("extract.first.w"),
            bp.var("extract.first.b"),
            spec,
        );
        for b in 0..cfg.extractor_blocks {
            match cfg.extractor_kind {
                ExtractorKind::Stb => {
                    let bcfg = cfg.stb(StgConfig::block_shifted(b));
                    x = stb_forward_t(tape, x, bp, &format!("extract.stb{b}"), &bcfg);
                }
                ExtractorKind::ResidualCnn => {
                    let c1 = tape.conv2d(
                        x,
                        bp.var(&format!("extract.rb{b}.conv1.w")),
                        bp.var(&format!("extract.rb{b}.conv1.b")),
                        spec,
                    );
                    let c1 = tape.leaky_relu(c1, alpha);
                    let c2 = tape.conv2d(
                        c1,
                        bp.var(&format!("extract.rb{b}.conv2.w")),
                        bp.var(&format!("extract.rb{b}.conv2.b")),
                        spec,
                    );
                    x = tape.add(x, c2);
                }
            }
        }
        if cfg.use_new_pipeline {
            let up = tape.conv2d(x, bp.var("extract.up.w"), bp.var("extract.up.b"), spec);
            let (_, h, w) = tape.value(up).dims3();
            x = tape.gather(up, pixel_shuffle2_map(cfg.channels, h, w));
        }
        x
    }

    /// Forward pass on the tape; returns the HR RGB output var.
    pub fn forward_t(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams<T>,
        burst: &[Tensor<T>],
    ) -> Result<Var> {
        Ok(self.forward_with_flows_t(tape, bp, burst)?.0)
    }

    /// Forward pass that also returns the per-frame flow pyramids (empty
    /// when flow guidance is disabled), for auxiliary flow supervision.
    pub fn forward_with_flows_t(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams<T>,
        burst: &[Tensor<T>],
    ) -> Result<(Var, Vec<FlowPyramid<Var>>)> {
        let cfg = &self.cfg;
        let (h, w) = self.validate_burst(burst)?;
        let n = burst.len();
        let spec = ConvSpec::unit(1);
        let stride2 = ConvSpec { stride: 2, pad: 1 };

        let frames: Vec<Var> = burst.iter().map(|f| tape.constant(f.clone())).collect();

        // (i) flows between every frame and the reference
        let (fh, fw) = (2 * h, 2 * w);
        let flows: Vec<FlowPyramid<Var>> = if cfg.use_flow_guidance {
            let levels = cfg.flow_levels.min(1 + two_adic(fh).min(two_adic(fw)));
            if levels < 3 {
                return Err(Error::dim(format!(
                    "frame dims {h}x{w} too coarse for a 3-level flow pyramid"
                )));
            }
            let to_img = |tape: &mut Tape<T>, bp: &BoundParams<T>, f: Var| {
                let m = tape.gather(f, pixel_shuffle2_map(1, h, w));
                tape.conv2d(m, bp.var("flow_in.w"), bp.var("flow_in.b"), spec)
            };
            let ref_img = to_img(tape, bp, frames[0]);
            frames
                .iter()
                .map(|&f| {
                    let img = to_img(tape, bp, f);
                    estimate_pyramid_t(tape, img, ref_img, bp, "flow", levels)
                })
                .collect()
        } else {
            (0..n)
                .map(|_| FlowPyramid {
                    f1: tape.constant(Tensor::zeros(&[2, fh, fw])),
                    f2: tape.constant(Tensor::zeros(&[2, fh / 2, fw / 2])),
                    f3: tape.constant(Tensor::zeros(&[2, fh / 4, fw / 4])),
                })
                .collect()
        };

        let returned_flows = if cfg.use_flow_guidance {
            flows.clone()
        } else {
            Vec::new()
        };

        // (ii)+(iii) features at mosaic resolution
        let feats: Vec<Var> = frames
            .iter()
            .map(|&f| self.extract_feature(tape, bp, f))
            .collect();

        // (iv) per-frame 3-level pyramids, enhancement, alignment
        let mut pyramids: Vec<[Var; 3]> = Vec::with_capacity(n);
        for &f in &feats {
            let l2 = tape.conv2d(f, bp.var("pyr.l2.w"), bp.var("pyr.l2.b"), stride2);
            let l3 = tape.conv2d(l2, bp.var("pyr.l3.w"), bp.var("pyr.l3.b"), stride2);
            pyramids.push([f, l2, l3]);
        }
        let flat: Vec<Var> = pyramids.iter().flat_map(|p| p.iter().copied()).collect();
        let enhanced = feature_enhance_t(tape, &flat, bp, "enhance", cfg.enhance_blocks);
        let pyramids: Vec<[Var; 3]> = enhanced
            .chunks(3)
            .map(|ch| [ch[0], ch[1], ch[2]])
            .collect();

        let align_cfg = cfg.align();
        let ref_pyr = pyramids[0];
        let aligned: Vec<Var> = pyramids
            .iter()
            .zip(flows.iter())
            .map(|(p, fl)| pyramid_align_t(tape, p, &ref_pyr, fl, bp, "align", &align_cfg))
            .collect();

        // (v) fusion
        let fused = if cfg.tie_fusion {
            let zero_bias = tape.constant(Tensor::zeros(&[cfg.channels]));
            let mut acc = tape.conv2d(
                aligned[0],
                bp.var("fusion.ref.w"),
                bp.var("fusion.ref.b"),
                ConvSpec::unit(0),
            );
            for &a in &aligned[1..] {
                let o = tape.conv2d(a, bp.var("fusion.other.w"), zero_bias, ConvSpec::unit(0));
                acc = tape.add(acc, o);
            }
            acc
        } else {
            let cat = tape.concat_dim0(&aligned);
            tape.conv2d(cat, bp.var("fusion.w"), bp.var("fusion.b"), ConvSpec::unit(0))
        };

        // (vi) reconstruction
        let mut x = fused;
        match cfg.reconstructor_kind {
            ReconstructorKind::Stg => {
                let stg = cfg.stg();
                for g in 0..cfg.recon_groups {
                    x = stg_forward_t(tape, x, bp, &format!("recon.g{g}"), &stg);
                }
            }
            ReconstructorKind::ResidualCnn => {
                let alpha = T::from_f64(0.1);
                for b in 0..cfg.recon_groups * cfg.recon_blocks {
                    let c1 = tape.conv2d(
                        x,
                        bp.var(&format!("recon.rb{b}.conv1.w")),
                        bp.var(&format!("recon.rb{b}.conv1.b")),
                        spec,
                    );
                    let c1 = tape.leaky_relu(c1, alpha);
                    let c2 = tape.conv2d(
                        c1,
                        bp.var(&format!("recon.rb{b}.conv2.w")),
                        bp.var(&format!("recon.rb{b}.conv2.b")),
                        spec,
                    );
                    x = tape.add(x, c2);
                }
            }
        }

        // (vii) upsampling and the global skip
        for stage in 0..cfg.up_stages() {
            let out_ch = cfg.up_channels(stage);
            let up = tape.conv2d(
                x,
                bp.var(&format!("up{stage}.w")),
                bp.var(&format!("up{stage}.b")),
                spec,
            );
            let (_, uh, uw) = tape.value(up).dims3();
            x = tape.gather(up, pixel_shuffle2_map(out_ch, uh, uw));
        }
        let rgb = tape.conv2d(x, bp.var("to_rgb.w"), bp.var("to_rgb.b"), spec);
        let skip = tape.constant(self.skip_image(&burst[0]));
        Ok((tape.add(rgb, skip), returned_flows))
    }

    /// Pure forward: burst of N packed 4xhxw frames to 3x(2hs)x(2ws) RGB.
    pub fn forward(&self, burst: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::<T>::new();
        let bp = self.bind(&mut tape);
        let out = self.forward_t(&mut tape, &bp, burst)?;
        Ok(tape.value(out).clone())
    }
}

/// Pixel shuffle of a packed frame back to its mosaic (non-tape).
pub fn pixel_shuffle_tensor<T: Scalar>(packed: &Tensor<T>) -> Tensor<T> {
    let (c4, h, w) = packed.dims3();
    assert_eq!(c4 % 4, 0);
    let c = c4 / 4;
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ci in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                let src_c = ci * 4 + (y % 2) * 2 + (x % 2);
                out.set3(ci, y, x, packed.at3(src_c, y / 2, x / 2));
            }
        }
    }
    out
}
