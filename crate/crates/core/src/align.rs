//! Flow-guided deformable alignment.
//!
//! A modulated 3x3 deformable convolution aligns each frame's feature to
//! the reference. Offsets are the optical flow broadcast to every kernel
//! tap plus a learned residual from a small head; modulation masks come
//! from the same head through clamp(1 + x, 0, 1), which makes a
//! zero-initialized head reduce the whole operation to a plain 3x3
//! convolution. A three-level cascade refines alignment coarse to fine,
//! feeding each finer level the upsampled offsets and aligned feature of
//! the level below.

use std::sync::Arc;

use crate::autodiff::{ConvSpec, GatherMap, Tape, Var};
use crate::flow::FlowPyramid;
use crate::params::{register_conv, BoundParams, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Kernel taps of the fixed 3x3 deformable convolution.
pub const K: usize = 9;

const LEAKY_SLOPE: f64 = 0.1;

/// Per-location, per-tap sampling offsets and modulation masks.
/// Offsets are (2*K*groups, h, w) ordered (group, tap, x/y); masks are
/// (K*groups, h, w) in [0, 1].
#[derive(Clone, Debug)]
pub struct OffsetField<T: Scalar> {
    pub offsets: Tensor<T>,
    pub masks: Tensor<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn new(offsets: Tensor<T>, masks: Tensor<T>) -> Result<Self> {
        if !offsets.all_finite() {
            return Err(Error::contract("offsets must be finite".to_string()));
        }
        for &m in masks.data() {
            let m = m.to_f64();
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::contract(format!("mask value {m} outside [0,1]")));
            }
        }
        Ok(OffsetField { offsets, masks })
    }
}

/// Weights of one deformable convolution.
#[derive(Clone, Debug)]
pub struct DcnParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub groups: usize,
}

/// A frame feature aligned to the reference.
#[derive(Clone, Debug)]
pub struct AlignedFeature<T: Scalar> {
    pub data: Tensor<T>,
}

/// Modulated deformable 3x3 convolution (stride 1, zero padding).
pub fn deform_conv<T: Scalar>(
    x: &Tensor<T>,
    off: &OffsetField<T>,
    p: &DcnParams<T>,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = x.dims3();
    let (c_out, wc_in, kh, kw) = p.weight.dims4();
    if wc_in != c_in || kh != 3 || kw != 3 {
        return Err(Error::dim(format!(
            "deform_conv weight {:?} does not match input {:?}",
            p.weight.shape(),
            x.shape()
        )));
    }
    if c_in % p.groups != 0 {
        return Err(Error::config(format!(
            "c_in {c_in} not divisible by deformable groups {}",
            p.groups
        )));
    }
    if off.offsets.shape() != [2 * K * p.groups, h, w]
        || off.masks.shape() != [K * p.groups, h, w]
    {
        return Err(Error::dim(format!(
            "offset field {:?}/{:?} does not match {} groups at {h}x{w}",
            off.offsets.shape(),
            off.masks.shape(),
            p.groups
        )));
    }
    if p.bias.shape() != [c_out] {
        return Err(Error::dim("deform_conv bias shape".to_string()));
    }
    let mut t = Tape::<T>::new();
    let xv = t.constant(x.clone());
    let ov = t.constant(off.offsets.clone());
    let mv = t.constant(off.masks.clone());
    let wv = t.constant(p.weight.clone());
    let bv = t.constant(p.bias.clone());
    let out = t.deform_conv(xv, ov, mv, wv, bv, p.groups);
    Ok(t.value(out).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct AlignConfig {
    pub channels: usize,
    pub groups: usize,
    /// Resolves the ambiguity of which feature the coarse warp applies
    /// to: false (default) warps the current frame's feature toward the
    /// reference; true warps the reference instead.
    pub warp_reference: bool,
}

impl AlignConfig {
    pub fn head_in_channels(&self, with_prev_level: bool) -> usize {
        let base = 2 * self.channels;
        if with_prev_level {
            base + self.channels + 2 * K * self.groups
        } else {
            base
        }
    }
}

/// Register one alignment level: a two-conv offset head (final conv
/// zero-initialized) and the deformable convolution weights.
fn register_level<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &AlignConfig,
    with_prev_level: bool,
    rng: &mut Rng,
) {
    let c = cfg.channels;
    let in_ch = cfg.head_in_channels(with_prev_level);
    register_conv(ps, &format!("{prefix}.head.conv_a"), c, in_ch, 3, 1.0, rng);
    register_conv(
        ps,
        &format!("{prefix}.head.conv_b"),
        3 * K * cfg.groups,
        c,
        3,
        0.0,
        rng,
    );
    register_conv(ps, &format!("{prefix}.dcn"), c, c, 3, 1.0, rng);
}

/// Register the three pyramid levels under `prefix`.
pub fn init_align_params<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &AlignConfig,
    rng: &mut Rng,
) {
    register_level(ps, &format!("{prefix}.level3"), cfg, false, rng);
    register_level(ps, &format!("{prefix}.level2"), cfg, true, rng);
    register_level(ps, &format!("{prefix}.level1"), cfg, true, rng);
}

/// Register the shared residual blocks of the feature enhancement stack.
pub fn init_enhance_params<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    channels: usize,
    blocks: usize,
    rng: &mut Rng,
) {
    for b in 0..blocks {
        register_conv(ps, &format!("{prefix}.rb{b}.conv1"), channels, channels, 3, 1.0, rng);
        register_conv(ps, &format!("{prefix}.rb{b}.conv2"), channels, channels, 3, 0.0, rng);
    }
}

/// Gather map that tiles a (2, h, w) flow to every tap of every group:
/// output channel (t*2) reads flow x, (t*2+1) reads flow y.
fn broadcast_flow_map(kg: usize, h: usize, w: usize) -> Arc<GatherMap> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(2 * kg * hw);
    for t in 0..kg {
        let _ = t;
        idx.extend((0..hw).map(|p| p as i64));
        idx.extend((0..hw).map(|p| (hw + p) as i64));
    }
    GatherMap::new(vec![2 * kg, h, w], idx, 2 * hw)
}

/// Gather map selecting channels [start, start+len) of a (c, h, w) input.
fn slice_channels_map(c: usize, h: usize, w: usize, start: usize, len: usize) -> Arc<GatherMap> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(len * hw);
    for ch in start..start + len {
        idx.extend((0..hw).map(|p| (ch * hw + p) as i64));
    }
    GatherMap::new(vec![len, h, w], idx, c * hw)
}

/// One flow-guided deformable alignment step on the tape. `extra` carries
/// the upsampled offsets and aligned feature from the coarser level.
/// Returns (aligned feature, final offsets, masks).
pub fn fg_dcn_t<T: Scalar>(
    tape: &mut Tape<T>,
    feat: Var,
    feat_ref: Var,
    flow: Var,
    bp: &BoundParams<T>,
    prefix: &str,
    cfg: &AlignConfig,
    extra: Option<(Var, Var)>,
) -> (Var, Var, Var) {
    let (_, h, w) = tape.value(feat).dims3();
    assert_eq!(tape.value(feat_ref).shape(), tape.value(feat).shape());
    assert_eq!(tape.value(flow).shape(), &[2, h, w]);

    let warped = if cfg.warp_reference {
        tape.warp(feat_ref, flow)
    } else {
        tape.warp(feat, flow)
    };
    let mut parts = vec![warped, feat_ref];
    if let Some((up_off, up_feat)) = extra {
        parts.push(up_off);
        parts.push(up_feat);
    }
    let inp = tape.concat_dim0(&parts);

    let spec = ConvSpec::unit(1);
    let alpha = T::from_f64(LEAKY_SLOPE);
    let hdn = tape.conv2d(
        inp,
        bp.var(&format!("{prefix}.head.conv_a.w")),
        bp.var(&format!("{prefix}.head.conv_a.b")),
        spec,
    );
    let hdn = tape.leaky_relu(hdn, alpha);
    let raw = tape.conv2d(
        hdn,
        bp.var(&format!("{prefix}.head.conv_b.w")),
        bp.var(&format!("{prefix}.head.conv_b.b")),
        spec,
    );

    let kg = K * cfg.groups;
    let res_off = tape.gather(raw, slice_channels_map(3 * kg, h, w, 0, 2 * kg));
    let mask_logits = tape.gather(raw, slice_channels_map(3 * kg, h, w, 2 * kg, kg));

    let base = tape.gather(flow, broadcast_flow_map(kg, h, w));
    let offsets = tape.add(base, res_off);
    let bound = T::from_usize(h.max(w)) / T::from_f64(2.0);
    let offsets = tape.clamp_sym(offsets, bound);
    let masks = tape.clamp_shift1(mask_logits);

    let aligned = tape.deform_conv(
        feat,
        offsets,
        masks,
        bp.var(&format!("{prefix}.dcn.w")),
        bp.var(&format!("{prefix}.dcn.b")),
        cfg.groups,
    );
    (aligned, offsets, masks)
}

/// Three-level coarse-to-fine alignment; returns the level-1 aligned
/// feature. `feats` and `ref_feats` are ordered [L1, L2, L3] with L2/L3
/// at half/quarter resolution.
pub fn pyramid_align_t<T: Scalar>(
    tape: &mut Tape<T>,
    feats: &[Var; 3],
    ref_feats: &[Var; 3],
    flows: &FlowPyramid<Var>,
    bp: &BoundParams<T>,
    prefix: &str,
    cfg: &AlignConfig,
) -> Var {
    let (a3, o3, _) = fg_dcn_t(
        tape,
        feats[2],
        ref_feats[2],
        flows.f3,
        bp,
        &format!("{prefix}.level3"),
        cfg,
        None,
    );

    let (_, h2, w2) = tape.value(feats[1]).dims3();
    let up_o3 = tape.upsample_bilinear(o3, h2, w2);
    let up_o3 = tape.scale_var(up_o3, T::from_f64(2.0));
    let up_a3 = tape.upsample_bilinear(a3, h2, w2);
    let (a2, o2, _) = fg_dcn_t(
        tape,
        feats[1],
        ref_feats[1],
        flows.f2,
        bp,
        &format!("{prefix}.level2"),
        cfg,
        Some((up_o3, up_a3)),
    );

    let (_, h1, w1) = tape.value(feats[0]).dims3();
    let up_o2 = tape.upsample_bilinear(o2, h1, w1);
    let up_o2 = tape.scale_var(up_o2, T::from_f64(2.0));
    let up_a2 = tape.upsample_bilinear(a2, h1, w1);
    let (a1, _, _) = fg_dcn_t(
        tape,
        feats[0],
        ref_feats[0],
        flows.f1,
        bp,
        &format!("{prefix}.level1"),
        cfg,
        Some((up_o2, up_a2)),
    );
    a1
}

/// Shared-weight residual block stack applied independently per frame.
pub fn feature_enhance_t<T: Scalar>(
    tape: &mut Tape<T>,
    feats: &[Var],
    bp: &BoundParams<T>,
    prefix: &str,
    blocks: usize,
) -> Vec<Var> {
    let spec = ConvSpec::unit(1);
    let alpha = T::from_f64(LEAKY_SLOPE);
    feats
        .iter()
        .map(|&f| {
            let mut x = f;
            for b in 0..blocks {
                let c1 = tape.conv2d(
                    x,
                    bp.var(&format!("{prefix}.rb{b}.conv1.w")),
                    bp.var(&format!("{prefix}.rb{b}.conv1.b")),
                    spec,
                );
                let c1 = tape.leaky_relu(c1, alpha);
                let c2 = tape.conv2d(
                    c1,
                    bp.var(&format!("{prefix}.rb{b}.conv2.w")),
                    bp.var(&format!("{prefix}.rb{b}.conv2.b")),
                    spec,
                );
                x = tape.add(x, c2);
            }
            x
        })
        .collect()
}

/// Standalone single-level flow-guided alignment parameters.
pub struct FgDcnParams<T: Scalar> {
    pub set: ParamSet<T>,
    pub cfg: AlignConfig,
}

impl<T: Scalar> FgDcnParams<T> {
    pub fn init(cfg: AlignConfig, rng: &mut Rng) -> Self {
        let mut set = ParamSet::new();
        register_level(&mut set, "fgdcn", &cfg, false, rng);
        FgDcnParams { set, cfg }
    }
}

/// Flow-guided deformable alignment of one frame's feature.
pub fn fg_dcn<T: Scalar>(
    feat: &Tensor<T>,
    feat_ref: &Tensor<T>,
    flow: &Tensor<T>,
    params: &FgDcnParams<T>,
) -> Result<(AlignedFeature<T>, OffsetField<T>)> {
    let (_, h, w) = feat.dims3();
    if feat_ref.shape() != feat.shape() || flow.shape() != [2, h, w] {
        return Err(Error::dim(format!(
            "fg_dcn: shapes {:?}, {:?}, {:?} inconsistent",
            feat.shape(),
            feat_ref.shape(),
            flow.shape()
        )));
    }
    let mut tape = Tape::<T>::new();
    let fv = tape.constant(feat.clone());
    let rv = tape.constant(feat_ref.clone());
    let flv = tape.constant(flow.clone());
    let bp = BoundParams::bind(&mut tape, &params.set, &[]);
    let (a, o, m) = fg_dcn_t(&mut tape, fv, rv, flv, &bp, "fgdcn", &params.cfg, None);
    Ok((
        AlignedFeature {
            data: tape.value(a).clone(),
        },
        OffsetField::new(tape.value(o).clone(), tape.value(m).clone())?,
    ))
}

/// Three-level alignment parameters.
pub struct AlignParams<T: Scalar> {
    pub set: ParamSet<T>,
    pub cfg: AlignConfig,
}

impl<T: Scalar> AlignParams<T> {
    pub fn init(cfg: AlignConfig, rng: &mut Rng) -> Self {
        let mut set = ParamSet::new();
        init_align_params(&mut set, "align", &cfg, rng);
        AlignParams { set, cfg }
    }
}

/// Align a frame's 3-level feature pyramid to the reference pyramid.
pub fn pyramid_align<T: Scalar>(
    feats: &[Tensor<T>; 3],
    ref_feats: &[Tensor<T>; 3],
    flows: &FlowPyramid<Tensor<T>>,
    params: &AlignParams<T>,
) -> Result<AlignedFeature<T>> {
    for (f, fl) in feats
        .iter()
        .zip([&flows.f1, &flows.f2, &flows.f3].into_iter())
    {
        let (_, h, w) = f.dims3();
        if fl.shape() != [2, h, w] {
            return Err(Error::dim(format!(
                "pyramid_align: flow {:?} does not match feature {:?}",
                fl.shape(),
                f.shape()
            )));
        }
    }
    let mut tape = Tape::<T>::new();
    let fv: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let rv: Vec<Var> = ref_feats.iter().map(|f| tape.constant(f.clone())).collect();
    let flv = flows.map(|f| tape.constant(f.clone()));
    let bp = BoundParams::bind(&mut tape, &params.set, &[]);
    let out = pyramid_align_t(
        &mut tape,
        &[fv[0], fv[1], fv[2]],
        &[rv[0], rv[1], rv[2]],
        &flv,
        &bp,
        "align",
        &params.cfg,
    );
    Ok(AlignedFeature {
        data: tape.value(out).clone(),
    })
}

/// Shared residual enhancement parameters.
pub struct EnhanceParams<T: Scalar> {
    pub set: ParamSet<T>,
    pub blocks: usize,
}

impl<T: Scalar> EnhanceParams<T> {
    pub fn init(channels: usize, blocks: usize, rng: &mut Rng) -> Self {
        let mut set = ParamSet::new();
        init_enhance_params(&mut set, "enhance", channels, blocks, rng);
        EnhanceParams { set, blocks }
    }
}

/// Apply the shared residual stack to each frame's feature.
pub fn feature_enhance<T: Scalar>(
    feats: &[Tensor<T>],
    params: &EnhanceParams<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::<T>::new();
    let fv: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let bp = BoundParams::bind(&mut tape, &params.set, &[]);
    let out = feature_enhance_t(&mut tape, &fv, &bp, "enhance", params.blocks);
    Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect())
    }

    /// Dense zero-padded 3x3 convolution oracle.
    pub fn conv3_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (c_in, h, wd) = x.dims3();
        let c_out = w.shape()[0];
        let mut out = Tensor::zeros(&[c_out, h, wd]);
        for co in 0..c_out {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky - 1;
                                let sx = xx as isize + kx - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    acc += x.at3(ci, sy as usize, sx as usize)
                                        * w.data()[((co * c_in + ci) * 3 + ky as usize) * 3
                                            + kx as usize];
                                }
                            }
                        }
                    }
                    out.set3(co, y, xx, acc);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::*;
    use super::*;
    use crate::tensor::max_abs_diff;

    fn zero_offsets(groups: usize, h: usize, w: usize) -> OffsetField<f64> {
        OffsetField::new(
            Tensor::zeros(&[2 * K * groups, h, w]),
            Tensor::full(&[K * groups, h, w], 1.0),
        )
        .unwrap()
    }

    #[test]
    fn zero_offsets_unit_masks_equal_standard_conv() {
        for seed in 0..5u64 {
            let x = rand_tensor(&[3, 7, 6], seed);
            let w = rand_tensor(&[4, 3, 3, 3], 100 + seed);
            let b = rand_tensor(&[4], 200 + seed);
            let p = DcnParams {
                weight: w.clone(),
                bias: b.clone(),
                groups: 1,
            };
            let out = deform_conv(&x, &zero_offsets(1, 7, 6), &p).unwrap();
            let oracle = conv3_oracle(&x, &w, &b);
            assert!(max_abs_diff(&out, &oracle) < 1e-5);
        }
    }

    #[test]
    fn zero_masks_leave_only_bias() {
        let x = rand_tensor(&[2, 5, 5], 1);
        let w = rand_tensor(&[3, 2, 3, 3], 2);
        let b = rand_tensor(&[3], 3);
        let off = OffsetField::new(
            Tensor::zeros(&[18, 5, 5]),
            Tensor::zeros(&[9, 5, 5]),
        )
        .unwrap();
        let p = DcnParams {
            weight: w,
            bias: b.clone(),
            groups: 1,
        };
        let out = deform_conv(&x, &off, &p).unwrap();
        for co in 0..3 {
            for y in 0..5 {
                for xx in 0..5 {
                    assert!((out.at3(co, y, xx) - b.data()[co]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_integer_offset_matches_shifted_conv() {
        // offset (1, 0) on every tap samples one pixel to the right, which
        // equals convolving the left-shifted (zero-filled) input
        let x = rand_tensor(&[2, 6, 6], 4);
        let w = rand_tensor(&[2, 2, 3, 3], 5);
        let b = Tensor::zeros(&[2]);
        let mut off = Tensor::zeros(&[18, 6, 6]);
        for t in 0..9 {
            for p in 0..36 {
                off.data_mut()[(t * 2) * 36 + p] = 1.0;
            }
        }
        let field = OffsetField::new(off, Tensor::full(&[9, 6, 6], 1.0)).unwrap();
        let p = DcnParams {
            weight: w.clone(),
            bias: b.clone(),
            groups: 1,
        };
        let out = deform_conv(&x, &field, &p).unwrap();
        let mut shifted = Tensor::zeros(&[2, 6, 6]);
        for c in 0..2 {
            for y in 0..6 {
                for xx in 0..5 {
                    shifted.set3(c, y, xx, x.at3(c, y, xx + 1));
                }
            }
        }
        let oracle = conv3_oracle(&shifted, &w, &b);
        // interior only: at both borders the shifted-conv oracle sees
        // zero-fill where the deformable taps still reach real pixels
        for c in 0..2 {
            for y in 0..6 {
                for xx in 1..4 {
                    assert!(
                        (out.at3(c, y, xx) - oracle.at3(c, y, xx)).abs() < 1e-10,
                        "c={c} y={y} x={xx}"
                    );
                }
            }
        }
    }

    #[test]
    fn deform_conv_linear_in_input() {
        let x = rand_tensor(&[2, 5, 5], 6);
        let y = rand_tensor(&[2, 5, 5], 7);
        let w = rand_tensor(&[2, 2, 3, 3], 8);
        let b = Tensor::zeros(&[2]);
        let off = OffsetField::new(
            rand_tensor(&[18, 5, 5], 9).scale(0.7),
            Tensor::full(&[9, 5, 5], 0.8),
        )
        .unwrap();
        let p = DcnParams {
            weight: w,
            bias: b,
            groups: 1,
        };
        let (a, bb) = (1.3, -0.4);
        let mut combo = x.scale(a);
        combo.add_assign_tensor(&y.scale(bb));
        let lhs = deform_conv(&combo, &off, &p).unwrap();
        let mut rhs = deform_conv(&x, &off, &p).unwrap().scale(a);
        rhs.add_assign_tensor(&deform_conv(&y, &off, &p).unwrap().scale(bb));
        assert!(max_abs_diff(&lhs, &rhs) < 1e-6);
    }

    #[test]
    fn deform_conv_group_mismatch_is_config_error() {
        let x = rand_tensor(&[3, 4, 4], 10);
        let p = DcnParams {
            weight: rand_tensor(&[2, 3, 3, 3], 11),
            bias: Tensor::zeros(&[2]),
            groups: 2, // 3 % 2 != 0
        };
        let off = zero_offsets(2, 4, 4);
        assert!(matches!(
            deform_conv(&x, &off, &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fg_dcn_zero_init_reduces_to_standard_conv() {
        let cfg = AlignConfig {
            channels: 4,
            groups: 1,
            warp_reference: false,
        };
        let mut rng = Rng::new(20);
        let params = FgDcnParams::<f64>::init(cfg, &mut rng);
        let feat = rand_tensor(&[4, 8, 8], 21);
        let flow = Tensor::zeros(&[2, 8, 8]);
        let (aligned, field) = fg_dcn(&feat, &feat, &flow, &params).unwrap();
        let oracle = conv3_oracle(
            &feat,
            params.set.get("fgdcn.dcn.w").unwrap(),
            params.set.get("fgdcn.dcn.b").unwrap(),
        );
        assert!(max_abs_diff(&aligned.data, &oracle) < 1e-12);
        assert_eq!(field.offsets.max_abs(), 0.0);
        for &m in field.masks.data() {
            assert_eq!(m, 1.0);
        }
    }

    #[test]
    fn fg_dcn_flow_compensates_integer_shift() {
        // feat is the reference shifted left by 2; with the exact flow the
        // deformable taps land back on reference content, so the interior
        // equals a standard convolution of the unshifted reference.
        let cfg = AlignConfig {
            channels: 3,
            groups: 1,
            warp_reference: false,
        };
        let mut rng = Rng::new(30);
        let params = FgDcnParams::<f64>::init(cfg, &mut rng);
        let reference = rand_tensor(&[3, 8, 10], 31);
        let mut feat = Tensor::zeros(&[3, 8, 10]);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    feat.set3(c, y, x, reference.at3(c, y, x + 2));
                }
            }
        }
        let mut flow = Tensor::zeros(&[2, 8, 10]);
        for p in 0..80 {
            flow.data_mut()[p] = -2.0;
        }
        let (aligned, _) = fg_dcn(&feat, &reference, &flow, &params).unwrap();
        let oracle = conv3_oracle(
            &reference,
            params.set.get("fgdcn.dcn.w").unwrap(),
            params.set.get("fgdcn.dcn.b").unwrap(),
        );
        for c in 0..3 {
            for y in 0..8 {
                for x in 3..=8 {
                    assert!(
                        (aligned.data.at3(c, y, x) - oracle.at3(c, y, x)).abs() < 1e-10,
                        "c={c} y={y} x={x}"
                    );
                }
            }
        }
    }

    #[test]
    fn fg_dcn_offsets_equal_broadcast_flow_at_init() {
        let cfg = AlignConfig {
            channels: 4,
            groups: 2,
            warp_reference: false,
        };
        let mut rng = Rng::new(22);
        let params = FgDcnParams::<f64>::init(cfg, &mut rng);
        let feat = rand_tensor(&[4, 6, 6], 23);
        let flow = rand_tensor(&[2, 6, 6], 24).scale(0.5);
        let (_, field) = fg_dcn(&feat, &feat, &flow, &params).unwrap();
        let hw = 36;
        for t in 0..K * cfg.groups {
            for p in 0..hw {
                assert_eq!(field.offsets.data()[(t * 2) * hw + p], flow.data()[p]);
                assert_eq!(field.offsets.data()[(t * 2 + 1) * hw + p], flow.data()[hw + p]);
            }
        }
    }
}
