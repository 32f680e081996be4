//! Coarse-to-fine optical flow between each frame and the reference.
//!
//! A small per-level residual predictor refines an upsampled coarse flow,
//! SpyNet style: average-pool image pyramids, predict at the coarsest
//! level, then at every finer level warp the frame by the upsampled flow
//! and add a predicted residual. Every level's final convolution is
//! zero-initialized so all flows start at exactly zero, which keeps the
//! rest of the model analyzable at initialization. Only the finest three
//! levels are returned.

use crate::autodiff::{Tape, Var};
use crate::params::{register_conv, BoundParams, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Three-level flow pyramid: f1 at full input resolution, f2 at 1/2,
/// f3 at 1/4.
#[derive(Clone, Debug)]
pub struct FlowPyramid<X> {
    pub f1: X,
    pub f2: X,
    pub f3: X,
}

impl<X> FlowPyramid<X> {
    pub fn map<Y>(&self, mut f: impl FnMut(&X) -> Y) -> FlowPyramid<Y> {
        FlowPyramid {
            f1: f(&self.f1),
            f2: f(&self.f2),
            f3: f(&self.f3),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowNetConfig {
    /// Internal pyramid depth; must be >= 3. Only the finest 3 levels of
    /// flow are returned.
    pub levels: usize,
    pub hidden: usize,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            levels: 5,
            hidden: 16,
        }
    }
}

/// Per-level residual predictor parameters.
pub struct FlowNetParams<T: Scalar> {
    pub set: ParamSet<T>,
    pub cfg: FlowNetConfig,
}

impl<T: Scalar> FlowNetParams<T> {
    pub fn init(cfg: FlowNetConfig, rng: &mut Rng) -> Self {
        let mut set = ParamSet::new();
        init_flow_params(&mut set, "flow", &cfg, rng);
        FlowNetParams { set, cfg }
    }
}

/// Register the per-level predictor stacks under `prefix`.
/// Input is concat(warped frame 3ch, reference 3ch, upsampled flow 2ch).
pub fn init_flow_params<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &FlowNetConfig,
    rng: &mut Rng,
) {
    assert!(cfg.levels >= 3, "flow pyramid needs >= 3 levels");
    for l in 0..cfg.levels {
        // wide kernels: each level must see past its residual range
        register_conv(ps, &format!("{prefix}.level{l}.conv1"), cfg.hidden, 8, 7, 1.0, rng);
        register_conv(
            ps,
            &format!("{prefix}.level{l}.conv2"),
            cfg.hidden,
            cfg.hidden,
            5,
            1.0,
            rng,
        );
        register_conv(
            ps,
            &format!("{prefix}.level{l}.conv3"),
            cfg.hidden,
            cfg.hidden,
            3,
            1.0,
            rng,
        );
        // zero-init: flows start at exactly zero
        register_conv(ps, &format!("{prefix}.level{l}.conv4"), 2, cfg.hidden, 3, 0.0, rng);
    }
}

/// Bilinear warp of `x` by flow `f`; samples outside the domain
/// contribute zero.
pub fn warp<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = x.dims3();
    if f.shape() != [2, h, w] {
        return Err(Error::dim(format!(
            "warp: flow {:?} does not match feature {:?}",
            f.shape(),
            x.shape()
        )));
    }
    let mut t = Tape::<T>::new();
    let xv = t.constant(x.clone());
    let fv = t.constant(f.clone());
    let out = t.warp(xv, fv);
    Ok(t.value(out).clone())
}

/// 2x bilinear upsampling of a flow field with values doubled (pixel
/// units rescale with resolution).
pub fn upsample_flow<T: Scalar>(f: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = f.dims3();
    crate::autodiff::upsample_bilinear_tensor(f, 2 * h, 2 * w).scale(T::from_f64(2.0))
}

const LEAKY_SLOPE: f64 = 0.1;

/// Flow values can span several pixels while image channels sit in
/// [0, 1]; the predictor input scales flows down to comparable range.
const FLOW_INPUT_SCALE: f64 = 0.25;

fn predict_residual<T: Scalar>(
    tape: &mut Tape<T>,
    inp: Var,
    bp: &BoundParams<T>,
    prefix: &str,
    level: usize,
) -> Var {
    let alpha = T::from_f64(LEAKY_SLOPE);
    let mut x = inp;
    for (i, act) in [(1, true), (2, true), (3, true), (4, false)] {
        let w = bp.var(&format!("{prefix}.level{level}.conv{i}.w"));
        let k = tape.value(w).shape()[2];
        let spec = crate::autodiff::ConvSpec::unit(k / 2);
        x = tape.conv2d(
            x,
            w,
            bp.var(&format!("{prefix}.level{level}.conv{i}.b")),
            spec,
        );
        if act {
            x = tape.leaky_relu(x, alpha);
        }
    }
    x
}

/// Tape-level pyramid flow estimation. `levels` is the effective depth
/// (bounded by the registered parameter depth and input divisibility).
pub fn estimate_pyramid_t<T: Scalar>(
    tape: &mut Tape<T>,
    img: Var,
    reference: Var,
    bp: &BoundParams<T>,
    prefix: &str,
    levels: usize,
) -> FlowPyramid<Var> {
    assert!(levels >= 3);
    let (_, h, w) = tape.value(img).dims3();
    assert!(
        h % (1 << (levels - 1)) == 0 && w % (1 << (levels - 1)) == 0,
        "flow input {h}x{w} not divisible by 2^{}",
        levels - 1
    );

    // standardizing both inputs removes global gain and offset nuisance
    // (white balance, exposure) before any matching happens
    let eps = T::from_f64(1e-6);
    let img = tape.standardize(img, eps);
    let reference = tape.standardize(reference, eps);

    let mut imgs = vec![img];
    let mut refs = vec![reference];
    for l in 1..levels {
        let pi = tape.avg_pool2(imgs[l - 1]);
        let pr = tape.avg_pool2(refs[l - 1]);
        imgs.push(pi);
        refs.push(pr);
    }

    let mut flow: Option<Var> = None;
    let mut finest = Vec::new();
    for l in (0..levels).rev() {
        let (_, lh, lw) = tape.value(imgs[l]).dims3();
        let f_up = match flow {
            None => tape.constant(Tensor::zeros(&[2, lh, lw])),
            Some(f) => {
                let up = tape.upsample_bilinear(f, lh, lw);
                tape.scale_var(up, T::from_f64(2.0))
            }
        };
        let warped = tape.warp(imgs[l], f_up);
        let f_in = tape.scale_var(f_up, T::from_f64(FLOW_INPUT_SCALE));
        let inp = tape.concat_dim0(&[warped, refs[l], f_in]);
        let residual = predict_residual(tape, inp, bp, prefix, l);
        let f = tape.add(f_up, residual);
        flow = Some(f);
        if l <= 2 {
            finest.push(f);
        }
    }
    // finest was pushed coarse-to-fine: [f3, f2, f1]
    FlowPyramid {
        f1: finest[2],
        f2: finest[1],
        f3: finest[0],
    }
}

/// Estimate the flow pyramid between a 3-channel frame and the reference.
pub fn estimate_pyramid<T: Scalar>(
    img: &Tensor<T>,
    reference: &Tensor<T>,
    params: &FlowNetParams<T>,
) -> Result<FlowPyramid<Tensor<T>>> {
    let (c, h, w) = img.dims3();
    if c != 3 || reference.shape() != img.shape() {
        return Err(Error::dim(format!(
            "estimate_pyramid: want matching 3xHxW inputs, got {:?} and {:?}",
            img.shape(),
            reference.shape()
        )));
    }
    let div = 1 << (params.cfg.levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::dim(format!(
            "estimate_pyramid: {h}x{w} not divisible by {div}"
        )));
    }
    let mut tape = Tape::<T>::new();
    let iv = tape.constant(img.clone());
    let rv = tape.constant(reference.clone());
    let bp = BoundParams::bind(&mut tape, &params.set, &[]);
    let pyr = estimate_pyramid_t(&mut tape, iv, rv, &bp, "flow", params.cfg.levels);
    Ok(pyr.map(|&v| tape.value(v).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect())
    }

    #[test]
    fn warp_zero_flow_identity_exact() {
        let x = rand_tensor(&[3, 5, 7], 1);
        let out = warp(&x, &Tensor::zeros(&[2, 5, 7])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn warp_dim_mismatch_errors() {
        let x = rand_tensor(&[3, 5, 7], 1);
        assert!(matches!(
            warp(&x, &Tensor::zeros(&[2, 5, 6])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn warp_half_pixel_ramp_gives_midpoints() {
        let mut x = Tensor::zeros(&[1, 4, 6]);
        for y in 0..4 {
            for i in 0..6 {
                x.set3(0, y, i, i as f64);
            }
        }
        let f = Tensor::from_vec(
            &[2, 4, 6],
            (0..48).map(|i| if i < 24 { 0.5 } else { 0.0 }).collect(),
        );
        let out = warp(&x, &f).unwrap();
        for y in 0..4 {
            for i in 0..5 {
                assert!((out.at3(0, y, i) - (i as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_is_linear_in_input() {
        let x = rand_tensor(&[2, 6, 6], 2);
        let y = rand_tensor(&[2, 6, 6], 3);
        let f = rand_tensor(&[2, 6, 6], 4).scale(0.7);
        let (a, b) = (1.7, -0.6);
        let mut combo = x.scale(a);
        combo.add_assign_tensor(&y.scale(b));
        let lhs = warp(&combo, &f).unwrap();
        let mut rhs = warp(&x, &f).unwrap().scale(a);
        rhs.add_assign_tensor(&warp(&y, &f).unwrap().scale(b));
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn upsample_flow_scales_values_and_dims() {
        let mut f = Tensor::zeros(&[2, 4, 4]);
        for p in 0..16 {
            f.data_mut()[p] = 1.0;
        }
        let up = upsample_flow(&f);
        assert_eq!(up.shape(), &[2, 8, 8]);
        for p in 0..64 {
            assert!((up.data()[p] - 2.0).abs() < 1e-12, "x-component constant");
            assert!(up.data()[64 + p].abs() < 1e-12, "y-component zero");
        }
        let zero = upsample_flow(&Tensor::<f64>::zeros(&[2, 3, 5]));
        assert!(zero.max_abs() == 0.0 && zero.shape() == [2, 6, 10]);
    }

    #[test]
    fn upsample_flow_matches_bilinear_oracle_on_ramp() {
        // linear ramp in x; oracle evaluates the closed-form half-pixel
        // bilinear formula with border clamping, then doubles values
        let mut f = Tensor::zeros(&[2, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                f.set3(0, y, x, x as f64);
                f.set3(1, y, x, 0.25 * y as f64);
            }
        }
        let up = upsample_flow(&f);
        for oy in 0..8 {
            for ox in 0..8 {
                let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 3.0);
                let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 3.0);
                assert!((up.at3(0, oy, ox) - 2.0 * sx).abs() < 1e-12);
                assert!((up.at3(1, oy, ox) - 2.0 * 0.25 * sy).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_initialized_heads_give_zero_pyramid() {
        let mut rng = Rng::new(5);
        let params = FlowNetParams::<f64>::init(FlowNetConfig::default(), &mut rng);
        let img = rand_tensor(&[3, 32, 32], 6).map(|v| v.abs().min(1.0));
        let reference = rand_tensor(&[3, 32, 32], 7).map(|v| v.abs().min(1.0));
        let pyr = estimate_pyramid(&img, &reference, &params).unwrap();
        assert_eq!(pyr.f1.max_abs(), 0.0);
        assert_eq!(pyr.f2.max_abs(), 0.0);
        assert_eq!(pyr.f3.max_abs(), 0.0);
    }

    #[test]
    fn pyramid_geometry_and_level_count() {
        for levels in [3usize, 4, 5] {
            let mut rng = Rng::new(8);
            let cfg = FlowNetConfig { levels, hidden: 8 };
            let params = FlowNetParams::<f64>::init(cfg, &mut rng);
            let img = rand_tensor(&[3, 64, 64], 9);
            let reference = rand_tensor(&[3, 64, 64], 10);
            let pyr = estimate_pyramid(&img, &reference, &params).unwrap();
            assert_eq!(pyr.f1.shape(), &[2, 64, 64], "levels={levels}");
            assert_eq!(pyr.f2.shape(), &[2, 32, 32]);
            assert_eq!(pyr.f3.shape(), &[2, 16, 16]);
        }
    }

    #[test]
    fn indivisible_dims_error() {
        let mut rng = Rng::new(11);
        let params = FlowNetParams::<f64>::init(FlowNetConfig::default(), &mut rng);
        let img = rand_tensor(&[3, 24, 24], 12);
        let reference = rand_tensor(&[3, 24, 24], 13);
        assert!(matches!(
            estimate_pyramid(&img, &reference, &params),
            Err(Error::Dimension(_))
        ));
    }
}
