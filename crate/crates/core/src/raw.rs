//! Synthetic RAW burst generation.
//!
//! An sRGB source image is unprocessed into linear camera space (inverse
//! gamma, inverse color-correction matrix, inverse white balance), then
//! each burst frame applies a small rigid transform, bicubic downsampling,
//! RGGB mosaicing, packing into 4-channel half-resolution RAW, and
//! heteroscedastic Gaussian noise. Frame 0 is the reference and keeps the
//! identity transform. All randomness flows through explicit seeded
//! streams so a burst is reproducible byte for byte.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Srgb,
    Linear,
}

/// RGB image with values in [0, 1], even dimensions.
#[derive(Clone, Debug)]
pub struct RgbImage {
    pub data: Tensor<f64>,
    pub color_space: ColorSpace,
}

impl RgbImage {
    pub fn new(data: Tensor<f64>, color_space: ColorSpace) -> Result<Self> {
        let (c, h, w) = data.dims3();
        if c != 3 {
            return Err(Error::dim(format!("RgbImage needs 3 channels, got {c}")));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("RgbImage dims must be even, got {h}x{w}")));
        }
        for &v in data.data() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::contract(format!("RgbImage value {v} outside [0,1]")));
            }
        }
        Ok(RgbImage { data, color_space })
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dims3();
        (h, w)
    }
}

/// Single-channel Bayer mosaic, fixed RGGB pattern:
/// (2r, 2c) red, (2r, 2c+1) and (2r+1, 2c) green, (2r+1, 2c+1) blue.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMosaic {
    pub data: Tensor<f64>,
}

/// 4-channel half-resolution RAW, channel order R, G1, G2, B.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedRaw {
    pub data: Tensor<f64>,
}

/// Rigid scene motion at HR resolution: translation in pixels plus a
/// rotation about the image center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub dx: f64,
    pub dy: f64,
    pub rot: f64,
}

impl TransformParams {
    pub fn identity() -> Self {
        TransformParams::default()
    }

    pub fn is_identity(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.rot == 0.0
    }
}

/// Heteroscedastic Gaussian noise in linear RAW space:
/// variance = read_sigma^2 + shot_gain * signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub read_sigma: f64,
    pub shot_gain: f64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.read_sigma >= 0.0 && self.read_sigma.is_finite())
            || !(self.shot_gain >= 0.0 && self.shot_gain.is_finite())
        {
            return Err(Error::contract(format!("invalid noise params {self:?}")));
        }
        Ok(())
    }
}

/// Parameters drawn by the inverse camera pipeline, recorded so the
/// forward pipeline can be replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub ccm: [[f64; 3]; 3],
    pub gains: [f64; 3],
}

impl CameraParams {
    pub fn identity() -> Self {
        CameraParams {
            ccm: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gains: [1.0, 1.0, 1.0],
        }
    }
}

/// Configuration for burst synthesis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BurstConfig {
    pub frames: usize,
    pub scale: usize,
    /// Max |translation| at HR resolution, pixels.
    pub max_shift: f64,
    /// Max |rotation| about the image center, degrees.
    pub max_rot_deg: f64,
    pub read_range: (f64, f64),
    pub shot_range: (f64, f64),
    pub seed: u64,
}

impl Default for BurstConfig {
    fn default() -> Self {
        BurstConfig {
            frames: 4,
            scale: 4,
            max_shift: 8.0,
            max_rot_deg: 1.0,
            read_range: (0.001, 0.015),
            shot_range: (0.0001, 0.001),
            seed: 0,
        }
    }
}

impl BurstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 {
            return Err(Error::config("burst needs at least 1 frame".to_string()));
        }
        if ![1, 2, 4].contains(&self.scale) {
            return Err(Error::config(format!("scale {} not in {{1,2,4}}", self.scale)));
        }
        if self.max_shift < 0.0 || self.max_rot_deg < 0.0 {
            return Err(Error::config("negative motion range".to_string()));
        }
        for (lo, hi) in [self.read_range, self.shot_range] {
            if lo < 0.0 || hi < lo {
                return Err(Error::config(format!("bad noise range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// One synthesized burst: N packed frames plus everything needed to
/// reconstruct how they were made.
#[derive(Clone, Debug)]
pub struct BurstSample {
    pub frames: Vec<PackedRaw>,
    /// Linear-light ground truth the frames were degraded from.
    pub hr: RgbImage,
    pub transforms: Vec<TransformParams>,
    pub noise: NoiseParams,
    pub camera: CameraParams,
    /// Per-frame dense flow at LR mosaic resolution aligning frame i to
    /// the reference.
    pub gt_flows: Option<Vec<Tensor<f64>>>,
}

// rng stream tags
const TAG_CAMERA: u64 = 0x01;
const TAG_NOISE_PARAMS: u64 = 0x02;
const TAG_TRANSFORM: u64 = 0x1000;
const TAG_FRAME_NOISE: u64 = 0x2000;

/// sRGB electro-optical transfer function (decode to linear).
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// RGGB-subsample a linear RGB image into a single-channel mosaic.
pub fn mosaic(img: &RgbImage) -> Result<RawMosaic> {
    if img.color_space != ColorSpace::Linear {
        return Err(Error::contract(
            "mosaic expects a linear-light image".to_string(),
        ));
    }
    let (_, h, w) = img.data.dims3();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("mosaic dims must be even, got {h}x{w}")));
    }
    let mut out = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let ch = match (y % 2, x % 2) {
                (0, 0) => 0, // R
                (1, 1) => 2, // B
                _ => 1,      // G
            };
            out.set3(0, y, x, img.data.at3(ch, y, x));
        }
    }
    Ok(RawMosaic { data: out })
}

/// Extract the four RGGB phase sub-grids into channels (R, G1, G2, B).
pub fn pack(m: &RawMosaic) -> Result<PackedRaw> {
    let (_, h, w) = m.data.dims3();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("pack dims must be even, got {h}x{w}")));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[4, ph, pw]);
    for y in 0..ph {
        for x in 0..pw {
            out.set3(0, y, x, m.data.at3(0, 2 * y, 2 * x));
            out.set3(1, y, x, m.data.at3(0, 2 * y, 2 * x + 1));
            out.set3(2, y, x, m.data.at3(0, 2 * y + 1, 2 * x));
            out.set3(3, y, x, m.data.at3(0, 2 * y + 1, 2 * x + 1));
        }
    }
    Ok(PackedRaw { data: out })
}

/// Interleave packed channels back into the mosaic (pixel shuffle).
pub fn unpack(p: &PackedRaw) -> RawMosaic {
    let (_, ph, pw) = p.data.dims3();
    let (h, w) = (ph * 2, pw * 2);
    let mut out = Tensor::zeros(&[1, h, w]);
    for y in 0..ph {
        for x in 0..pw {
            out.set3(0, 2 * y, 2 * x, p.data.at3(0, y, x));
            out.set3(0, 2 * y, 2 * x + 1, p.data.at3(1, y, x));
            out.set3(0, 2 * y + 1, 2 * x, p.data.at3(2, y, x));
            out.set3(0, 2 * y + 1, 2 * x + 1, p.data.at3(3, y, x));
        }
    }
    RawMosaic { data: out }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b, c, d) = (
                m[(j + 1) % 3][(i + 1) % 3],
                m[(j + 1) % 3][(i + 2) % 3],
                m[(j + 2) % 3][(i + 1) % 3],
                m[(j + 2) % 3][(i + 2) % 3],
            );
            *v = (a * d - b * c) * inv_det;
        }
    }
    inv
}

/// Draw camera parameters: a row-normalized perturbation of the identity
/// CCM (off-diagonals uniform in [-0.1, 0.1]) and white-balance gains with
/// red/blue in [1.5, 2.5], green fixed at 1.
pub fn draw_camera_params(rng: &mut Rng) -> CameraParams {
    let mut ccm = [[0.0; 3]; 3];
    for (i, row) in ccm.iter_mut().enumerate() {
        let mut off_sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                *v = rng.uniform_in(-0.1, 0.1);
                off_sum += *v;
            }
        }
        row[i] = 1.0 - off_sum;
    }
    let gains = [rng.uniform_in(1.5, 2.5), 1.0, rng.uniform_in(1.5, 2.5)];
    CameraParams { ccm, gains }
}

/// Inverse camera pipeline with explicit parameters: inverse sRGB gamma,
/// inverse CCM, inverse white balance, clip to [0, 1].
pub fn apply_inverse_pipeline(img: &RgbImage, cam: &CameraParams) -> Result<RgbImage> {
    if img.color_space != ColorSpace::Srgb {
        return Err(Error::contract(
            "inverse camera pipeline expects an sRGB image".to_string(),
        ));
    }
    let (_, h, w) = img.data.dims3();
    let inv_ccm = invert3(&cam.ccm);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let lin = [
                srgb_to_linear(img.data.at3(0, y, x)),
                srgb_to_linear(img.data.at3(1, y, x)),
                srgb_to_linear(img.data.at3(2, y, x)),
            ];
            for c in 0..3 {
                let mut v =
                    inv_ccm[c][0] * lin[0] + inv_ccm[c][1] * lin[1] + inv_ccm[c][2] * lin[2];
                v /= cam.gains[c];
                out.set3(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    RgbImage::new(out, ColorSpace::Linear)
}

/// Inverse camera pipeline with randomly drawn parameters; the draw is
/// returned so it can be recorded in sample metadata.
pub fn inverse_camera_pipeline(img: &RgbImage, rng: &mut Rng) -> Result<(RgbImage, CameraParams)> {
    let cam = draw_camera_params(rng);
    let out = apply_inverse_pipeline(img, &cam)?;
    Ok((out, cam))
}

/// Catmull-Rom cubic kernel (a = -0.5). Exact identity at integer
/// sampling positions: k(0)=1, k(1)=k(2)=0.
fn cubic_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// Separable bicubic resize with half-pixel centers and clamped borders.
pub fn resize_bicubic(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (c, h, w) = x.dims3();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let y0 = sy.floor() as isize;
        let ty = sy - y0 as f64;
        let wy: Vec<f64> = (-1..=2).map(|j| cubic_kernel(ty - j as f64)).collect();
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let x0 = sx.floor() as isize;
            let tx = sx - x0 as f64;
            let wx: Vec<f64> = (-1..=2).map(|i| cubic_kernel(tx - i as f64)).collect();
            for ci in 0..c {
                let mut acc = 0.0;
                for (j, &wyv) in wy.iter().enumerate() {
                    if wyv == 0.0 {
                        continue;
                    }
                    let yy = (y0 + j as isize - 1).clamp(0, h as isize - 1) as usize;
                    let mut row_acc = 0.0;
                    for (i, &wxv) in wx.iter().enumerate() {
                        if wxv == 0.0 {
                            continue;
                        }
                        let xx = (x0 + i as isize - 1).clamp(0, w as isize - 1) as usize;
                        row_acc += wxv * x.at3(ci, yy, xx);
                    }
                    acc += wyv * row_acc;
                }
                out.set3(ci, oy, ox, acc);
            }
        }
    }
    out
}

/// Rigid warp at HR resolution: out(p) = img(R(p - c) + c + d) with
/// bilinear sampling and replicated borders. The rotation is about the
/// image center c = ((w-1)/2, (h-1)/2).
pub fn affine_warp(img: &Tensor<f64>, t: &TransformParams) -> Tensor<f64> {
    let (c, h, w) = img.dims3();
    if t.is_identity() {
        return img.clone();
    }
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = t.rot.sin_cos();
    let mut out = Tensor::zeros(&[c, h, w]);
    for y in 0..h {
        for x in 0..w {
            let vx = x as f64 - cx;
            let vy = y as f64 - cy;
            let sxf = cos * vx - sin * vy + cx + t.dx;
            let syf = sin * vx + cos * vy + cy + t.dy;
            let x0 = sxf.floor();
            let y0 = syf.floor();
            let ax = sxf - x0;
            let ay = syf - y0;
            let xi = |v: f64| (v.max(0.0).min(w as f64 - 1.0)) as usize;
            let yi = |v: f64| (v.max(0.0).min(h as f64 - 1.0)) as usize;
            let (x0c, x1c) = (xi(x0), xi(x0 + 1.0));
            let (y0c, y1c) = (yi(y0), yi(y0 + 1.0));
            for ci in 0..c {
                let v00 = img.at3(ci, y0c, x0c);
                let v01 = img.at3(ci, y0c, x1c);
                let v10 = img.at3(ci, y1c, x0c);
                let v11 = img.at3(ci, y1c, x1c);
                let v = (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01)
                    + ay * ((1.0 - ax) * v10 + ax * v11);
                out.set3(ci, y, x, v);
            }
        }
    }
    out
}

/// Degradation model: warp by the rigid transform, bicubic-downsample by
/// `scale`, mosaic, pack, add signal-dependent noise, clip to [0, 1].
pub fn degrade(
    hr_linear: &RgbImage,
    t: &TransformParams,
    scale: usize,
    noise: &NoiseParams,
    rng: &mut Rng,
) -> Result<PackedRaw> {
    if hr_linear.color_space != ColorSpace::Linear {
        return Err(Error::contract("degrade expects a linear image".to_string()));
    }
    noise.validate()?;
    if ![1, 2, 4].contains(&scale) {
        return Err(Error::config(format!("scale {scale} not in {{1,2,4}}")));
    }
    let (_, h, w) = hr_linear.data.dims3();
    if h % (2 * scale) != 0 || w % (2 * scale) != 0 {
        return Err(Error::dim(format!(
            "HR dims {h}x{w} not divisible by 2*scale={}",
            2 * scale
        )));
    }
    let warped = affine_warp(&hr_linear.data, t);
    let lr = if scale == 1 {
        warped
    } else {
        resize_bicubic(&warped, h / scale, w / scale)
    };
    let lr = lr.map(|v| v.clamp(0.0, 1.0));
    let lr_img = RgbImage::new(lr, ColorSpace::Linear)?;
    let m = mosaic(&lr_img)?;
    let mut p = pack(&m)?;
    for v in p.data.data_mut() {
        let clean = *v;
        let std = (noise.read_sigma * noise.read_sigma + noise.shot_gain * clean.max(0.0)).sqrt();
        *v = (clean + std * rng.normal()).clamp(0.0, 1.0);
    }
    Ok(p)
}

/// Analytic flow at LR mosaic resolution aligning a transformed frame to
/// the reference: f(q) = [R(-rot)(u - c - d) - (u - c)] / s with
/// u = (q + 0.5) s - 0.5 the HR position of LR pixel q.
pub fn analytic_flow(t: &TransformParams, hr_h: usize, hr_w: usize, scale: usize) -> Tensor<f64> {
    let (lh, lw) = (hr_h / scale, hr_w / scale);
    let cx = (hr_w as f64 - 1.0) / 2.0;
    let cy = (hr_h as f64 - 1.0) / 2.0;
    let (sin, cos) = (-t.rot).sin_cos();
    let s = scale as f64;
    let mut flow = Tensor::zeros(&[2, lh, lw]);
    for qy in 0..lh {
        let uy = (qy as f64 + 0.5) * s - 0.5;
        for qx in 0..lw {
            let ux = (qx as f64 + 0.5) * s - 0.5;
            let wx = ux - cx - t.dx;
            let wy = uy - cy - t.dy;
            let rx = cos * wx - sin * wy;
            let ry = sin * wx + cos * wy;
            flow.set3(0, qy, qx, (rx - (ux - cx)) / s);
            flow.set3(1, qy, qx, (ry - (uy - cy)) / s);
        }
    }
    flow
}

/// Synthesize a burst from an sRGB image. Frame 0 is the reference with
/// identity motion; per-frame draws use streams derived from
/// (seed, frame index) so frame i's transform does not depend on N.
pub fn synthesize_burst(hr_srgb: &RgbImage, cfg: &BurstConfig) -> Result<BurstSample> {
    cfg.validate()?;
    if hr_srgb.color_space != ColorSpace::Srgb {
        return Err(Error::contract(
            "synthesize_burst expects an sRGB source".to_string(),
        ));
    }
    let (_, h, w) = hr_srgb.data.dims3();
    if h % (2 * cfg.scale) != 0 || w % (2 * cfg.scale) != 0 {
        return Err(Error::dim(format!(
            "HR dims {h}x{w} not divisible by 2*scale={}",
            2 * cfg.scale
        )));
    }

    let mut cam_rng = Rng::derive(cfg.seed, TAG_CAMERA);
    let (hr_linear, camera) = inverse_camera_pipeline(hr_srgb, &mut cam_rng)?;

    let mut noise_rng = Rng::derive(cfg.seed, TAG_NOISE_PARAMS);
    let noise = NoiseParams {
        read_sigma: noise_rng.uniform_in(cfg.read_range.0, cfg.read_range.1),
        shot_gain: noise_rng.uniform_in(cfg.shot_range.0, cfg.shot_range.1),
    };

    let max_rot = cfg.max_rot_deg.to_radians();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut transforms = Vec::with_capacity(cfg.frames);
    let mut flows = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let t = if i == 0 {
            TransformParams::identity()
        } else {
            let mut trng = Rng::derive(cfg.seed, TAG_TRANSFORM + i as u64);
            TransformParams {
                dx: trng.uniform_in(-cfg.max_shift, cfg.max_shift),
                dy: trng.uniform_in(-cfg.max_shift, cfg.max_shift),
                rot: trng.uniform_in(-max_rot, max_rot),
            }
        };
        let mut frng = Rng::derive(cfg.seed, TAG_FRAME_NOISE + i as u64);
        frames.push(degrade(&hr_linear, &t, cfg.scale, &noise, &mut frng)?);
        flows.push(analytic_flow(&t, h, w, cfg.scale));
        transforms.push(t);
    }

    Ok(BurstSample {
        frames,
        hr: hr_linear,
        transforms,
        noise,
        camera,
        gt_flows: Some(flows),
    })
}

/// Bilinear demosaic of an RGGB mosaic into 3-channel RGB: each missing
/// color is the mean of its nearest in-bounds same-color neighbors. Used
/// as the model's global skip; intentionally simple.
pub fn naive_demosaic<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (_, h, w) = m.dims3();
    let mut out = Tensor::zeros(&[3, h, w]);
    let get = |y: isize, x: isize| -> Option<T> {
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            Some(m.at3(0, y as usize, x as usize))
        } else {
            None
        }
    };
    let avg = |taps: &[(isize, isize)]| -> T {
        let mut acc = T::ZERO;
        let mut n = 0usize;
        for &(y, x) in taps {
            if let Some(v) = get(y, x) {
                acc += v;
                n += 1;
            }
        }
        if n == 0 {
            T::ZERO
        } else {
            acc / T::from_usize(n)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let (r, g, b) = match (y % 2, x % 2) {
                (0, 0) => {
                    // red site
                    let r = m.at3(0, y, x);
                    let g = avg(&[(yi - 1, xi), (yi + 1, xi), (yi, xi - 1), (yi, xi + 1)]);
                    let b = avg(&[
                        (yi - 1, xi - 1),
                        (yi - 1, xi + 1),
                        (yi + 1, xi - 1),
                        (yi + 1, xi + 1),
                    ]);
                    (r, g, b)
                }
                (0, 1) => {
                    // green site on red row
                    let r = avg(&[(yi, xi - 1), (yi, xi + 1)]);
                    let g = m.at3(0, y, x);
                    let b = avg(&[(yi - 1, xi), (yi + 1, xi)]);
                    (r, g, b)
                }
                (1, 0) => {
                    // green site on blue row
                    let r = avg(&[(yi - 1, xi), (yi + 1, xi)]);
                    let g = m.at3(0, y, x);
                    let b = avg(&[(yi, xi - 1), (yi, xi + 1)]);
                    (r, g, b)
                }
                _ => {
                    // blue site
                    let r = avg(&[
                        (yi - 1, xi - 1),
                        (yi - 1, xi + 1),
                        (yi + 1, xi - 1),
                        (yi + 1, xi + 1),
                    ]);
                    let g = avg(&[(yi - 1, xi), (yi + 1, xi), (yi, xi - 1), (yi, xi + 1)]);
                    let b = m.at3(0, y, x);
                    (r, g, b)
                }
            };
            out.set3(0, y, x, r);
            out.set3(1, y, x, g);
            out.set3(2, y, x, b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::max_abs_diff;

    /// Smooth low-saturation sRGB test texture: a shared luminance field of
    /// a few sinusoids plus a small per-channel chroma ripple.
    fn smooth_texture(h: usize, w: usize, seed: u64, chroma: f64) -> RgbImage {
        let mut rng = Rng::new(seed);
        let mut waves = Vec::new();
        for _ in 0..5 {
            waves.push((
                rng.uniform_in(0.02, 0.12),
                rng.uniform_in(0.02, 0.12),
                rng.uniform_in(0.0, std::f64::consts::TAU),
                rng.uniform_in(0.05, 0.18),
            ));
        }
        let mut data = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let mut lum = 0.45;
                for &(fx, fy, ph, amp) in &waves {
                    lum += amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin();
                }
                for c in 0..3 {
                    let ripple = chroma
                        * ((0.05 * (x as f64 + 17.0 * c as f64)).sin()
                            * (0.07 * y as f64).cos());
                    data.set3(c, y, x, (lum + ripple).clamp(0.02, 0.98));
                }
            }
        }
        RgbImage::new(data, ColorSpace::Srgb).unwrap()
    }

    #[test]
    fn mosaic_constant_gray_is_constant() {
        let img = RgbImage::new(Tensor::full(&[3, 4, 4], 0.5), ColorSpace::Linear).unwrap();
        let m = mosaic(&img).unwrap();
        for &v in m.data.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn mosaic_pure_red_pattern() {
        let mut data = Tensor::zeros(&[3, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                data.set3(0, y, x, 1.0);
            }
        }
        let img = RgbImage::new(data, ColorSpace::Linear).unwrap();
        let m = mosaic(&img).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(m.data.at3(0, y, x), expect, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn mosaic_matches_index_oracle() {
        let mut rng = Rng::new(77);
        let data = Tensor::from_vec(&[3, 4, 4], (0..48).map(|_| rng.uniform()).collect());
        let img = RgbImage::new(data.clone(), ColorSpace::Linear).unwrap();
        let m = mosaic(&img).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let ch = match (y % 2, x % 2) {
                    (0, 0) => 0,
                    (1, 1) => 2,
                    _ => 1,
                };
                assert_eq!(m.data.at3(0, y, x), data.at3(ch, y, x));
            }
        }
    }

    #[test]
    fn mosaic_rejects_srgb_and_odd_dims() {
        let img = RgbImage::new(Tensor::full(&[3, 4, 4], 0.5), ColorSpace::Srgb).unwrap();
        assert!(matches!(mosaic(&img), Err(crate::Error::Contract(_))));
        assert!(RgbImage::new(Tensor::full(&[3, 3, 4], 0.5), ColorSpace::Linear).is_err());
    }

    #[test]
    fn pack_smallest_block() {
        let m = RawMosaic {
            data: Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]),
        };
        let p = pack(&m).unwrap();
        assert_eq!(p.data.shape(), &[4, 1, 1]);
        assert_eq!(p.data.data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn pack_unpack_roundtrip_bit_exact() {
        let mut rng = Rng::new(5);
        let m = RawMosaic {
            data: Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rng.uniform()).collect()),
        };
        let back = unpack(&pack(&m).unwrap());
        assert_eq!(back.data.data(), m.data.data());
    }

    #[test]
    fn packed_constant_channels_tile() {
        let mut p = Tensor::zeros(&[4, 2, 2]);
        for (c, v) in [0.6, 0.2, 0.3, 0.9].iter().enumerate() {
            for y in 0..2 {
                for x in 0..2 {
                    p.set3(c, y, x, *v);
                }
            }
        }
        let m = unpack(&PackedRaw { data: p });
        for y in 0..4 {
            for x in 0..4 {
                let expect = match (y % 2, x % 2) {
                    (0, 0) => 0.6,
                    (0, 1) => 0.2,
                    (1, 0) => 0.3,
                    _ => 0.9,
                };
                assert_eq!(m.data.at3(0, y, x), expect);
            }
        }
    }

    #[test]
    fn inverse_pipeline_identity_params_is_gamma_decode() {
        let img = smooth_texture(8, 8, 1, 0.05);
        let out = apply_inverse_pipeline(&img, &CameraParams::identity()).unwrap();
        for (o, i) in out.data.data().iter().zip(img.data.data()) {
            assert!((o - srgb_to_linear(*i)).abs() < 1e-12);
        }
    }

    #[test]
    fn transfer_curve_endpoints_fixed() {
        assert_eq!(srgb_to_linear(0.0), 0.0);
        assert!((srgb_to_linear(1.0) - 1.0).abs() < 1e-12);
    }

    /// Forward camera pipeline implemented independently for the test:
    /// gains, CCM, then linear-to-sRGB encode.
    fn forward_pipeline_oracle(linear: &RgbImage, cam: &CameraParams) -> Tensor<f64> {
        fn encode(v: f64) -> f64 {
            if v <= 0.0031308 {
                12.92 * v
            } else {
                1.055 * v.powf(1.0 / 2.4) - 0.055
            }
        }
        let (_, h, w) = linear.data.dims3();
        let mut out = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let wb = [
                    linear.data.at3(0, y, x) * cam.gains[0],
                    linear.data.at3(1, y, x) * cam.gains[1],
                    linear.data.at3(2, y, x) * cam.gains[2],
                ];
                for c in 0..3 {
                    let v =
                        cam.ccm[c][0] * wb[0] + cam.ccm[c][1] * wb[1] + cam.ccm[c][2] * wb[2];
                    out.set3(c, y, x, encode(v));
                }
            }
        }
        out
    }

    #[test]
    fn forward_pipeline_recovers_gray_ramp() {
        // mid-gray ramp keeps all intermediate values away from clip
        let mut data = Tensor::zeros(&[3, 4, 64]);
        for y in 0..4 {
            for x in 0..64 {
                let v = 0.25 + 0.5 * x as f64 / 63.0;
                for c in 0..3 {
                    data.set3(c, y, x, v);
                }
            }
        }
        let img = RgbImage::new(data.clone(), ColorSpace::Srgb).unwrap();
        let mut rng = Rng::new(9);
        let (linear, cam) = inverse_camera_pipeline(&img, &mut rng).unwrap();
        let recovered = forward_pipeline_oracle(&linear, &cam);
        assert!(max_abs_diff(&recovered, &data) < 1e-4);
    }

    #[test]
    fn degrade_identity_scale1_zero_noise_is_pack_mosaic() {
        let srgb = smooth_texture(16, 16, 3, 0.1);
        let hr = apply_inverse_pipeline(&srgb, &CameraParams::identity()).unwrap();
        let mut rng = Rng::new(1);
        let p = degrade(
            &hr,
            &TransformParams::identity(),
            1,
            &NoiseParams::default(),
            &mut rng,
        )
        .unwrap();
        let expect = pack(&mosaic(&hr).unwrap()).unwrap();
        assert_eq!(p.data.data(), expect.data.data());
    }

    #[test]
    fn degrade_integer_translation_matches_shift_oracle() {
        let srgb = smooth_texture(32, 32, 4, 0.1);
        let hr = apply_inverse_pipeline(&srgb, &CameraParams::identity()).unwrap();
        let s = 2usize;
        let t = TransformParams {
            dx: (2 * s) as f64,
            dy: 0.0,
            rot: 0.0,
        };
        let zero = NoiseParams::default();
        let mut rng = Rng::new(1);
        let shifted = degrade(&hr, &t, s, &zero, &mut rng).unwrap();
        let baseline = degrade(&hr, &TransformParams::identity(), s, &zero, &mut rng).unwrap();
        // content moves one packed pixel left; compare away from both
        // borders (resize taps clamp differently near the edges)
        let (_, ph, pw) = shifted.data.dims3();
        for c in 0..4 {
            for y in 0..ph {
                for x in 2..pw.saturating_sub(2) {
                    let a = shifted.data.at3(c, y, x);
                    let b = baseline.data.at3(c, y, x + 1);
                    assert!((a - b).abs() < 1e-12, "c={c} y={y} x={x}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn degrade_zero_noise_ignores_rng_seed() {
        let srgb = smooth_texture(16, 16, 5, 0.1);
        let hr = apply_inverse_pipeline(&srgb, &CameraParams::identity()).unwrap();
        let zero = NoiseParams::default();
        let t = TransformParams {
            dx: 1.3,
            dy: -0.7,
            rot: 0.01,
        };
        let a = degrade(&hr, &t, 2, &zero, &mut Rng::new(1)).unwrap();
        let b = degrade(&hr, &t, 2, &zero, &mut Rng::new(999)).unwrap();
        assert_eq!(a.data.data(), b.data.data());
    }

    #[test]
    fn noise_variance_matches_read_plus_shot_model() {
        let value = 0.4;
        let img = RgbImage::new(Tensor::full(&[3, 512, 512], value), ColorSpace::Linear).unwrap();
        let noise = NoiseParams {
            read_sigma: 0.01,
            shot_gain: 0.001,
        };
        let mut rng = Rng::new(12345);
        let p = degrade(&img, &TransformParams::identity(), 1, &noise, &mut rng).unwrap();
        let n = p.data.numel();
        assert!(n >= 100_000, "need at least 1e5 pixels, got {n}");
        let mean: f64 = p.data.data().iter().sum::<f64>() / n as f64;
        let var: f64 = p
            .data
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        let expect = noise.read_sigma.powi(2) + noise.shot_gain * value;
        let rel = (var - expect).abs() / expect;
        assert!(rel < 0.1, "variance {var} vs model {expect} (rel {rel})");
    }

    #[test]
    fn synthesize_single_frame_burst() {
        let srgb = smooth_texture(16, 16, 6, 0.1);
        let cfg = BurstConfig {
            frames: 1,
            scale: 2,
            seed: 3,
            ..BurstConfig::default()
        };
        let b = synthesize_burst(&srgb, &cfg).unwrap();
        assert_eq!(b.frames.len(), 1);
        assert!(b.transforms[0].is_identity());
    }

    #[test]
    fn synthesize_is_seed_deterministic_and_frame_draws_differ() {
        let srgb = smooth_texture(32, 32, 7, 0.1);
        let cfg = BurstConfig {
            frames: 4,
            scale: 2,
            seed: 11,
            ..BurstConfig::default()
        };
        let a = synthesize_burst(&srgb, &cfg).unwrap();
        let b = synthesize_burst(&srgb, &cfg).unwrap();
        for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
            assert_eq!(fa.data.data(), fb.data.data());
        }
        assert_eq!(a.transforms, b.transforms);
        assert_ne!(a.transforms[1], a.transforms[2]);
        assert_ne!(a.transforms[2], a.transforms[3]);
        // frame draws keyed by index: growing the burst keeps earlier frames
        let cfg6 = BurstConfig {
            frames: 6,
            ..cfg.clone()
        };
        let c = synthesize_burst(&srgb, &cfg6).unwrap();
        assert_eq!(&c.transforms[..4], &a.transforms[..]);
    }

    #[test]
    fn invalid_burst_config_rejected() {
        let srgb = smooth_texture(16, 16, 8, 0.1);
        let cfg = BurstConfig {
            frames: 0,
            ..BurstConfig::default()
        };
        assert!(matches!(
            synthesize_burst(&srgb, &cfg),
            Err(crate::Error::Config(_))
        ));
        let cfg = BurstConfig {
            read_range: (0.5, 0.1),
            ..BurstConfig::default()
        };
        assert!(matches!(
            synthesize_burst(&srgb, &cfg),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn gt_flows_warp_frames_onto_reference() {
        // sub-pixel motion, zero noise, low-chroma source so the Bayer
        // checkerboard stays small under the white-balance gains
        let srgb = smooth_texture(64, 64, 9, 0.02);
        let cfg = BurstConfig {
            frames: 4,
            scale: 4,
            max_shift: 0.1,
            max_rot_deg: 0.05,
            read_range: (0.0, 0.0),
            shot_range: (0.0, 0.0),
            seed: 21,
        };
        let b = synthesize_burst(&srgb, &cfg).unwrap();
        let flows = b.gt_flows.as_ref().unwrap();
        let ref_mosaic = unpack(&b.frames[0]);
        let margin = 4usize;
        for i in 1..cfg.frames {
            let mosaic_i = unpack(&b.frames[i]);
            let mut t = Tape::<f64>::new();
            let xv = t.constant(mosaic_i.data.clone());
            let fv = t.constant(flows[i].clone());
            let warped = t.warp(xv, fv);
            let w = t.value(warped);
            let (_, h, wd) = w.dims3();
            let mut l1 = 0.0;
            let mut neg = 0.0;
            let mut n = 0usize;
            // negated flow as a sign-error control
            let mut t2 = Tape::<f64>::new();
            let xv2 = t2.constant(mosaic_i.data.clone());
            let fneg = t2.constant(flows[i].scale(-1.0));
            let warped_neg = t2.warp(xv2, fneg);
            let wn = t2.value(warped_neg);
            for y in margin..h - margin {
                for x in margin..wd - margin {
                    l1 += (w.at3(0, y, x) - ref_mosaic.data.at3(0, y, x)).abs();
                    neg += (wn.at3(0, y, x) - ref_mosaic.data.at3(0, y, x)).abs();
                    n += 1;
                }
            }
            let l1 = l1 / n as f64;
            let neg = neg / n as f64;
            assert!(l1 < 2e-2, "frame {i}: interior L1 {l1}");
            assert!(l1 < neg, "frame {i}: correct flow {l1} vs negated {neg}");
        }
    }

    #[test]
    fn naive_demosaic_keeps_known_sites_and_constants() {
        let mut rng = Rng::new(31);
        let m = Tensor::from_vec(&[1, 6, 6], (0..36).map(|_| rng.uniform()).collect());
        let rgb = naive_demosaic(&m);
        for y in 0..6 {
            for x in 0..6 {
                let ch = match (y % 2, x % 2) {
                    (0, 0) => 0,
                    (1, 1) => 2,
                    _ => 1,
                };
                assert_eq!(rgb.at3(ch, y, x), m.at3(0, y, x));
            }
        }
        let flat = naive_demosaic(&Tensor::full(&[1, 4, 4], 0.7f64));
        for &v in flat.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }
}
