//! Training losses and evaluation metrics.
//!
//! L1 and aligned L1 are the training objectives; PSNR and SSIM are the
//! reporting metrics. Everything here is pure f64; the differentiable L1
//! used inside the training loop is built from tape ops in the harness.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// PSNR ceiling reported for identical images (MSE = 0).
pub const PSNR_CAP_DB: f64 = 100.0;

/// Loss breakdown for one training step.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<(String, f64)>,
    pub per_sample: Vec<f64>,
    /// Set when the aligned-L1 aligner failed and plain L1 was used.
    pub aligner_fallback: bool,
}

/// Per-image and aggregate evaluation metrics.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    /// (id, psnr, ssim) per image.
    pub per_image: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(per_image: Vec<(String, f64, f64)>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_psnr = per_image.iter().map(|r| r.1).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|r| r.2).sum::<f64>() / n;
        MetricReport {
            per_image,
            mean_psnr,
            mean_ssim,
        }
    }
}

fn check_dims(sr: &Tensor<f64>, hr: &Tensor<f64>) -> Result<()> {
    if sr.shape() != hr.shape() {
        return Err(Error::dim(format!(
            "shape mismatch {:?} vs {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(sr: &Tensor<f64>, hr: &Tensor<f64>) -> Result<f64> {
    check_dims(sr, hr)?;
    let n = sr.numel() as f64;
    Ok(sr
        .data()
        .iter()
        .zip(hr.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// L1 after warping `hr` toward `sr` with a flow from `aligner(hr, sr)`.
/// Only pixels whose sample position stays inside the image count toward
/// the mean. Returns the loss and whether the aligner failed (in which
/// case plain L1 is reported instead).
pub fn aligned_l1_loss(
    sr: &Tensor<f64>,
    hr: &Tensor<f64>,
    aligner: &dyn Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<(f64, bool)> {
    check_dims(sr, hr)?;
    let (c, h, w) = sr.dims3();
    let flow = match aligner(hr, sr) {
        Ok(f) if f.shape() == [2, h, w] => f,
        _ => return Ok((l1_loss(sr, hr)?, true)),
    };
    let hw = h * w;
    let fd = flow.data();
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = x as f64 + fd[p];
            let py = y as f64 + fd[hw + p];
            if !(0.0..=(w as f64 - 1.0)).contains(&px) || !(0.0..=(h as f64 - 1.0)).contains(&py)
            {
                continue;
            }
            let x0 = px.floor();
            let y0 = py.floor();
            let ax = px - x0;
            let ay = py - y0;
            let x0 = x0 as usize;
            let y0 = y0 as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ci in 0..c {
                let v00 = hr.at3(ci, y0, x0);
                let v01 = hr.at3(ci, y0, x1);
                let v10 = hr.at3(ci, y1, x0);
                let v11 = hr.at3(ci, y1, x1);
                let warped = (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01)
                    + ay * ((1.0 - ax) * v10 + ax * v11);
                acc += (sr.at3(ci, y, x) - warped).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok((l1_loss(sr, hr)?, true));
    }
    Ok((acc / count as f64, false))
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(sr: &Tensor<f64>, hr: &Tensor<f64>, max_val: f64) -> Result<f64> {
    check_dims(sr, hr)?;
    let n = sr.numel() as f64;
    let mse = sr
        .data()
        .iter()
        .zip(hr.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window_1d() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn to_gray(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = x.dims3();
    if c == 1 {
        return x.clone();
    }
    let mut g = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for ci in 0..c {
                acc += x.at3(ci, y, xx);
            }
            g.set3(0, y, xx, acc / c as f64);
        }
    }
    g
}

/// Separable Gaussian filter, 'valid' region only.
fn gauss_valid(x: &Tensor<f64>) -> Tensor<f64> {
    let (_, h, w) = x.dims3();
    let k = gaussian_window_1d();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    // horizontal pass
    let mut tmp = Tensor::zeros(&[1, h, ow]);
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * x.at3(0, y, ox + i);
            }
            tmp.set3(0, y, ox, acc);
        }
    }
    // vertical pass
    let mut out = Tensor::zeros(&[1, oh, ow]);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * tmp.at3(0, oy + j, ox);
            }
            out.set3(0, oy, ox, acc);
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1. Inputs are converted to
/// grayscale by channel mean.
pub fn ssim(sr: &Tensor<f64>, hr: &Tensor<f64>) -> Result<f64> {
    check_dims(sr, hr)?;
    let (_, h, w) = sr.dims3();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let x = to_gray(sr);
    let y = to_gray(hr);
    let xx = x.map(|v| v * v);
    let yy = y.map(|v| v * v);
    let mut xy = x.clone();
    for (v, b) in xy.data_mut().iter_mut().zip(y.data()) {
        *v *= *b;
    }

    let mu_x = gauss_valid(&x);
    let mu_y = gauss_valid(&y);
    let e_xx = gauss_valid(&xx);
    let e_yy = gauss_valid(&yy);
    let e_xy = gauss_valid(&xy);

    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mu_x.numel() as f64;
    let mut acc = 0.0;
    for i in 0..mu_x.numel() {
        let mx = mu_x.data()[i];
        let my = mu_y.data()[i];
        let vx = e_xx.data()[i] - mx * mx;
        let vy = e_yy.data()[i] - my * my;
        let cxy = e_xy.data()[i] - mx * my;
        let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
        acc += s;
    }
    Ok(acc / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn rand_img(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform()).collect())
    }

    #[test]
    fn l1_basics() {
        let a = rand_img(&[3, 4, 4], 1);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((l1_loss(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        // explicit loop oracle
        let c = rand_img(&[3, 4, 4], 2);
        let mut acc = 0.0;
        for i in 0..a.numel() {
            acc += (a.data()[i] - c.data()[i]).abs();
        }
        assert!((l1_loss(&a, &c).unwrap() - acc / a.numel() as f64).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn l1_symmetry_and_triangle(seed in 0u64..500) {
            let a = rand_img(&[2, 3, 3], seed);
            let b = rand_img(&[2, 3, 3], seed.wrapping_add(1000));
            let c = rand_img(&[2, 3, 3], seed.wrapping_add(2000));
            let ab = l1_loss(&a, &b).unwrap();
            let ba = l1_loss(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-15);
            let ac = l1_loss(&a, &c).unwrap();
            let cb = l1_loss(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }
    }

    #[test]
    fn aligned_l1_zero_flow_equals_plain() {
        let sr = rand_img(&[3, 6, 6], 3);
        let hr = rand_img(&[3, 6, 6], 4);
        let zero_aligner = |_: &Tensor<f64>, _: &Tensor<f64>| -> crate::Result<Tensor<f64>> {
            Ok(Tensor::zeros(&[2, 6, 6]))
        };
        let (loss, fb) = aligned_l1_loss(&sr, &hr, &zero_aligner).unwrap();
        assert!(!fb);
        assert!((loss - l1_loss(&sr, &hr).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aligned_l1_with_exact_shift_beats_plain() {
        // hr is sr shifted right by 2: hr(x) = sr(x - 2)
        let sr = rand_img(&[1, 8, 8], 5);
        let mut hr = Tensor::zeros(&[1, 8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                let sx = (x as isize - 2).clamp(0, 7) as usize;
                hr.set3(0, y, x, sr.at3(0, y, sx));
            }
        }
        // oracle aligner: warped(q) = hr(q + 2) == sr(q)
        let shift_aligner = |_: &Tensor<f64>, _: &Tensor<f64>| -> crate::Result<Tensor<f64>> {
            let mut f = Tensor::zeros(&[2, 8, 8]);
            for p in 0..64 {
                f.data_mut()[p] = 2.0;
            }
            Ok(f)
        };
        let (aligned, fb) = aligned_l1_loss(&sr, &hr, &shift_aligner).unwrap();
        assert!(!fb);
        let plain = l1_loss(&sr, &hr).unwrap();
        assert!(aligned < plain, "aligned {aligned} vs plain {plain}");
        assert!(aligned < 1e-12, "shift recovery should be exact: {aligned}");
    }

    #[test]
    fn aligned_l1_masks_out_of_bounds_columns() {
        let sr = rand_img(&[1, 4, 6], 6);
        let hr = rand_img(&[1, 4, 6], 7);
        let shift_aligner = |_: &Tensor<f64>, _: &Tensor<f64>| -> crate::Result<Tensor<f64>> {
            let mut f = Tensor::zeros(&[2, 4, 6]);
            for p in 0..24 {
                f.data_mut()[p] = 2.0;
            }
            Ok(f)
        };
        let (loss, _) = aligned_l1_loss(&sr, &hr, &shift_aligner).unwrap();
        // manual mean over the 4 valid columns only
        let mut acc = 0.0;
        let mut n = 0;
        for y in 0..4 {
            for x in 0..4 {
                acc += (sr.at3(0, y, x) - hr.at3(0, y, x + 2)).abs();
                n += 1;
            }
        }
        assert!((loss - acc / n as f64).abs() < 1e-12);
    }

    #[test]
    fn aligned_l1_falls_back_on_aligner_failure() {
        let sr = rand_img(&[1, 4, 4], 8);
        let hr = rand_img(&[1, 4, 4], 9);
        let broken = |_: &Tensor<f64>, _: &Tensor<f64>| -> crate::Result<Tensor<f64>> {
            Err(Error::dim("aligner exploded".to_string()))
        };
        let (loss, fb) = aligned_l1_loss(&sr, &hr, &broken).unwrap();
        assert!(fb);
        assert!((loss - l1_loss(&sr, &hr).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn psnr_basics() {
        let a = rand_img(&[3, 8, 8], 10);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        // constant offset 0.1 -> MSE 0.01 -> 20 dB
        let b = a.map(|v| v * 0.0);
        let c = b.map(|_| 0.1);
        assert!((psnr(&b, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
        // definition oracle
        let d = rand_img(&[3, 8, 8], 11);
        let mse: f64 = a
            .data()
            .iter()
            .zip(d.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64;
        let oracle = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &d, 1.0).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let mut means = Vec::new();
        for (li, std) in [0.01, 0.02, 0.05].iter().enumerate() {
            let mut acc = 0.0;
            for img_i in 0..20u64 {
                let clean = rand_img(&[3, 16, 16], 100 + img_i);
                let mut rng = Rng::new(7000 + li as u64 * 100 + img_i);
                let noisy = clean.map(|v| (v + std * rng.normal()).clamp(0.0, 1.0));
                acc += psnr(&noisy, &clean, 1.0).unwrap();
            }
            means.push(acc / 20.0);
        }
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
    }

    /// Literal per-window double-loop SSIM oracle.
    fn ssim_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let (_, h, w) = x.dims3();
        let k1d = gaussian_window_1d();
        let mut win = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        for i in 0..SSIM_WINDOW {
            for j in 0..SSIM_WINDOW {
                win[i][j] = k1d[i] * k1d[j];
            }
        }
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut acc = 0.0;
        let mut n = 0;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        mx += win[i][j] * x.at3(0, oy + i, ox + j);
                        my += win[i][j] * y.at3(0, oy + i, ox + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let dx = x.at3(0, oy + i, ox + j);
                        let dy = y.at3(0, oy + i, ox + j);
                        vx += win[i][j] * dx * dx;
                        vy += win[i][j] * dy * dy;
                        cxy += win[i][j] * dx * dy;
                    }
                }
                vx -= mx * mx;
                vy -= my * my;
                cxy -= mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn ssim_basics_and_oracle() {
        let a = rand_img(&[1, 16, 16], 20);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        for seed in 0..3u64 {
            let x = rand_img(&[1, 16, 16], 30 + seed);
            let y = rand_img(&[1, 16, 16], 40 + seed);
            let fast = ssim(&x, &y).unwrap();
            let slow = ssim_oracle(&x, &y);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
        // too-small image errors out
        let tiny = rand_img(&[1, 8, 8], 50);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn ssim_in_range() {
        for seed in 0..5u64 {
            let x = rand_img(&[3, 14, 18], 60 + seed);
            let y = rand_img(&[3, 14, 18], 70 + seed);
            let s = ssim(&x, &y).unwrap();
            assert!((-1.0..=1.0).contains(&s), "{s}");
        }
    }
}
