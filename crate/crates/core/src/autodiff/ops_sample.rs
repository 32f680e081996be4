//! Differentiable resampling: bilinear warping, modulated deformable
//! convolution, average pooling and bilinear upsampling.

use rayon::prelude::*;

use super::ChunkApply;

use super::{Backward, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Bilinear sample with zero contribution outside the domain.
/// Returns (value, d/dx, d/dy).
#[inline]
fn bilinear_zero<T: Scalar>(plane: &[T], h: usize, w: usize, px: T, py: T) -> (T, T, T) {
    let x0f = px.floor();
    let y0f = py.floor();
    let ax = px - x0f;
    let ay = py - y0f;
    let x0 = x0f.to_f64() as isize;
    let y0 = y0f.to_f64() as isize;

    let fetch = |y: isize, x: isize| -> T {
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            plane[y as usize * w + x as usize]
        } else {
            T::ZERO
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1);
    let v10 = fetch(y0 + 1, x0);
    let v11 = fetch(y0 + 1, x0 + 1);

    let one = T::ONE;
    let value = (one - ay) * ((one - ax) * v00 + ax * v01) + ay * ((one - ax) * v10 + ax * v11);
    let dvx = (one - ay) * (v01 - v00) + ay * (v11 - v10);
    let dvy = (one - ax) * (v10 - v00) + ax * (v11 - v01);
    (value, dvx, dvy)
}

/// Scatter `g` into the four corners around (px, py), skipping out-of-bounds.
#[inline]
fn scatter_bilinear<T: Scalar>(plane: &mut [T], h: usize, w: usize, px: T, py: T, g: T) {
    let x0f = px.floor();
    let y0f = py.floor();
    let ax = px - x0f;
    let ay = py - y0f;
    let x0 = x0f.to_f64() as isize;
    let y0 = y0f.to_f64() as isize;
    let one = T::ONE;
    let corners = [
        (y0, x0, (one - ay) * (one - ax)),
        (y0, x0 + 1, (one - ay) * ax),
        (y0 + 1, x0, ay * (one - ax)),
        (y0 + 1, x0 + 1, ay * ax),
    ];
    for (y, x, wt) in corners {
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            plane[y as usize * w + x as usize] += g * wt;
        }
    }
}

struct WarpOp;

impl<T: Scalar> Backward<T> for WarpOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let f = inputs[1];
        let (c, h, w) = x.dims3();
        let hw = h * w;
        let xd = x.data();
        let fd = f.data();
        let gd = grad.data();

        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            dx.data_mut()
                .chunk_apply(hw, |ci, plane| {
                    for y in 0..h {
                        for xx in 0..w {
                            let p = y * w + xx;
                            let px = T::from_usize(xx) + fd[p];
                            let py = T::from_usize(y) + fd[hw + p];
                            scatter_bilinear(plane, h, w, px, py, gd[ci * hw + p]);
                        }
                    }
                });
            dx
        });

        let df = needs[1].then(|| {
            let mut df = Tensor::zeros(f.shape());
            let dfd = df.data_mut();
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let px = T::from_usize(xx) + fd[p];
                    let py = T::from_usize(y) + fd[hw + p];
                    let mut gx = T::ZERO;
                    let mut gy = T::ZERO;
                    for ci in 0..c {
                        let plane = &xd[ci * hw..(ci + 1) * hw];
                        let (_, dvx, dvy) = bilinear_zero(plane, h, w, px, py);
                        let g = gd[ci * hw + p];
                        gx += g * dvx;
                        gy += g * dvy;
                    }
                    dfd[p] = gx;
                    dfd[hw + p] = gy;
                }
            }
            df
        });

        vec![dx, df]
    }
}

struct DeformConvOp {
    groups: usize,
}

const K: usize = 9; // fixed 3x3 deformable kernel

/// Sampled tap matrix S of shape (c_in*9, h*w):
/// S[(ci*9+k), q] = mask[g(ci)*9+k, q] * bilinear(x[ci], q + r_k + off).
fn sample_taps<T: Scalar>(
    x: &Tensor<T>,
    off: &Tensor<T>,
    mask: &Tensor<T>,
    groups: usize,
) -> Vec<T> {
    let (c_in, h, w) = x.dims3();
    let hw = h * w;
    let cpg = c_in / groups;
    let xd = x.data();
    let od = off.data();
    let md = mask.data();
    let mut s = vec![T::ZERO; c_in * K * hw];
    s.chunk_apply(K * hw, |ci, srows| {
        let g = ci / cpg;
        let plane = &xd[ci * hw..(ci + 1) * hw];
        for k in 0..K {
            let (ky, kx) = (k / 3, k % 3);
            let off_x_row = &od[((g * K + k) * 2) * hw..((g * K + k) * 2 + 1) * hw];
            let off_y_row = &od[((g * K + k) * 2 + 1) * hw..((g * K + k) * 2 + 2) * hw];
            let mask_row = &md[(g * K + k) * hw..(g * K + k + 1) * hw];
            let srow = &mut srows[k * hw..(k + 1) * hw];
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let px = T::from_f64(xx as f64 + kx as f64 - 1.0) + off_x_row[p];
                    let py = T::from_f64(y as f64 + ky as f64 - 1.0) + off_y_row[p];
                    let (v, _, _) = bilinear_zero(plane, h, w, px, py);
                    srow[p] = mask_row[p] * v;
                }
            }
        }
    });
    s
}

impl<T: Scalar> Backward<T> for DeformConvOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, off, mask, w) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (c_in, h, wdt) = x.dims3();
        let hw = h * wdt;
        let c_out = w.shape()[0];
        let ck = c_in * K;
        let cpg = c_in / self.groups;
        let xd = x.data();
        let od = off.data();
        let md = mask.data();
        let wd = w.data();
        let gd = grad.data();

        // dS = W^T * g, needed for dx, doff and dmask.
        let need_ds = needs[0] || needs[1] || needs[2];
        let ds = if need_ds {
            let mut ds = vec![T::ZERO; ck * hw];
            ds.chunk_apply(hw, |k, drow| {
                for co in 0..c_out {
                    let wv = wd[co * ck + k];
                    if wv == T::ZERO {
                        continue;
                    }
                    let grow = &gd[co * hw..(co + 1) * hw];
                    for (d, &g) in drow.iter_mut().zip(grow.iter()) {
                        *d += wv * g;
                    }
                }
            });
            ds
        } else {
            Vec::new()
        };

        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            dx.data_mut()
                .chunk_apply(hw, |ci, plane| {
                    let g = ci / cpg;
                    for k in 0..K {
                        let (ky, kx) = (k / 3, k % 3);
                        let off_x_row = &od[((g * K + k) * 2) * hw..((g * K + k) * 2 + 1) * hw];
                        let off_y_row =
                            &od[((g * K + k) * 2 + 1) * hw..((g * K + k) * 2 + 2) * hw];
                        let mask_row = &md[(g * K + k) * hw..(g * K + k + 1) * hw];
                        let dsrow = &ds[(ci * K + k) * hw..(ci * K + k + 1) * hw];
                        for y in 0..h {
                            for xx in 0..wdt {
                                let p = y * wdt + xx;
                                let a = dsrow[p] * mask_row[p];
                                if a == T::ZERO {
                                    continue;
                                }
                                let px = T::from_f64(xx as f64 + kx as f64 - 1.0) + off_x_row[p];
                                let py = T::from_f64(y as f64 + ky as f64 - 1.0) + off_y_row[p];
                                scatter_bilinear(plane, h, wdt, px, py, a);
                            }
                        }
                    }
                });
            dx
        });

        // doff and dmask accumulate over channels of each deformable group;
        // parallelism over taps keeps writes disjoint and ordered.
        let mut doff = needs[1].then(|| Tensor::zeros(off.shape()));
        let mut dmask = needs[2].then(|| Tensor::zeros(mask.shape()));
        if needs[1] || needs[2] {
            let mut doff_data = vec![T::ZERO; off.numel()];
            let mut dmask_data = vec![T::ZERO; mask.numel()];
            let tap_jobs: Vec<(usize, usize)> = (0..self.groups)
                .flat_map(|g| (0..K).map(move |k| (g, k)))
                .collect();
            let results: Vec<(Vec<T>, Vec<T>, Vec<T>)> = tap_jobs
                .par_iter()
                .map(|&(g, k)| {
                    let (ky, kx) = (k / 3, k % 3);
                    let off_x_row = &od[((g * K + k) * 2) * hw..((g * K + k) * 2 + 1) * hw];
                    let off_y_row = &od[((g * K + k) * 2 + 1) * hw..((g * K + k) * 2 + 2) * hw];
                    let mask_row = &md[(g * K + k) * hw..(g * K + k + 1) * hw];
                    let mut dox = vec![T::ZERO; hw];
                    let mut doy = vec![T::ZERO; hw];
                    let mut dm = vec![T::ZERO; hw];
                    for ci in g * cpg..(g + 1) * cpg {
                        let plane = &xd[ci * hw..(ci + 1) * hw];
                        let dsrow = &ds[(ci * K + k) * hw..(ci * K + k + 1) * hw];
                        for y in 0..h {
                            for xx in 0..wdt {
                                let p = y * wdt + xx;
                                let a = dsrow[p];
                                if a == T::ZERO {
                                    continue;
                                }
                                let px = T::from_f64(xx as f64 + kx as f64 - 1.0) + off_x_row[p];
                                let py = T::from_f64(y as f64 + ky as f64 - 1.0) + off_y_row[p];
                                let (v, dvx, dvy) = bilinear_zero(plane, h, wdt, px, py);
                                let am = a * mask_row[p];
                                dox[p] += am * dvx;
                                doy[p] += am * dvy;
                                dm[p] += a * v;
                            }
                        }
                    }
                    (dox, doy, dm)
                })
                .collect();
            for ((g, k), (dox, doy, dm)) in tap_jobs.into_iter().zip(results) {
                doff_data[((g * K + k) * 2) * hw..((g * K + k) * 2 + 1) * hw]
                    .copy_from_slice(&dox);
                doff_data[((g * K + k) * 2 + 1) * hw..((g * K + k) * 2 + 2) * hw]
                    .copy_from_slice(&doy);
                dmask_data[(g * K + k) * hw..(g * K + k + 1) * hw].copy_from_slice(&dm);
            }
            if let Some(t) = doff.as_mut() {
                t.data_mut().copy_from_slice(&doff_data);
            }
            if let Some(t) = dmask.as_mut() {
                t.data_mut().copy_from_slice(&dmask_data);
            }
        }

        let dw = needs[3].then(|| {
            let s = sample_taps(x, off, mask, self.groups);
            let mut dw = Tensor::zeros(w.shape());
            dw.data_mut()
                .chunk_apply(ck, |co, dwrow| {
                    let grow = &gd[co * hw..(co + 1) * hw];
                    for (k, dwv) in dwrow.iter_mut().enumerate() {
                        let srow = &s[k * hw..(k + 1) * hw];
                        let mut acc = T::ZERO;
                        for (&g, &sv) in grow.iter().zip(srow.iter()) {
                            acc += g * sv;
                        }
                        *dwv = acc;
                    }
                });
            dw
        });

        let db = needs[4].then(|| {
            let mut db = Tensor::zeros(&[c_out]);
            for co in 0..c_out {
                let mut acc = T::ZERO;
                for &g in &gd[co * hw..(co + 1) * hw] {
                    acc += g;
                }
                db.data_mut()[co] = acc;
            }
            db
        });

        vec![dx, doff, dmask, dw, db]
    }
}

struct AvgPool2Op;

impl<T: Scalar> Backward<T> for AvgPool2Op {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = inputs[0].dims3();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        vec![needs[0].then(|| {
            let mut dx = Tensor::zeros(&[c, h, w]);
            let gd = grad.data();
            dx.data_mut()
                .chunk_apply(h * w, |ci, plane| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gd[(ci * oh + oy) * ow + ox] * quarter;
                            plane[(2 * oy) * w + 2 * ox] += g;
                            plane[(2 * oy) * w + 2 * ox + 1] += g;
                            plane[(2 * oy + 1) * w + 2 * ox] += g;
                            plane[(2 * oy + 1) * w + 2 * ox + 1] += g;
                        }
                    }
                });
            dx
        })]
    }
}

struct UpsampleBilinearOp;

/// Source coordinate for half-pixel-center bilinear resizing, clamped to
/// the valid range. Returns (i0, i1, frac).
#[inline]
fn resize_coord(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = (out_i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let s = s.clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

impl<T: Scalar> Backward<T> for UpsampleBilinearOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (c, h, w) = inputs[0].dims3();
        let (_, oh, ow) = grad.dims3();
        let gd = grad.data();
        vec![needs[0].then(|| {
            let mut dx = Tensor::zeros(&[c, h, w]);
            dx.data_mut()
                .chunk_apply(h * w, |ci, plane| {
                    for oy in 0..oh {
                        let (y0, y1, fy) = resize_coord(oy, h, oh);
                        let fy = T::from_f64(fy);
                        for ox in 0..ow {
                            let (x0, x1, fx) = resize_coord(ox, w, ow);
                            let fx = T::from_f64(fx);
                            let g = gd[(ci * oh + oy) * ow + ox];
                            let one = T::ONE;
                            plane[y0 * w + x0] += g * (one - fy) * (one - fx);
                            plane[y0 * w + x1] += g * (one - fy) * fx;
                            plane[y1 * w + x0] += g * fy * (one - fx);
                            plane[y1 * w + x1] += g * fy * fx;
                        }
                    }
                });
            dx
        })]
    }
}

impl<T: Scalar> Tape<T> {
    /// Bilinear warp: out(c, p) = x(c, p + f(p)), zero outside the domain.
    /// f is (2, h, w) with f[0] horizontal and f[1] vertical displacement.
    pub fn warp(&mut self, x: Var, f: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (fc, fh, fw) = self.value(f).dims3();
        assert_eq!((fc, fh, fw), (2, h, w), "warp flow dims");
        let hw = h * w;
        let xd = self.value(x).data();
        let fd = self.value(f).data();
        let mut out = vec![T::ZERO; c * hw];
        out.chunk_apply(hw, |ci, plane| {
            let src = &xd[ci * hw..(ci + 1) * hw];
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let px = T::from_usize(xx) + fd[p];
                    let py = T::from_usize(y) + fd[hw + p];
                    let (v, _, _) = bilinear_zero(src, h, w, px, py);
                    plane[p] = v;
                }
            }
        });
        let out = Tensor::from_vec(&[c, h, w], out);
        self.push(out, vec![x, f], Box::new(WarpOp))
    }

    /// Modulated deformable 3x3 convolution (stride 1, zero pad 1).
    /// off is (2*9*groups, h, w) ordered (group, tap, x/y); mask is
    /// (9*groups, h, w) in [0, 1]; w is (c_out, c_in, 3, 3).
    pub fn deform_conv(
        &mut self,
        x: Var,
        off: Var,
        mask: Var,
        w: Var,
        b: Var,
        groups: usize,
    ) -> Var {
        let (c_in, h, wdt) = self.value(x).dims3();
        assert!(c_in % groups == 0, "c_in {c_in} not divisible by groups {groups}");
        let (c_out, wc_in, kh, kw) = self.value(w).dims4();
        assert_eq!((wc_in, kh, kw), (c_in, 3, 3), "deform_conv weight shape");
        assert_eq!(
            self.value(off).shape(),
            &[2 * K * groups, h, wdt],
            "offset shape"
        );
        assert_eq!(
            self.value(mask).shape(),
            &[K * groups, h, wdt],
            "mask shape"
        );
        assert_eq!(self.value(b).shape(), &[c_out]);

        let hw = h * wdt;
        let s = sample_taps(self.value(x), self.value(off), self.value(mask), groups);
        let ck = c_in * K;
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::ZERO; c_out * hw];
        out.chunk_apply(hw, |co, orow| {
            let bv = bd[co];
            for v in orow.iter_mut() {
                *v = bv;
            }
            let wrow = &wd[co * ck..(co + 1) * ck];
            for (k, &wv) in wrow.iter().enumerate() {
                if wv == T::ZERO {
                    continue;
                }
                let srow = &s[k * hw..(k + 1) * hw];
                for (o, &sv) in orow.iter_mut().zip(srow.iter()) {
                    *o += wv * sv;
                }
            }
        });
        let out = Tensor::from_vec(&[c_out, h, wdt], out);
        self.push(
            out,
            vec![x, off, mask, w, b],
            Box::new(DeformConvOp { groups }),
        )
    }

    /// 2x2 average pooling; h and w must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::ZERO; c * oh * ow];
        out.chunk_apply(oh * ow, |ci, plane| {
            let src = &xd[ci * h * w..(ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let s = src[(2 * oy) * w + 2 * ox]
                        + src[(2 * oy) * w + 2 * ox + 1]
                        + src[(2 * oy + 1) * w + 2 * ox]
                        + src[(2 * oy + 1) * w + 2 * ox + 1];
                    plane[oy * ow + ox] = s * quarter;
                }
            }
        });
        let out = Tensor::from_vec(&[c, oh, ow], out);
        self.push(out, vec![x], Box::new(AvgPool2Op))
    }

    /// Bilinear resize with half-pixel centers and clamped borders.
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; c * oh * ow];
        out.chunk_apply(oh * ow, |ci, plane| {
            let src = &xd[ci * h * w..(ci + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, fy) = resize_coord(oy, h, oh);
                let fy = T::from_f64(fy);
                for ox in 0..ow {
                    let (x0, x1, fx) = resize_coord(ox, w, ow);
                    let fx = T::from_f64(fx);
                    let one = T::ONE;
                    let top = (one - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                    let bot = (one - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                    plane[oy * ow + ox] = (one - fy) * top + fy * bot;
                }
            }
        });
        let out = Tensor::from_vec(&[c, oh, ow], out);
        self.push(out, vec![x], Box::new(UpsampleBilinearOp))
    }
}

/// Non-tape bilinear resize used for constant inputs (skip connections,
/// ground-truth flows); identical arithmetic to the tape op.
pub fn upsample_bilinear_tensor<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let xd = x.data();
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        let src = &xd[ci * h * w..(ci + 1) * h * w];
        let plane = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = resize_coord(oy, h, oh);
            let fy = T::from_f64(fy);
            for ox in 0..ow {
                let (x0, x1, fx) = resize_coord(ox, w, ow);
                let fx = T::from_f64(fx);
                let one = T::ONE;
                let top = (one - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (one - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                plane[oy * ow + ox] = (one - fy) * top + fy * bot;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_diff, rel_error};
    use crate::rng::Rng;
    use crate::tensor::max_abs_diff;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect())
    }

    fn weighted_sum(t: &mut Tape<f64>, v: Var) -> Var {
        let w = Tensor::from_vec(
            t.value(v).shape(),
            (0..t.value(v).numel())
                .map(|i| ((i % 5) as f64 - 2.0) * 0.3 + 0.05)
                .collect(),
        );
        let wv = t.constant(w);
        let prod = t.mul(v, wv);
        t.sum_all(prod)
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let mut rng = Rng::new(1);
        let x = rand_tensor(&[3, 6, 5], &mut rng);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone());
        let fv = t.constant(Tensor::zeros(&[2, 6, 5]));
        let out = t.warp(xv, fv);
        assert_eq!(t.value(out), &x);
    }

    #[test]
    fn warp_integer_shift_reads_neighbor() {
        // flow (1, 0): output pixel equals its right neighbor, last column zero.
        let x = Tensor::from_vec(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let mut f = Tensor::zeros(&[2, 2, 3]);
        for i in 0..6 {
            f.data_mut()[i] = 1.0;
        }
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x);
        let fv = t.constant(f);
        let out = t.warp(xv, fv);
        let expect = Tensor::from_vec(&[1, 2, 3], vec![2., 3., 0., 5., 6., 0.]);
        assert!(max_abs_diff(t.value(out), &expect) < 1e-12);
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let x = rand_tensor(&[1, 5, 5], &mut rng);
        // non-integer flow keeps the bilinear kernel away from floor kinks
        let f = Tensor::from_vec(
            &[2, 5, 5],
            (0..50).map(|_| rng.uniform_in(-1.2, 1.2) + 0.3).collect(),
        );
        let run = |x: &Tensor<f64>, f: &Tensor<f64>| -> f64 {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(x.clone());
            let fv = t.constant(f.clone());
            let out = t.warp(xv, fv);
            let loss = weighted_sum(&mut t, out);
            t.value(loss).data()[0]
        };
        let mut t = Tape::<f64>::new();
        let xv = t.param(x.clone());
        let fv = t.param(f.clone());
        let out = t.warp(xv, fv);
        let loss = weighted_sum(&mut t, out);
        let grads = t.backward(loss);

        let fd_x = finite_diff(&x, 1e-4, |p| run(p, &f));
        let fd_f = finite_diff(&f, 1e-4, |p| run(&x, p));
        assert!(rel_error(grads.get(xv).unwrap(), &fd_x) < 1e-3);
        assert!(rel_error(grads.get(fv).unwrap(), &fd_f) < 1e-3);
    }

    #[test]
    fn deform_conv_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let x = rand_tensor(&[1, 6, 6], &mut rng);
        let off = Tensor::from_vec(
            &[18, 6, 6],
            (0..18 * 36).map(|_| rng.uniform_in(-1.0, 1.0) + 0.25).collect(),
        );
        let mask = Tensor::from_vec(
            &[9, 6, 6],
            (0..9 * 36).map(|_| rng.uniform_in(0.1, 0.9)).collect(),
        );
        let w = rand_tensor(&[2, 1, 3, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);

        let run = |x: &Tensor<f64>,
                   off: &Tensor<f64>,
                   mask: &Tensor<f64>,
                   w: &Tensor<f64>,
                   b: &Tensor<f64>|
         -> f64 {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(x.clone());
            let ov = t.constant(off.clone());
            let mv = t.constant(mask.clone());
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let out = t.deform_conv(xv, ov, mv, wv, bv, 1);
            let loss = weighted_sum(&mut t, out);
            t.value(loss).data()[0]
        };

        let mut t = Tape::<f64>::new();
        let xv = t.param(x.clone());
        let ov = t.param(off.clone());
        let mv = t.param(mask.clone());
        let wv = t.param(w.clone());
        let bv = t.param(b.clone());
        let out = t.deform_conv(xv, ov, mv, wv, bv, 1);
        let loss = weighted_sum(&mut t, out);
        let grads = t.backward(loss);

        let cases: Vec<(&str, Var, Tensor<f64>)> = vec![
            ("x", xv, finite_diff(&x, 1e-4, |p| run(p, &off, &mask, &w, &b))),
            ("off", ov, finite_diff(&off, 1e-4, |p| run(&x, p, &mask, &w, &b))),
            ("mask", mv, finite_diff(&mask, 1e-4, |p| run(&x, &off, p, &w, &b))),
            ("w", wv, finite_diff(&w, 1e-4, |p| run(&x, &off, &mask, p, &b))),
            ("b", bv, finite_diff(&b, 1e-4, |p| run(&x, &off, &mask, &w, p))),
        ];
        for (name, var, fd) in cases {
            let err = rel_error(grads.get(var).unwrap(), &fd);
            assert!(err < 1e-3, "{name}: rel err {err}");
        }
    }

    #[test]
    fn deform_conv_grouped_matches_per_group_sampling() {
        // 2 groups: offsets of group 1 must not affect channels of group 0.
        let mut rng = Rng::new(9);
        let x = rand_tensor(&[4, 5, 5], &mut rng);
        let mut off = Tensor::zeros(&[2 * 9 * 2, 5, 5]);
        // group 1 gets a constant shift; group 0 stays at zero
        for k in 0..9 {
            for p in 0..25 {
                off.data_mut()[((9 + k) * 2) * 25 + p] = 1.0;
            }
        }
        let mask = Tensor::full(&[9 * 2, 5, 5], 1.0);
        let w = rand_tensor(&[3, 4, 3, 3], &mut rng);
        let b = Tensor::zeros(&[3]);

        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone());
        let ov = t.constant(off);
        let mv = t.constant(mask.clone());
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let out = t.deform_conv(xv, ov, mv, wv, bv, 2);

        // oracle: group 0 channels sampled at tap positions, group 1 shifted by +1 in x
        let s = sample_taps(&x, t.value(ov), &mask, 2);
        // spot-check one entry per group against manual bilinear math
        let hw = 25;
        // ci=0 (group 0), k=4 (center tap), position (2,2): value = x[0][2][2]
        assert!((s[(0 * 9 + 4) * hw + 2 * 5 + 2] - x.at3(0, 2, 2)).abs() < 1e-12);
        // ci=2 (group 1), k=4, position (2,2): shifted +1 in x -> x[2][2][3]
        assert!((s[(2 * 9 + 4) * hw + 2 * 5 + 2] - x.at3(2, 2, 3)).abs() < 1e-12);
        assert!(t.value(out).all_finite());
    }

    #[test]
    fn avg_pool_and_upsample_gradients() {
        let mut rng = Rng::new(11);
        let x = rand_tensor(&[2, 4, 6], &mut rng);
        let run = |x: &Tensor<f64>| -> f64 {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(x.clone());
            let p = t.avg_pool2(xv);
            let u = t.upsample_bilinear(p, 5, 7);
            let loss = weighted_sum(&mut t, u);
            t.value(loss).data()[0]
        };
        let mut t = Tape::<f64>::new();
        let xv = t.param(x.clone());
        let p = t.avg_pool2(xv);
        let u = t.upsample_bilinear(p, 5, 7);
        let loss = weighted_sum(&mut t, u);
        let grads = t.backward(loss);
        let fd = finite_diff(&x, 1e-5, run);
        assert!(rel_error(grads.get(xv).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::full(&[1, 4, 4], 3.25);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(x);
        let u = t.upsample_bilinear(xv, 8, 8);
        for &v in t.value(u).data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }
}
