//! Zero-padded 2-d convolution via im2col and a small GEMM.

use super::ChunkApply;

use super::{Backward, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn unit(pad: usize) -> Self {
        ConvSpec { stride: 1, pad }
    }
}

fn out_dim(input: usize, k: usize, spec: ConvSpec) -> usize {
    (input + 2 * spec.pad - k) / spec.stride + 1
}

/// col has shape (c_in*kh*kw, oh*ow), rows in (ci, ky, kx) order.
fn im2col<T: Scalar>(x: &Tensor<T>, kh: usize, kw: usize, spec: ConvSpec) -> Vec<T> {
    let (c_in, h, w) = x.dims3();
    let oh = out_dim(h, kh, spec);
    let ow = out_dim(w, kw, spec);
    let q = oh * ow;
    let mut col = vec![T::ZERO; c_in * kh * kw * q];
    let xd = x.data();
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * q;
                for oy in 0..oh {
                    let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + sy as usize) * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if sx >= 0 && sx < w as isize {
                            col[dst_row + ox] = xd[src_row + sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter col-space gradients back to input space. Each input channel is
/// written by exactly one task, keeping the accumulation order fixed.
fn col2im<T: Scalar>(
    dcol: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> Tensor<T> {
    let oh = out_dim(h, kh, spec);
    let ow = out_dim(w, kw, spec);
    let q = oh * ow;
    let mut dx = Tensor::zeros(&[c_in, h, w]);
    let plane = h * w;
    dx.data_mut()
        .chunk_apply(plane, |ci, dxp| {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((ci * kh + ky) * kw + kx) * q;
                    for oy in 0..oh {
                        let sy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = row + oy * ow;
                        let dst_row = sy as usize * w;
                        for ox in 0..ow {
                            let sx = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if sx >= 0 && sx < w as isize {
                                dxp[dst_row + sx as usize] += dcol[src_row + ox];
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// out[co, :] = sum_ck w[co, ck] * col[ck, :] + b[co]
fn gemm_conv<T: Scalar>(
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    col: &[T],
    ck: usize,
    q: usize,
) -> Vec<T> {
    let c_out = w.shape()[0];
    let wd = w.data();
    let mut out = vec![T::ZERO; c_out * q];
    out.chunk_apply(q, |co, orow| {
        if let Some(bias) = b {
            let bv = bias.data()[co];
            for v in orow.iter_mut() {
                *v = bv;
            }
        }
        let wrow = &wd[co * ck..(co + 1) * ck];
        for (k, &wv) in wrow.iter().enumerate() {
            if wv == T::ZERO {
                continue;
            }
            let crow = &col[k * q..(k + 1) * q];
            for (o, &c) in orow.iter_mut().zip(crow.iter()) {
                *o += wv * c;
            }
        }
    });
    out
}

struct Conv2dOp {
    spec: ConvSpec,
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let w = inputs[1];
        let (c_in, h, wdt) = x.dims3();
        let (c_out, _, kh, kw) = w.dims4();
        let ck = c_in * kh * kw;
        let (_, oh, ow) = grad.dims3();
        let q = oh * ow;
        let gd = grad.data();
        let wd = w.data();

        let need_col = needs[1];
        let col = if need_col {
            im2col(x, kh, kw, self.spec)
        } else {
            Vec::new()
        };

        let dx = needs[0].then(|| {
            // dcol[ck_, :] = sum_co w[co, ck_] * g[co, :]
            let mut dcol = vec![T::ZERO; ck * q];
            dcol.chunk_apply(q, |k, drow| {
                for co in 0..c_out {
                    let wv = wd[co * ck + k];
                    if wv == T::ZERO {
                        continue;
                    }
                    let grow = &gd[co * q..(co + 1) * q];
                    for (d, &g) in drow.iter_mut().zip(grow.iter()) {
                        *d += wv * g;
                    }
                }
            });
            col2im(&dcol, c_in, h, wdt, kh, kw, self.spec)
        });

        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            dw.data_mut()
                .chunk_apply(ck, |co, dwrow| {
                    let grow = &gd[co * q..(co + 1) * q];
                    for (k, dwv) in dwrow.iter_mut().enumerate() {
                        let crow = &col[k * q..(k + 1) * q];
                        let mut acc = T::ZERO;
                        for (&g, &c) in grow.iter().zip(crow.iter()) {
                            acc += g * c;
                        }
                        *dwv = acc;
                    }
                });
            dw
        });

        let db = needs[2].then(|| {
            let mut db = Tensor::zeros(&[c_out]);
            for co in 0..c_out {
                let mut acc = T::ZERO;
                for &g in &gd[co * q..(co + 1) * q] {
                    acc += g;
                }
                db.data_mut()[co] = acc;
            }
            db
        });

        vec![dx, dw, db]
    }
}

impl<T: Scalar> Tape<T> {
    /// 2-d convolution: x (c_in, h, w), w (c_out, c_in, kh, kw), b (c_out).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let (c_in, h, wdt) = self.value(x).dims3();
        let (c_out, wc_in, kh, kw) = self.value(w).dims4();
        assert_eq!(c_in, wc_in, "conv2d channel mismatch");
        assert_eq!(self.value(b).shape(), &[c_out], "conv2d bias shape");
        let oh = out_dim(h, kh, spec);
        let ow = out_dim(wdt, kw, spec);
        let q = oh * ow;
        let col = im2col(self.value(x), kh, kw, spec);
        let out = gemm_conv(
            self.value(w),
            Some(self.value(b)),
            &col,
            c_in * kh * kw,
            q,
        );
        let out = Tensor::from_vec(&[c_out, oh, ow], out);
        self.push(out, vec![x, w, b], Box::new(Conv2dOp { spec }))
    }
}
