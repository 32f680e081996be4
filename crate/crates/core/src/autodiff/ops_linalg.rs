//! Linear maps, batched matrix products, softmax, layernorm and gather.

use std::sync::Arc;

use super::ChunkApply;

use super::{Backward, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Index map for pure data-movement ops (window partition and reverse,
/// cyclic shift, reflect padding, pixel shuffle, head split/merge).
/// `idx[i]` is the flat source index of output element `i`, or -1 for a
/// zero fill. Backward scatter-adds through the same map.
pub struct GatherMap {
    pub out_shape: Vec<usize>,
    pub idx: Vec<i64>,
    pub in_numel: usize,
}

impl GatherMap {
    pub fn new(out_shape: Vec<usize>, idx: Vec<i64>, in_numel: usize) -> Arc<Self> {
        assert_eq!(out_shape.iter().product::<usize>(), idx.len());
        Arc::new(GatherMap {
            out_shape,
            idx,
            in_numel,
        })
    }
}

struct GatherOp {
    map: Arc<GatherMap>,
    in_shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for GatherOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let mut dx = Tensor::zeros(&self.in_shape);
            let d = dx.data_mut();
            for (g, &src) in grad.data().iter().zip(self.map.idx.iter()) {
                if src >= 0 {
                    d[src as usize] += *g;
                }
            }
            dx
        })]
    }
}

struct LinearOp;

impl<T: Scalar> Backward<T> for LinearOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let w = inputs[1];
        let (c_in, c_out) = w.dims2();
        let rows = x.numel() / c_in;
        let xd = x.data();
        let wd = w.data();
        let gd = grad.data();

        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            dx.data_mut()
                .chunk_apply(c_in, |r, drow| {
                    let grow = &gd[r * c_out..(r + 1) * c_out];
                    for (ci, dv) in drow.iter_mut().enumerate() {
                        let wrow = &wd[ci * c_out..(ci + 1) * c_out];
                        let mut acc = T::ZERO;
                        for (&g, &wv) in grow.iter().zip(wrow.iter()) {
                            acc += g * wv;
                        }
                        *dv = acc;
                    }
                });
            dx
        });

        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            let dwd = dw.data_mut();
            for r in 0..rows {
                let xrow = &xd[r * c_in..(r + 1) * c_in];
                let grow = &gd[r * c_out..(r + 1) * c_out];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == T::ZERO {
                        continue;
                    }
                    let drow = &mut dwd[ci * c_out..(ci + 1) * c_out];
                    for (d, &g) in drow.iter_mut().zip(grow.iter()) {
                        *d += xv * g;
                    }
                }
            }
            dw
        });

        let db = needs[2].then(|| {
            let mut db = Tensor::zeros(&[c_out]);
            let dbd = db.data_mut();
            for r in 0..rows {
                let grow = &gd[r * c_out..(r + 1) * c_out];
                for (d, &g) in dbd.iter_mut().zip(grow.iter()) {
                    *d += g;
                }
            }
            db
        });

        vec![dx, dw, db]
    }
}

/// Batched a @ b with batch = leading dims: (..., m, k) x (..., k, n).
struct MatmulOp;

impl<T: Scalar> Backward<T> for MatmulOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let a = inputs[0];
        let b = inputs[1];
        let ra = a.shape().len();
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let n = b.shape()[b.shape().len() - 1];
        let ad = a.data();
        let bd = b.data();
        let gd = grad.data();

        // da[i, kk] = sum_j g[i, j] * b[kk, j]
        let da = needs[0].then(|| {
            let mut da = Tensor::zeros(a.shape());
            da.data_mut()
                .chunk_apply(m * k, |bt, dap| {
                    let gp = &gd[bt * m * n..(bt + 1) * m * n];
                    let bp = &bd[bt * k * n..(bt + 1) * k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let brow = &bp[kk * n..(kk + 1) * n];
                            let grow = &gp[i * n..(i + 1) * n];
                            let mut acc = T::ZERO;
                            for (&g, &bv) in grow.iter().zip(brow.iter()) {
                                acc += g * bv;
                            }
                            dap[i * k + kk] = acc;
                        }
                    }
                });
            da
        });

        // db[kk, j] += a[i, kk] * g[i, j]
        let db = needs[1].then(|| {
            let mut db = Tensor::zeros(b.shape());
            db.data_mut()
                .chunk_apply(k * n, |bt, dbp| {
                    let ap = &ad[bt * m * k..(bt + 1) * m * k];
                    let gp = &gd[bt * m * n..(bt + 1) * m * n];
                    for i in 0..m {
                        let grow = &gp[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ap[i * k + kk];
                            if av == T::ZERO {
                                continue;
                            }
                            let drow = &mut dbp[kk * n..(kk + 1) * n];
                            for (d, &g) in drow.iter_mut().zip(grow.iter()) {
                                *d += av * g;
                            }
                        }
                    }
                });
            db
        });

        vec![da, db]
    }
}

/// Batched a @ b^T: (..., m, k) x (..., n, k) -> (..., m, n).
struct MatmulBtOp;

impl<T: Scalar> Backward<T> for MatmulBtOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let a = inputs[0];
        let b = inputs[1];
        let ra = a.shape().len();
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let n = b.shape()[b.shape().len() - 2];
        let ad = a.data();
        let bd = b.data();
        let gd = grad.data();

        // da[i, :] += g[i, j] * b[j, :]
        let da = needs[0].then(|| {
            let mut da = Tensor::zeros(a.shape());
            da.data_mut()
                .chunk_apply(m * k, |bt, dap| {
                    let gp = &gd[bt * m * n..(bt + 1) * m * n];
                    let bp = &bd[bt * n * k..(bt + 1) * n * k];
                    for i in 0..m {
                        let drow = &mut dap[i * k..(i + 1) * k];
                        for j in 0..n {
                            let g = gp[i * n + j];
                            if g == T::ZERO {
                                continue;
                            }
                            let brow = &bp[j * k..(j + 1) * k];
                            for (d, &bv) in drow.iter_mut().zip(brow.iter()) {
                                *d += g * bv;
                            }
                        }
                    }
                });
            da
        });

        // db[j, :] += g[i, j] * a[i, :]
        let db = needs[1].then(|| {
            let mut db = Tensor::zeros(b.shape());
            db.data_mut()
                .chunk_apply(n * k, |bt, dbp| {
                    let gp = &gd[bt * m * n..(bt + 1) * m * n];
                    let ap = &ad[bt * m * k..(bt + 1) * m * k];
                    for i in 0..m {
                        let arow = &ap[i * k..(i + 1) * k];
                        for j in 0..n {
                            let g = gp[i * n + j];
                            if g == T::ZERO {
                                continue;
                            }
                            let drow = &mut dbp[j * k..(j + 1) * k];
                            for (d, &av) in drow.iter_mut().zip(arow.iter()) {
                                *d += g * av;
                            }
                        }
                    }
                });
            db
        });

        vec![da, db]
    }
}

struct SoftmaxOp {
    n: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let mut dx = Tensor::zeros(out.shape());
            let n = self.n;
            let od = out.data();
            let gd = grad.data();
            dx.data_mut()
                .chunk_apply(n, |r, drow| {
                    let y = &od[r * n..(r + 1) * n];
                    let g = &gd[r * n..(r + 1) * n];
                    let mut dot = T::ZERO;
                    for (&yv, &gv) in y.iter().zip(g.iter()) {
                        dot += yv * gv;
                    }
                    for i in 0..n {
                        drow[i] = y[i] * (g[i] - dot);
                    }
                });
            dx
        })]
    }
}

/// Layer norm over the channel dim of a (c, h, w) tensor, one statistic per
/// spatial position.
struct LayerNormChwOp<T> {
    eps: T,
}

impl<T: Scalar> Backward<T> for LayerNormChwOp<T> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let gamma = inputs[1];
        let (c, h, w) = x.dims3();
        let hw = h * w;
        let xd = x.data();
        let gad = gamma.data();
        let gd = grad.data();
        let cn = T::from_usize(c);

        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dgamma = needs[1].then(|| Tensor::zeros(&[c]));
        let mut dbeta = needs[2].then(|| Tensor::zeros(&[c]));

        for p in 0..hw {
            let mut mean = T::ZERO;
            for ci in 0..c {
                mean += xd[ci * hw + p];
            }
            mean /= cn;
            let mut var = T::ZERO;
            for ci in 0..c {
                let d = xd[ci * hw + p] - mean;
                var += d * d;
            }
            var /= cn;
            let inv_std = T::ONE / (var + self.eps).sqrt();

            // hatg = g * gamma; two reductions shared by all channels
            let mut sum_hg = T::ZERO;
            let mut sum_hg_xhat = T::ZERO;
            for ci in 0..c {
                let xhat = (xd[ci * hw + p] - mean) * inv_std;
                let hg = gd[ci * hw + p] * gad[ci];
                sum_hg += hg;
                sum_hg_xhat += hg * xhat;
            }
            let m_hg = sum_hg / cn;
            let m_hg_xhat = sum_hg_xhat / cn;

            for ci in 0..c {
                let xhat = (xd[ci * hw + p] - mean) * inv_std;
                let g = gd[ci * hw + p];
                if let Some(dx) = dx.as_mut() {
                    let hg = g * gad[ci];
                    dx.data_mut()[ci * hw + p] = inv_std * (hg - m_hg - xhat * m_hg_xhat);
                }
                if let Some(dg) = dgamma.as_mut() {
                    dg.data_mut()[ci] += g * xhat;
                }
                if let Some(db) = dbeta.as_mut() {
                    db.data_mut()[ci] += g;
                }
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

impl<T: Scalar> Tape<T> {
    /// Pure data movement through a precomputed index map.
    pub fn gather(&mut self, x: Var, map: Arc<GatherMap>) -> Var {
        assert_eq!(self.value(x).numel(), map.in_numel, "gather input size");
        let xd = self.value(x).data();
        let data: Vec<T> = map
            .idx
            .iter()
            .map(|&i| if i >= 0 { xd[i as usize] } else { T::ZERO })
            .collect();
        let out = Tensor::from_vec(&map.out_shape, data);
        let in_shape = self.value(x).shape().to_vec();
        self.push(out, vec![x], Box::new(GatherOp { map, in_shape }))
    }

    /// x (..., c_in) @ w (c_in, c_out) + b (c_out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (c_in, c_out) = self.value(w).dims2();
        let x_shape = self.value(x).shape().to_vec();
        assert_eq!(*x_shape.last().unwrap(), c_in, "linear input channels");
        let rows = self.value(x).numel() / c_in;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::ZERO; rows * c_out];
        out.chunk_apply(c_out, |r, orow| {
            orow.copy_from_slice(bd);
            let xrow = &xd[r * c_in..(r + 1) * c_in];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == T::ZERO {
                    continue;
                }
                let wrow = &wd[ci * c_out..(ci + 1) * c_out];
                for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                    *o += xv * wv;
                }
            }
        });
        let mut out_shape = x_shape;
        *out_shape.last_mut().unwrap() = c_out;
        let out = Tensor::from_vec(&out_shape, out);
        self.push(out, vec![x, w, b], Box::new(LinearOp))
    }

    /// Batched (..., m, k) @ (..., k, n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        let ra = ash.len();
        assert!(ra >= 2 && bsh.len() == ra);
        assert_eq!(&ash[..ra - 2], &bsh[..ra - 2], "matmul batch dims");
        let (m, k) = (ash[ra - 2], ash[ra - 1]);
        assert_eq!(bsh[ra - 2], k, "matmul inner dim");
        let n = bsh[ra - 1];
        let batch: usize = ash[..ra - 2].iter().product();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::ZERO; batch * m * n];
        out.chunk_apply(m * n, |bt, op| {
            let ap = &ad[bt * m * k..(bt + 1) * m * k];
            let bp = &bd[bt * k * n..(bt + 1) * k * n];
            for i in 0..m {
                let orow = &mut op[i * n..(i + 1) * n];
                for kk in 0..k {
                    let av = ap[i * k + kk];
                    if av == T::ZERO {
                        continue;
                    }
                    let brow = &bp[kk * n..(kk + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += av * bv;
                    }
                }
            }
        });
        let mut out_shape = ash.clone();
        out_shape[ra - 1] = n;
        let out = Tensor::from_vec(&out_shape, out);
        self.push(out, vec![a, b], Box::new(MatmulOp))
    }

    /// Batched (..., m, k) @ (..., n, k)^T -> (..., m, n).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        let ra = ash.len();
        assert!(ra >= 2 && bsh.len() == ra);
        assert_eq!(&ash[..ra - 2], &bsh[..ra - 2], "matmul_bt batch dims");
        let (m, k) = (ash[ra - 2], ash[ra - 1]);
        assert_eq!(bsh[ra - 1], k, "matmul_bt inner dim");
        let n = bsh[ra - 2];
        let batch: usize = ash[..ra - 2].iter().product();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::ZERO; batch * m * n];
        out.chunk_apply(m * n, |bt, op| {
            let ap = &ad[bt * m * k..(bt + 1) * m * k];
            let bp = &bd[bt * n * k..(bt + 1) * n * k];
            for i in 0..m {
                let arow = &ap[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bp[j * k..(j + 1) * k];
                    let mut acc = T::ZERO;
                    for (&av, &bv) in arow.iter().zip(brow.iter()) {
                        acc += av * bv;
                    }
                    op[i * n + j] = acc;
                }
            }
        });
        let mut out_shape = ash.clone();
        out_shape[ra - 1] = n;
        let out = Tensor::from_vec(&out_shape, out);
        self.push(out, vec![a, b], Box::new(MatmulBtOp))
    }

    /// Numerically stable softmax over the last dim.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().expect("softmax needs rank >= 1");
        let rows = self.value(x).numel() / n;
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; rows * n];
        out.chunk_apply(n, |r, orow| {
            let xrow = &xd[r * n..(r + 1) * n];
            let mut m = xrow[0];
            for &v in xrow.iter() {
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::ZERO;
            for (o, &v) in orow.iter_mut().zip(xrow.iter()) {
                let e = (v - m).exp();
                *o = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        });
        let out = Tensor::from_vec(&shape, out);
        self.push(out, vec![x], Box::new(SoftmaxOp { n }))
    }

    /// Layer norm over channels of a (c, h, w) tensor; gamma, beta are (c).
    pub fn layer_norm_chw(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let hw = h * w;
        let xd = self.value(x).data();
        let gad = self.value(gamma).data();
        let bed = self.value(beta).data();
        let cn = T::from_usize(c);
        let mut out = vec![T::ZERO; c * hw];
        for p in 0..hw {
            let mut mean = T::ZERO;
            for ci in 0..c {
                mean += xd[ci * hw + p];
            }
            mean /= cn;
            let mut var = T::ZERO;
            for ci in 0..c {
                let d = xd[ci * hw + p] - mean;
                var += d * d;
            }
            var /= cn;
            let inv_std = T::ONE / (var + eps).sqrt();
            for ci in 0..c {
                let xhat = (xd[ci * hw + p] - mean) * inv_std;
                out[ci * hw + p] = xhat * gad[ci] + bed[ci];
            }
        }
        let out = Tensor::from_vec(&[c, h, w], out);
        self.push(out, vec![x, gamma, beta], Box::new(LayerNormChwOp { eps }))
    }
}
