//! Elementwise operations, reductions, reshapes and concatenation.

use super::{Backward, Tape, Var};
use crate::tensor::{Scalar, Tensor};

struct AddOp;
impl<T: Scalar> Backward<T> for AddOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ]
    }
}

struct SubOp;
impl<T: Scalar> Backward<T> for SubOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.map(|v| -v)),
        ]
    }
}

struct MulOp;
impl<T: Scalar> Backward<T> for MulOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let da = needs[0].then(|| {
            let mut d = grad.clone();
            for (v, b) in d.data_mut().iter_mut().zip(inputs[1].data()) {
                *v *= *b;
            }
            d
        });
        let db = needs[1].then(|| {
            let mut d = grad.clone();
            for (v, a) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                *v *= *a;
            }
            d
        });
        vec![da, db]
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| grad.scale(self.0))]
    }
}

struct AbsOp;
impl<T: Scalar> Backward<T> for AbsOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let mut d = grad.clone();
            for (v, x) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                *v = if *x > T::ZERO {
                    *v
                } else if *x < T::ZERO {
                    -*v
                } else {
                    T::ZERO
                };
            }
            d
        })]
    }
}

struct LeakyReluOp<T>(T);
impl<T: Scalar> Backward<T> for LeakyReluOp<T> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let mut d = grad.clone();
            for (v, x) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                if *x <= T::ZERO {
                    *v *= self.0;
                }
            }
            d
        })]
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

struct GeluOp;
impl<T: Scalar> Backward<T> for GeluOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let c0 = T::from_f64(GELU_C0);
        let c1 = T::from_f64(GELU_C1);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        vec![needs[0].then(|| {
            let mut d = grad.clone();
            for (v, &x) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                let u = c0 * (x + c1 * x * x * x);
                let th = u.tanh();
                let sech2 = T::ONE - th * th;
                let du = c0 * (T::ONE + three * c1 * x * x);
                *v *= half * (T::ONE + th) + half * x * sech2 * du;
            }
            d
        })]
    }
}

struct SigmoidOp;
impl<T: Scalar> Backward<T> for SigmoidOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let mut d = grad.clone();
            for (v, &y) in d.data_mut().iter_mut().zip(out.data()) {
                *v *= y * (T::ONE - y);
            }
            d
        })]
    }
}

/// y = clamp(1 + x, 0, 1). Gradient 1 on -1 <= x <= 0 (the upper clamp is
/// reached exactly at x = 0, where the linear branch is kept active so a
/// zero-initialized modulation head can still learn to attenuate).
struct ClampShift1;
impl<T: Scalar> Backward<T> for ClampShift1 {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let mut d = grad.clone();
            for (v, &x) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                if x > T::ZERO || x < -T::ONE {
                    *v = T::ZERO;
                }
            }
            d
        })]
    }
}

struct ClampSymOp<T>(T);
impl<T: Scalar> Backward<T> for ClampSymOp<T> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let mut d = grad.clone();
            for (v, &x) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                if x.abs() > self.0 {
                    *v = T::ZERO;
                }
            }
            d
        })]
    }
}

struct MeanAllOp;
impl<T: Scalar> Backward<T> for MeanAllOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let n = inputs[0].numel();
        let g = grad.data()[0] / T::from_usize(n);
        vec![needs[0].then(|| Tensor::full(inputs[0].shape(), g))]
    }
}

struct SumAllOp;
impl<T: Scalar> Backward<T> for SumAllOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| Tensor::full(inputs[0].shape(), grad.data()[0]))]
    }
}

struct ReshapeOp {
    from: Vec<usize>,
}
impl<T: Scalar> Backward<T> for ReshapeOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| grad.clone().reshaped(&self.from))]
    }
}

struct ConcatDim0 {
    sizes: Vec<usize>, // elements per input
    part_shapes: Vec<Vec<usize>>,
}
impl<T: Scalar> Backward<T> for ConcatDim0 {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut offset = 0usize;
        let mut result = Vec::with_capacity(self.sizes.len());
        for (i, &sz) in self.sizes.iter().enumerate() {
            if needs[i] {
                let slice = grad.data()[offset..offset + sz].to_vec();
                result.push(Some(Tensor::from_vec(&self.part_shapes[i], slice)));
            } else {
                result.push(None);
            }
            offset += sz;
        }
        result
    }
}

/// Adds `b` onto `a` where each dim of `b` equals the matching dim of `a`
/// or is 1 (broadcast). Backward sums the gradient over broadcast dims.
struct BroadcastAddOp {
    b_shape: Vec<usize>,
}
impl<T: Scalar> Backward<T> for BroadcastAddOp {
    fn backward(
        &self,
        grad: &Tensor<T>,
        _out: &Tensor<T>,
        _inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let da = needs[0].then(|| grad.clone());
        let db = needs[1].then(|| {
            let mut db = Tensor::zeros(&self.b_shape);
            let a_shape = grad.shape().to_vec();
            let n = grad.numel();
            let rank = a_shape.len();
            let mut a_strides = vec![1usize; rank];
            for d in (0..rank.saturating_sub(1)).rev() {
                a_strides[d] = a_strides[d + 1] * a_shape[d + 1];
            }
            let mut b_strides = vec![1usize; rank];
            for d in (0..rank.saturating_sub(1)).rev() {
                b_strides[d] = b_strides[d + 1] * self.b_shape[d + 1];
            }
            let gd = grad.data();
            let bd = db.data_mut();
            for i in 0..n {
                let mut rem = i;
                let mut bi = 0usize;
                for d in 0..rank {
                    let coord = rem / a_strides[d];
                    rem %= a_strides[d];
                    if self.b_shape[d] != 1 {
                        bi += coord * b_strides[d];
                    }
                }
                bd[bi] += gd[i];
            }
            db
        });
        vec![da, db]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign_tensor(self.value(b));
        self.push(out, vec![a, b], Box::new(AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let mut out = self.value(a).clone();
        for (v, w) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *v -= *w;
        }
        self.push(out, vec![a, b], Box::new(SubOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let mut out = self.value(a).clone();
        for (v, w) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= *w;
        }
        self.push(out, vec![a, b], Box::new(MulOp))
    }

    pub fn scale_var(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, vec![a], Box::new(ScaleOp(s)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.abs());
        self.push(out, vec![a], Box::new(AbsOp))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: T) -> Var {
        let out = self
            .value(a)
            .map(|v| if v > T::ZERO { v } else { v * alpha });
        self.push(out, vec![a], Box::new(LeakyReluOp(alpha)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c0 = T::from_f64(GELU_C0);
        let c1 = T::from_f64(GELU_C1);
        let half = T::from_f64(0.5);
        let out = self.value(a).map(|x| {
            let u = c0 * (x + c1 * x * x * x);
            half * x * (T::ONE + u.tanh())
        });
        self.push(out, vec![a], Box::new(GeluOp))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| T::ONE / (T::ONE + (-x).exp()));
        self.push(out, vec![a], Box::new(SigmoidOp))
    }

    /// Modulation nonlinearity: clamp(1 + x, 0, 1). Equals 1 at x = 0.
    pub fn clamp_shift1(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| (T::ONE + x).clamp(T::ZERO, T::ONE));
        self.push(out, vec![a], Box::new(ClampShift1))
    }

    pub fn clamp_sym(&mut self, a: Var, bound: T) -> Var {
        let out = self.value(a).map(|x| x.clamp(-bound, bound));
        self.push(out, vec![a], Box::new(ClampSymOp(bound)))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let out = Tensor::scalar(acc / T::from_usize(n));
        self.push(out, vec![a], Box::new(MeanAllOp))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        self.push(out, vec![a], Box::new(SumAllOp))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let from = self.value(a).shape().to_vec();
        let out = self.value(a).clone().reshaped(shape);
        self.push(out, vec![a], Box::new(ReshapeOp { from }))
    }

    /// Concatenate along dim 0; trailing dims must match.
    pub fn concat_dim0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let mut dim0 = 0usize;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut part_shapes = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.value(p).shape();
            assert_eq!(&sh[1..], tail.as_slice(), "concat trailing dims");
            dim0 += sh[0];
            sizes.push(self.value(p).numel());
            part_shapes.push(sh.to_vec());
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&shape, data);
        self.push(
            out,
            parts.to_vec(),
            Box::new(ConcatDim0 { sizes, part_shapes }),
        )
    }

    /// a + broadcast(b): each dim of b equals a's dim or 1.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Var {
        let a_shape = self.value(a).shape().to_vec();
        let b_shape = self.value(b).shape().to_vec();
        assert_eq!(a_shape.len(), b_shape.len(), "broadcast rank");
        for (da, db) in a_shape.iter().zip(b_shape.iter()) {
            assert!(db == da || *db == 1, "broadcast {:?} vs {:?}", a_shape, b_shape);
        }
        let rank = a_shape.len();
        let mut a_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            a_strides[d] = a_strides[d + 1] * a_shape[d + 1];
        }
        let mut b_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            b_strides[d] = b_strides[d + 1] * b_shape[d + 1];
        }
        let mut out = self.value(a).clone();
        {
            let bd = self.value(b).data();
            let od = out.data_mut();
            for (i, v) in od.iter_mut().enumerate() {
                let mut rem = i;
                let mut bi = 0usize;
                for d in 0..rank {
                    let coord = rem / a_strides[d];
                    rem %= a_strides[d];
                    if b_shape[d] != 1 {
                        bi += coord * b_strides[d];
                    }
                }
                *v += bd[bi];
            }
        }
        self.push(out, vec![a, b], Box::new(BroadcastAddOp { b_shape }))
    }
}

/// Standardize the whole tensor to zero mean, unit variance:
/// y = (x - mean) / sqrt(var + eps).
struct StandardizeOp<T> {
    eps: T,
}

impl<T: Scalar> Backward<T> for StandardizeOp<T> {
    fn backward(
        &self,
        grad: &Tensor<T>,
        out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let x = inputs[0];
            let n = T::from_usize(x.numel());
            let mut mean = T::ZERO;
            for &v in x.data() {
                mean += v;
            }
            mean /= n;
            let mut var = T::ZERO;
            for &v in x.data() {
                let d = v - mean;
                var += d * d;
            }
            var /= n;
            let inv_std = T::ONE / (var + self.eps).sqrt();

            let mut g_mean = T::ZERO;
            let mut gy_mean = T::ZERO;
            for (&g, &y) in grad.data().iter().zip(out.data()) {
                g_mean += g;
                gy_mean += g * y;
            }
            g_mean /= n;
            gy_mean /= n;

            let mut dx = grad.clone();
            for (d, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                *d = inv_std * (*d - g_mean - y * gy_mean);
            }
            dx
        })]
    }
}

impl<T: Scalar> Tape<T> {
    /// Global standardization: subtract the mean and divide by the
    /// standard deviation of the whole tensor.
    pub fn standardize(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.numel());
        let mut mean = T::ZERO;
        for &v in x.data() {
            mean += v;
        }
        mean /= n;
        let mut var = T::ZERO;
        for &v in x.data() {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let inv_std = T::ONE / (var + eps).sqrt();
        let out = x.map(|v| (v - mean) * inv_std);
        self.push(out, vec![a], Box::new(StandardizeOp { eps }))
    }
}
