//! Named parameter storage shared by all trainable modules.
//!
//! Parameters live in one flat, insertion-ordered set; the order is fixed
//! by the model configuration, which makes optimizer state, checkpoints
//! and gradient reductions deterministic. A forward pass binds every
//! tensor onto the tape and resolves names to tape vars through
//! [`BoundParams`].

use std::collections::HashMap;

use crate::autodiff::{Grads, Tape, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name).map(|&i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, t) in self.names.iter().zip(self.tensors.iter()) {
            out.register(name.clone(), t.cast::<U>());
        }
        out
    }
}

/// Parameters bound onto a tape for one forward pass. Names whose prefix
/// appears in `frozen_prefixes` are bound as constants: gradients do not
/// flow into them.
pub struct BoundParams<'a, T: Scalar> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<'a, T: Scalar> BoundParams<'a, T> {
    pub fn bind(tape: &mut Tape<T>, set: &'a ParamSet<T>, frozen_prefixes: &[&str]) -> Self {
        let vars = set
            .names
            .iter()
            .zip(set.tensors.iter())
            .map(|(name, tensor)| {
                if frozen_prefixes.iter().any(|p| name.starts_with(p)) {
                    tape.constant(tensor.clone())
                } else {
                    tape.param(tensor.clone())
                }
            })
            .collect();
        BoundParams { set, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.set.index_of(name) {
            Some(i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn set(&self) -> &ParamSet<T> {
        self.set
    }

    /// Collect gradients in parameter order; zero tensors where a
    /// parameter was frozen or unreached.
    pub fn collect_grads(&self, grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(self.set.tensors.iter())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// He-style normal initialization for a conv weight (c_out, c_in, kh, kw),
/// scaled by `gain`.
pub fn conv_init<T: Scalar>(shape: &[usize], gain: f64, rng: &mut Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.normal() * std)).collect())
}

/// Truncated-normal-like init for attention projection matrices.
pub fn linear_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| T::from_f64((rng.normal() * std).clamp(-2.0 * std, 2.0 * std)))
            .collect(),
    )
}

/// Register a conv layer (weight + bias). `gain` 0 produces a
/// zero-initialized layer.
pub fn register_conv<T: Scalar>(
    ps: &mut ParamSet<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    gain: f64,
    rng: &mut Rng,
) {
    let w = if gain == 0.0 {
        Tensor::zeros(&[c_out, c_in, k, k])
    } else {
        conv_init(&[c_out, c_in, k, k], gain, rng)
    };
    ps.register(format!("{name}.w"), w);
    ps.register(format!("{name}.b"), Tensor::zeros(&[c_out]));
}
