//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A forward pass records one node per operation (define-by-run); the
//! backward pass walks the tape in reverse and accumulates gradients
//! into per-node slots. Nodes unreachable from any parameter are skipped.
//!
//! Determinism: every reduction inside an op runs in a fixed sequential
//! order; rayon is only used across independent output rows or channels,
//! so results are bit-identical across runs and thread counts.

mod ops_basic;
mod ops_conv;
mod ops_linalg;
mod ops_sample;

pub mod gradcheck;

/// Apply `f` to fixed-size chunks, in parallel only when the total work
/// is large enough to amortize the thread hand-off. Chunks are
/// independent either way, so results do not depend on the path taken.
pub(crate) trait ChunkApply<T: Send> {
    fn chunk_apply<F>(&mut self, chunk: usize, f: F)
    where
        F: Fn(usize, &mut [T]) + Sync + Send;
}

impl<T: Send> ChunkApply<T> for [T] {
    fn chunk_apply<F>(&mut self, chunk: usize, f: F)
    where
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        use rayon::prelude::*;
        const PAR_THRESHOLD: usize = 1 << 15;
        if self.len() >= PAR_THRESHOLD && self.len() > chunk {
            self.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        } else {
            for (i, c) in self.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
    }
}

pub use ops_conv::ConvSpec;
pub use ops_linalg::GatherMap;
pub use ops_sample::upsample_bilinear_tensor;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) trait Backward<T: Scalar>: Send + Sync {
    /// Gradient contributions for each parent, given the output gradient.
    /// Entries may be `None` when `needs[i]` is false.
    fn backward(
        &self,
        grad: &Tensor<T>,
        out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Leaf that does not require gradients (inputs, masks, lookup maps).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that accumulates gradients (a learnable parameter).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        op: Box<dyn Backward<T>>,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            op: Some(op),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Run the backward pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].needs_grad)
                    .collect();
                let contribs = op.backward(&g, &node.value, &inputs, &needs);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (p, contrib) in node.parents.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        match &mut grads[p.0] {
                            Some(acc) => acc.add_assign_tensor(&c),
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads { g: grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    g: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}
