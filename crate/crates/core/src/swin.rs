//! Windowed multi-head self-attention blocks and groups.
//!
//! Features in (c, h, w) layout are rearranged into per-window token
//! blocks by a single gather (reflect padding to window multiples, the
//! cyclic half-window shift, and the window split are all folded into one
//! index map). Attention runs per window with a learned relative position
//! bias; shifted blocks add a mask that removes attention between tokens
//! that were not neighbors before the shift. Blocks are pre-layernorm
//! residual (attention then MLP); groups stack blocks with an alternating
//! shift schedule, a trailing 3x3 convolution and an outer residual.
//! Output projections and trailing convolutions are zero-initialized, so
//! every block and group starts as the identity map.

use std::sync::Arc;

use crate::autodiff::{ConvSpec, GatherMap, Tape, Var};
use crate::params::{linear_init, register_conv, BoundParams, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

/// One attention block: window size `window`, optional half-window shift.
#[derive(Clone, Copy, Debug)]
pub struct StbConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
    pub mlp_ratio: f64,
}

impl StbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.window == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::config("window >= 1 and mlp_ratio > 0".to_string()));
        }
        Ok(())
    }

    fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    fn shift(&self) -> usize {
        if self.shifted {
            self.window / 2
        } else {
            0
        }
    }
}

/// A group of blocks with alternating shift (even index unshifted, odd
/// shifted by half a window) plus a trailing convolution and residual.
#[derive(Clone, Copy, Debug)]
pub struct StgConfig {
    pub blocks: usize,
    pub block: StbConfig,
}

impl StgConfig {
    pub fn block_shifted(idx: usize) -> bool {
        idx % 2 == 1
    }
}

fn reflect101(mut i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn padded(len: usize, m: usize) -> usize {
    len.div_ceil(m) * m
}

/// Gather map folding reflect padding, the cyclic shift, and window
/// partition: (c, h, w) -> (n_windows, m*m, c) token blocks.
pub fn partition_map(c: usize, h: usize, w: usize, m: usize, shift: usize) -> Arc<GatherMap> {
    let (hp, wp) = (padded(h, m), padded(w, m));
    let (nwy, nwx) = (hp / m, wp / m);
    let nw = nwy * nwx;
    let mut idx = vec![0i64; nw * m * m * c];
    for wy in 0..nwy {
        for wx in 0..nwx {
            let wi = wy * nwx + wx;
            for jy in 0..m {
                for jx in 0..m {
                    let gy = (wy * m + jy + shift) % hp;
                    let gx = (wx * m + jx + shift) % wp;
                    let sy = reflect101(gy as isize, h);
                    let sx = reflect101(gx as isize, w);
                    let j = jy * m + jx;
                    for ci in 0..c {
                        idx[(wi * m * m + j) * c + ci] = ((ci * h + sy) * w + sx) as i64;
                    }
                }
            }
        }
    }
    GatherMap::new(vec![nw, m * m, c], idx, c * h * w)
}

/// Inverse of [`partition_map`]: pick each pixel's canonical token slot,
/// undoing the shift and dropping padded duplicates.
pub fn reverse_map(c: usize, h: usize, w: usize, m: usize, shift: usize) -> Arc<GatherMap> {
    let (hp, wp) = (padded(h, m), padded(w, m));
    let nwx = wp / m;
    let mut idx = vec![0i64; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let gy = (y + hp - shift) % hp;
            let gx = (x + wp - shift) % wp;
            let (wy, jy) = (gy / m, gy % m);
            let (wx, jx) = (gx / m, gx % m);
            let wi = wy * nwx + wx;
            let j = jy * m + jx;
            for ci in 0..c {
                idx[(ci * h + y) * w + x] = ((wi * m * m + j) * c + ci) as i64;
            }
        }
    }
    GatherMap::new(vec![c, h, w], idx, (hp / m) * (wp / m) * m * m * c)
}

fn head_split_map(nw: usize, m2: usize, c: usize, heads: usize) -> Arc<GatherMap> {
    let d = c / heads;
    let mut idx = vec![0i64; nw * c * m2];
    for wi in 0..nw {
        for hd in 0..heads {
            for i in 0..m2 {
                for k in 0..d {
                    idx[((wi * heads + hd) * m2 + i) * d + k] =
                        ((wi * m2 + i) * c + hd * d + k) as i64;
                }
            }
        }
    }
    GatherMap::new(vec![nw, heads, m2, d], idx, nw * m2 * c)
}

fn head_merge_map(nw: usize, m2: usize, c: usize, heads: usize) -> Arc<GatherMap> {
    let d = c / heads;
    let mut idx = vec![0i64; nw * m2 * c];
    for wi in 0..nw {
        for i in 0..m2 {
            for hd in 0..heads {
                for k in 0..d {
                    idx[(wi * m2 + i) * c + hd * d + k] =
                        (((wi * heads + hd) * m2 + i) * d + k) as i64;
                }
            }
        }
    }
    GatherMap::new(vec![nw, m2, c], idx, nw * m2 * c)
}

/// Expand the learned relative-position table ((2m-1)^2, heads) to a
/// (1, heads, m^2, m^2) bias indexed by in-window coordinate difference.
fn rel_bias_map(m: usize, heads: usize) -> Arc<GatherMap> {
    let m2 = m * m;
    let span = 2 * m - 1;
    let mut idx = vec![0i64; heads * m2 * m2];
    for hd in 0..heads {
        for i in 0..m2 {
            let (yi, xi) = (i / m, i % m);
            for j in 0..m2 {
                let (yj, xj) = (j / m, j % m);
                let rel = (yi + m - 1 - yj) * span + (xi + m - 1 - xj);
                idx[(hd * m2 + i) * m2 + j] = (rel * heads + hd) as i64;
            }
        }
    }
    GatherMap::new(vec![1, heads, m2, m2], idx, span * span * heads)
}

/// Attention mask for shifted windows on a (hp, wp) padded grid: token
/// pairs from different pre-shift bands must not attend to each other.
pub fn shift_attn_mask<T: Scalar>(hp: usize, wp: usize, m: usize, shift: usize) -> Tensor<T> {
    let band = |u: usize, len: usize| -> usize {
        if u < len - m {
            0
        } else if u < len - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (hp / m, wp / m);
    let nw = nwy * nwx;
    let m2 = m * m;
    let mut labels = vec![0usize; nw * m2];
    for wy in 0..nwy {
        for wx in 0..nwx {
            let wi = wy * nwx + wx;
            for jy in 0..m {
                for jx in 0..m {
                    let gy = wy * m + jy;
                    let gx = wx * m + jx;
                    labels[wi * m2 + jy * m + jx] = band(gy, hp) * 3 + band(gx, wp);
                }
            }
        }
    }
    let mut mask = Tensor::zeros(&[nw, 1, m2, m2]);
    let md = mask.data_mut();
    for wi in 0..nw {
        for i in 0..m2 {
            for j in 0..m2 {
                if labels[wi * m2 + i] != labels[wi * m2 + j] {
                    md[(wi * m2 + i) * m2 + j] = T::from_f64(MASK_NEG);
                }
            }
        }
    }
    mask
}

/// Register one attention block's parameters under `prefix`.
pub fn init_stb_params<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &StbConfig,
    rng: &mut Rng,
) {
    let c = cfg.dim;
    let span = 2 * cfg.window - 1;
    ps.register(format!("{prefix}.ln1.g"), Tensor::full(&[c], T::ONE));
    ps.register(format!("{prefix}.ln1.b"), Tensor::zeros(&[c]));
    for name in ["wq", "wk", "wv"] {
        ps.register(format!("{prefix}.{name}"), linear_init(&[c, c], 0.02, rng));
        ps.register(format!("{prefix}.{name}_b"), Tensor::zeros(&[c]));
    }
    // zero-init output projection: the block starts as the identity
    ps.register(format!("{prefix}.wo"), Tensor::zeros(&[c, c]));
    ps.register(format!("{prefix}.wo_b"), Tensor::zeros(&[c]));
    ps.register(
        format!("{prefix}.rel_bias"),
        Tensor::zeros(&[span * span, cfg.heads]),
    );
    ps.register(format!("{prefix}.ln2.g"), Tensor::full(&[c], T::ONE));
    ps.register(format!("{prefix}.ln2.b"), Tensor::zeros(&[c]));
    let hidden = cfg.mlp_hidden();
    register_conv(ps, &format!("{prefix}.mlp1"), hidden, c, 1, 1.0, rng);
    register_conv(ps, &format!("{prefix}.mlp2"), c, hidden, 1, 0.0, rng);
}

/// Register a group: `blocks` attention blocks plus the trailing conv.
pub fn init_stg_params<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &StgConfig,
    rng: &mut Rng,
) {
    for b in 0..cfg.blocks {
        init_stb_params(ps, &format!("{prefix}.stb{b}"), &cfg.block, rng);
    }
    register_conv(
        ps,
        &format!("{prefix}.conv"),
        cfg.block.dim,
        cfg.block.dim,
        3,
        0.0,
        rng,
    );
}

/// Multi-head self-attention over window token blocks (nw, m^2, c).
/// Returns the output tokens and the post-softmax attention.
pub fn window_msa_t<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    bp: &BoundParams<T>,
    prefix: &str,
    cfg: &StbConfig,
    mask: Option<Var>,
) -> (Var, Var) {
    let (nw, m2, c) = tape.value(tokens).dims3();
    let heads = cfg.heads;
    let d = c / heads;

    let q = {
        let l = tape.linear(
            tokens,
            bp.var(&format!("{prefix}.wq")),
            bp.var(&format!("{prefix}.wq_b")),
        );
        tape.gather(l, head_split_map(nw, m2, c, heads))
    };
    let k = {
        let l = tape.linear(
            tokens,
            bp.var(&format!("{prefix}.wk")),
            bp.var(&format!("{prefix}.wk_b")),
        );
        tape.gather(l, head_split_map(nw, m2, c, heads))
    };
    let v = {
        let l = tape.linear(
            tokens,
            bp.var(&format!("{prefix}.wv")),
            bp.var(&format!("{prefix}.wv_b")),
        );
        tape.gather(l, head_split_map(nw, m2, c, heads))
    };

    let attn = tape.matmul_bt(q, k);
    let attn = tape.scale_var(attn, T::from_f64(1.0 / (d as f64).sqrt()));
    let bias = {
        let table = bp.var(&format!("{prefix}.rel_bias"));
        tape.gather(table, rel_bias_map(cfg.window, heads))
    };
    let attn = tape.broadcast_add(attn, bias);
    let attn = match mask {
        Some(mv) => tape.broadcast_add(attn, mv),
        None => attn,
    };
    let probs = tape.softmax_lastdim(attn);

    let ctx = tape.matmul(probs, v);
    let merged = tape.gather(ctx, head_merge_map(nw, m2, c, heads));
    let out = tape.linear(
        merged,
        bp.var(&format!("{prefix}.wo")),
        bp.var(&format!("{prefix}.wo_b")),
    );
    (out, probs)
}

/// Pre-layernorm residual attention block on a (c, h, w) feature.
pub fn stb_forward_t<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    bp: &BoundParams<T>,
    prefix: &str,
    cfg: &StbConfig,
) -> Var {
    let (c, h, w) = tape.value(x).dims3();
    assert_eq!(c, cfg.dim, "stb channel mismatch");
    let m = cfg.window;
    let shift = cfg.shift();
    let (hp, wp) = (padded(h, m), padded(w, m));

    // attention branch
    let ln1 = tape.layer_norm_chw(
        x,
        bp.var(&format!("{prefix}.ln1.g")),
        bp.var(&format!("{prefix}.ln1.b")),
        T::from_f64(LN_EPS),
    );
    let tokens = tape.gather(ln1, partition_map(c, h, w, m, shift));
    let mask = if shift > 0 {
        Some(tape.constant(shift_attn_mask::<T>(hp, wp, m, shift)))
    } else {
        None
    };
    let (msa, _) = window_msa_t(tape, tokens, bp, prefix, cfg, mask);
    let branch = tape.gather(msa, reverse_map(c, h, w, m, shift));
    let x = tape.add(x, branch);

    // mlp branch (1x1 convolutions keep the chw layout)
    let ln2 = tape.layer_norm_chw(
        x,
        bp.var(&format!("{prefix}.ln2.g")),
        bp.var(&format!("{prefix}.ln2.b")),
        T::from_f64(LN_EPS),
    );
    let spec = ConvSpec::unit(0);
    let h1 = tape.conv2d(
        ln2,
        bp.var(&format!("{prefix}.mlp1.w")),
        bp.var(&format!("{prefix}.mlp1.b")),
        spec,
    );
    let h1 = tape.gelu(h1);
    let h2 = tape.conv2d(
        h1,
        bp.var(&format!("{prefix}.mlp2.w")),
        bp.var(&format!("{prefix}.mlp2.b")),
        spec,
    );
    tape.add(x, h2)
}

/// Group forward: x + Conv3x3(STB_k(...STB_1(x))).
pub fn stg_forward_t<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    bp: &BoundParams<T>,
    prefix: &str,
    cfg: &StgConfig,
) -> Var {
    let mut y = x;
    for b in 0..cfg.blocks {
        let bcfg = StbConfig {
            shifted: StgConfig::block_shifted(b),
            ..cfg.block
        };
        y = stb_forward_t(tape, y, bp, &format!("{prefix}.stb{b}"), &bcfg);
    }
    let conv = tape.conv2d(
        y,
        bp.var(&format!("{prefix}.conv.w")),
        bp.var(&format!("{prefix}.conv.b")),
        ConvSpec::unit(1),
    );
    tape.add(x, conv)
}

/// Standalone block parameters.
pub struct StbParams<T: Scalar> {
    pub set: ParamSet<T>,
    pub cfg: StbConfig,
}

impl<T: Scalar> StbParams<T> {
    pub fn init(cfg: StbConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        init_stb_params(&mut set, "stb", &cfg, rng);
        Ok(StbParams { set, cfg })
    }
}

/// Block forward on a plain tensor.
pub fn stb_forward<T: Scalar>(x: &Tensor<T>, params: &StbParams<T>) -> Result<Tensor<T>> {
    params.cfg.validate()?;
    let mut tape = Tape::<T>::new();
    let xv = tape.constant(x.clone());
    let bp = BoundParams::bind(&mut tape, &params.set, &[]);
    let out = stb_forward_t(&mut tape, xv, &bp, "stb", &params.cfg);
    Ok(tape.value(out).clone())
}

/// Standalone group parameters.
pub struct StgParams<T: Scalar> {
    pub set: ParamSet<T>,
    pub cfg: StgConfig,
}

impl<T: Scalar> StgParams<T> {
    pub fn init(cfg: StgConfig, rng: &mut Rng) -> Result<Self> {
        cfg.block.validate()?;
        if cfg.blocks == 0 {
            return Err(Error::config("group needs at least one block".to_string()));
        }
        let mut set = ParamSet::new();
        init_stg_params(&mut set, "stg", &cfg, rng);
        Ok(StgParams { set, cfg })
    }
}

/// Group forward on a plain tensor.
pub fn stg_forward<T: Scalar>(x: &Tensor<T>, params: &StgParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::<T>::new();
    let xv = tape.constant(x.clone());
    let bp = BoundParams::bind(&mut tape, &params.set, &[]);
    let out = stg_forward_t(&mut tape, xv, &bp, "stg", &params.cfg);
    Ok(tape.value(out).clone())
}

/// Window partition on a plain tensor (unshifted).
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let mut tape = Tape::<T>::new();
    let xv = tape.constant(x.clone());
    let out = tape.gather(xv, partition_map(c, h, w, m, 0));
    tape.value(out).clone()
}

/// Inverse of [`window_partition`] back to (c, h, w).
pub fn window_reverse<T: Scalar>(
    tokens: &Tensor<T>,
    m: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let mut tape = Tape::<T>::new();
    let tv = tape.constant(tokens.clone());
    let out = tape.gather(tv, reverse_map(c, h, w, m, 0));
    tape.value(out).clone()
}
