//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic  b"BSRTCKP1"
//!   dtype  u8 (0 = f32, 1 = f64)
//!   config u32 length + TOML bytes (config echo)
//!   params u32 count, then per parameter:
//!            u16 name length + name bytes
//!            u8 ndim + u32 dims...
//!            raw little-endian float data
//!   state  u8 present flag; when 1: step u64, epoch u64, lr f64,
//!          adam_t u64, first/second moment arrays (same shapes as the
//!          parameters, no names), rng state 4 x u64, best_psnr f64
//!
//! Standard checkpoints store 32-bit floats; double-precision training
//! flags dtype = 1 and stores 64-bit so that save/load/resume reproduces
//! subsequent steps bit-exactly.

use std::io::Read;
use std::path::Path;

use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"BSRTCKP1";

#[derive(Clone)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub adam_t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub rng_state: [u64; 4],
    pub best_psnr: f64,
}

pub struct Checkpoint<T: Scalar> {
    pub config_toml: String,
    pub params: ParamSet<T>,
    pub state: Option<TrainState<T>>,
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.push_le_bytes(out);
    }
}

fn read_exact<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::parse(format!("checkpoint truncated reading {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn read_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(
        read_exact(buf, 4, what)?.try_into().unwrap(),
    ))
}

fn read_u64(buf: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(
        read_exact(buf, 8, what)?.try_into().unwrap(),
    ))
}

fn read_tensor<T: Scalar>(buf: &mut &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let bytes = read_exact(buf, n * T::BYTES, "tensor data")?;
    let data = bytes
        .chunks_exact(T::BYTES)
        .map(|c| T::from_le_slice(c))
        .collect();
    Ok(Tensor::from_vec(shape, data))
}

pub fn save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE);
    let cfg = ckpt.config_toml.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);

    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for i in 0..ckpt.params.len() {
        let name = ckpt.params.names()[i].as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let t = ckpt.params.tensor(i);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_tensor(&mut out, t);
    }

    match &ckpt.state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.step.to_le_bytes());
            out.extend_from_slice(&s.epoch.to_le_bytes());
            out.extend_from_slice(&s.lr.to_le_bytes());
            out.extend_from_slice(&s.adam_t.to_le_bytes());
            for t in s.m.iter().chain(s.v.iter()) {
                push_tensor(&mut out, t);
            }
            for w in s.rng_state {
                out.extend_from_slice(&w.to_le_bytes());
            }
            out.extend_from_slice(&s.best_psnr.to_le_bytes());
        }
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// The dtype tag of a checkpoint without loading it.
pub fn peek_dtype(path: &Path) -> Result<u8> {
    let mut file = std::fs::File::open(path)?;
    let mut head = [0u8; 9];
    file.read_exact(&mut head)
        .map_err(|_| Error::parse(format!("{}: not a checkpoint", path.display())))?;
    if &head[..8] != MAGIC {
        return Err(Error::parse(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    Ok(head[8])
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)?;
    let mut buf = bytes.as_slice();
    let magic = read_exact(&mut buf, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    let dtype = read_exact(&mut buf, 1, "dtype")?[0];
    if dtype != T::DTYPE {
        return Err(Error::parse(format!(
            "{}: dtype {} does not match the requested precision",
            path.display(),
            dtype
        )));
    }
    let cfg_len = read_u32(&mut buf, "config length")? as usize;
    let config_toml = String::from_utf8(read_exact(&mut buf, cfg_len, "config")?.to_vec())
        .map_err(|_| Error::parse("checkpoint config is not utf-8".to_string()))?;

    let count = read_u32(&mut buf, "param count")? as usize;
    let mut params = ParamSet::new();
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(read_exact(&mut buf, 2, "name length")?.try_into().unwrap())
                as usize;
        let name = String::from_utf8(read_exact(&mut buf, name_len, "name")?.to_vec())
            .map_err(|_| Error::parse("parameter name is not utf-8".to_string()))?;
        let ndim = read_exact(&mut buf, 1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut buf, "dim")? as usize);
        }
        let tensor = read_tensor::<T>(&mut buf, &shape)?;
        shapes.push(shape);
        params.register(name, tensor);
    }

    let present = read_exact(&mut buf, 1, "state flag")?[0];
    let state = if present == 1 {
        let step = read_u64(&mut buf, "step")?;
        let epoch = read_u64(&mut buf, "epoch")?;
        let lr = f64::from_bits(read_u64(&mut buf, "lr")?);
        let adam_t = read_u64(&mut buf, "adam_t")?;
        let mut m = Vec::with_capacity(count);
        for shape in &shapes {
            m.push(read_tensor::<T>(&mut buf, shape)?);
        }
        let mut v = Vec::with_capacity(count);
        for shape in &shapes {
            v.push(read_tensor::<T>(&mut buf, shape)?);
        }
        let mut rng_state = [0u64; 4];
        for w in rng_state.iter_mut() {
            *w = read_u64(&mut buf, "rng state")?;
        }
        let best_psnr = f64::from_bits(read_u64(&mut buf, "best psnr")?);
        Some(TrainState {
            step,
            epoch,
            lr,
            adam_t,
            m,
            v,
            rng_state,
            best_psnr,
        })
    } else {
        None
    };

    Ok(Checkpoint {
        config_toml,
        params,
        state,
    })
}

/// Check loaded parameters against a freshly built model's layout;
/// returns an error listing every differing key.
pub fn check_compatible<T: Scalar>(loaded: &ParamSet<T>, expected: &ParamSet<T>) -> Result<()> {
    let mut diffs = Vec::new();
    for (i, name) in expected.names().iter().enumerate() {
        match loaded.get(name) {
            None => diffs.push(format!("missing {name}")),
            Some(t) if t.shape() != expected.tensor(i).shape() => diffs.push(format!(
                "{name}: shape {:?} vs expected {:?}",
                t.shape(),
                expected.tensor(i).shape()
            )),
            _ => {}
        }
    }
    for name in loaded.names() {
        if expected.index_of(name).is_none() {
            diffs.push(format!("unexpected {name}"));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckpointMismatch(diffs.join("; ")))
    }
}
