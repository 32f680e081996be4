//! The training loop: Adam with the halving lr schedule, random aligned
//! crops, optional auxiliary flow supervision, NaN abort with batch
//! diagnostics, periodic evaluation and resumable checkpoints.
//!
//! Every random draw is keyed by (seed, purpose, step), so training is a
//! pure function of the config and dataset: resuming from a checkpoint
//! reproduces the uninterrupted run bit for bit at equal precision.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::{Tape, Var};
use crate::harness::checkpoint::{self, Checkpoint, TrainState};
use crate::harness::config::HarnessConfig;
use crate::harness::dataset::{list_samples, load_sample, LoadedSample};
use crate::harness::evalrun::{evaluate_samples, quantize_u16};
use crate::harness::optim::{clip_global_norm, lr_at_epoch, Adam};
use crate::model::BsrtModel;
use crate::params::BoundParams;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

const TAG_ORDER: u64 = 0x70AD;
const TAG_CROP: u64 = 0xC0B0_0000;
const TAG_RESUME: u64 = 0xBE57;

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub log_path: PathBuf,
    pub latest_ckpt: PathBuf,
    pub best_ckpt: Option<PathBuf>,
    pub best_psnr: f64,
}

/// Train per the [train] section; dispatches on the precision flag.
pub fn cmd_train(cfg: &HarnessConfig) -> Result<TrainOutcome> {
    match cfg.train.precision.as_str() {
        "f32" => run_train::<f32>(cfg),
        "f64" => run_train::<f64>(cfg),
        other => Err(Error::config(format!(
            "precision '{other}' must be f32 or f64"
        ))),
    }
}

/// Deterministic train/val split by name hash.
pub fn split_train_val(samples: &[LoadedSample], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let h = crate::harness::config::fnv1a(s.name.as_bytes());
        let frac = (h % 10_000) as f64 / 10_000.0;
        if frac < val_fraction {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if train.is_empty() {
        // degenerate split: keep everything trainable
        return ((0..samples.len()).collect(), Vec::new());
    }
    (train, val)
}

struct Cropped<T: Scalar> {
    burst: Vec<Tensor<T>>,
    hr: Tensor<T>,
    gt_flows: Vec<Tensor<T>>,
}

fn crop_sample<T: Scalar>(
    s: &LoadedSample,
    flows_full: &[Tensor<f64>],
    burst_n: usize,
    hr_crop: usize,
    scale: usize,
    rng: &mut Rng,
) -> Cropped<T> {
    let (_, fh, fw) = s.frames[0].dims3();
    let pc = (hr_crop / (2 * scale)).min(fh).min(fw);
    let (py, px) = if pc < fh || pc < fw {
        (rng.below(fh - pc + 1), rng.below(fw - pc + 1))
    } else {
        (0, 0)
    };
    let crop3 = |t: &Tensor<f64>, cy: usize, cx: usize, ch: usize, cw: usize| -> Tensor<T> {
        let (c, _, w) = t.dims3();
        let _ = w;
        let mut out = Tensor::zeros(&[c, ch, cw]);
        for ci in 0..c {
            for y in 0..ch {
                for x in 0..cw {
                    out.set3(ci, y, x, T::from_f64(t.at3(ci, cy + y, cx + x)));
                }
            }
        }
        out
    };
    let burst = s.frames[..burst_n]
        .iter()
        .map(|f| crop3(f, py, px, pc, pc))
        .collect();
    let hs = 2 * scale;
    let hr = crop3(&s.hr, py * hs, px * hs, pc * hs, pc * hs);
    let gt_flows = flows_full[..burst_n]
        .iter()
        .map(|f| crop3(f, 2 * py, 2 * px, 2 * pc, 2 * pc))
        .collect();
    Cropped {
        burst,
        hr,
        gt_flows,
    }
}

/// Mean absolute difference between a var and a constant target.
fn l1_node<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Var {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t);
    let a = tape.abs(d);
    tape.mean_all(a)
}

/// Aligned L1: estimate a flow from the (detached) prediction with the
/// model's own flow network, warp the ground truth toward it, and take
/// the masked mean absolute difference. Falls back to plain L1 when the
/// aligner cannot run.
fn aligned_l1_node<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BsrtModel<T>,
    pred: Var,
    target: &Tensor<T>,
) -> (Var, bool) {
    let (c, h, w) = target.dims3();
    let div = 1usize << (model.cfg.flow_levels - 1);
    if h % div != 0 || w % div != 0 {
        return (l1_node(tape, pred, target), true);
    }
    // detached aligner pass: estimate flow(target -> prediction)
    let sr = tape.value(pred).clone();
    let mut aux = Tape::<T>::new();
    let bp = BoundParams::bind(&mut aux, &model.params, &[]);
    let tv = aux.constant(target.clone());
    let sv = aux.constant(sr);
    let pyr = crate::flow::estimate_pyramid_t(&mut aux, tv, sv, &bp, "flow", model.cfg.flow_levels);
    let flow = aux.value(pyr.f1).clone();

    // warp the target by the flow; mask positions that sample in-bounds
    let hw = h * w;
    let fd = flow.data();
    let mut warped = Tensor::zeros(&[c, h, w]);
    let mut mask = Tensor::zeros(&[c, h, w]);
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let fx = fd[p].to_f64();
            let fy = fd[hw + p].to_f64();
            let sx = x as f64 + fx;
            let sy = y as f64 + fy;
            if !(0.0..=(w as f64 - 1.0)).contains(&sx) || !(0.0..=(h as f64 - 1.0)).contains(&sy)
            {
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let ax = T::from_f64(sx - x0 as f64);
            let ay = T::from_f64(sy - y0 as f64);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let one = T::ONE;
            for ci in 0..c {
                let v = (one - ay)
                    * ((one - ax) * target.at3(ci, y0, x0) + ax * target.at3(ci, y0, x1))
                    + ay * ((one - ax) * target.at3(ci, y1, x0) + ax * target.at3(ci, y1, x1));
                warped.set3(ci, y, x, v);
                mask.set3(ci, y, x, one);
                count += 1;
            }
        }
    }
    if count == 0 {
        return (l1_node(tape, pred, target), true);
    }
    let wv = tape.constant(warped);
    let mv = tape.constant(mask);
    let d = tape.sub(pred, wv);
    let a = tape.abs(d);
    let masked = tape.mul(a, mv);
    let s = tape.sum_all(masked);
    (tape.scale_var(s, T::ONE / T::from_usize(count)), false)
}

fn run_train<T: Scalar>(cfg: &HarnessConfig) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    let model_cfg = cfg.model.model_config(&cfg.data)?;
    let scale = model_cfg.scale;

    // dataset
    let dirs = list_samples(Path::new(&tc.dataset))
        .map_err(|e| Error::config(format!("missing dataset at {}: {e}", tc.dataset)))?;
    let samples: Vec<LoadedSample> = dirs.iter().map(|d| load_sample(d)).collect::<Result<_>>()?;
    for s in &samples {
        if s.frames.len() < model_cfg.burst {
            return Err(Error::config(format!(
                "sample {} has {} frames, model needs {}",
                s.name,
                s.frames.len(),
                model_cfg.burst
            )));
        }
        if s.meta.scale != scale {
            return Err(Error::config(format!(
                "sample {} was synthesized at scale {}, model expects {}",
                s.name, s.meta.scale, scale
            )));
        }
    }
    let flows_full: Vec<Vec<Tensor<f64>>> = samples
        .iter()
        .map(|s| (0..s.frames.len()).map(|i| s.gt_flow(i)).collect())
        .collect();
    let (train_ids, val_ids) = split_train_val(&samples, tc.val_fraction);

    // model + optimizer, optionally resumed
    let mut model = BsrtModel::<T>::new(model_cfg.clone(), tc.seed)?;
    let mut opt = Adam::new(&model.params, tc.beta1, tc.beta2);
    let mut start_step = 0u64;
    let mut best_psnr = f64::NEG_INFINITY;
    if !tc.resume.is_empty() && Path::new(&tc.resume).exists() {
        let ck = checkpoint::load::<T>(Path::new(&tc.resume))?;
        checkpoint::check_compatible(&ck.params, &model.params)?;
        for (i, name) in model.params.names().to_vec().iter().enumerate() {
            *model.params.tensor_mut(i) = ck.params.get(name).unwrap().clone();
        }
        if let Some(st) = ck.state {
            opt.m = st.m;
            opt.v = st.v;
            opt.t = st.adam_t;
            start_step = st.step;
            best_psnr = if st.best_psnr.is_nan() {
                f64::NEG_INFINITY
            } else {
                st.best_psnr
            };
        }
    }

    let steps_per_epoch = (train_ids.len() as u64).div_ceil(tc.batch_size as u64).max(1);
    let total_steps = if tc.steps > 0 {
        tc.steps
    } else {
        tc.epochs * steps_per_epoch
    };

    let out_dir = PathBuf::from(&tc.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let log_path = out_dir.join("train.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let latest_ckpt = out_dir.join("latest.ckpt");
    let best_ckpt_path = out_dir.join("best.ckpt");
    let mut wrote_best = best_psnr.is_finite();

    let save_ckpt = |path: &Path,
                     model: &BsrtModel<T>,
                     opt: &Adam<T>,
                     step: u64,
                     epoch: u64,
                     lr: f64,
                     best: f64|
     -> Result<()> {
        checkpoint::save(
            path,
            &Checkpoint {
                config_toml: cfg.to_toml(),
                params: model.params.clone(),
                state: Some(TrainState {
                    step,
                    epoch,
                    lr,
                    adam_t: opt.t,
                    m: opt.m.clone(),
                    v: opt.v.clone(),
                    rng_state: Rng::derive(tc.seed, TAG_RESUME).state(),
                    best_psnr: if best.is_finite() { best } else { f64::NAN },
                }),
            },
        )
    };

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in start_step..total_steps {
        let epoch = step / steps_per_epoch;
        let lr = lr_at_epoch(tc.lr, tc.halving_interval, epoch);

        // epoch-shuffled batch membership
        let mut order = train_ids.clone();
        Rng::derive(tc.seed, TAG_ORDER.wrapping_add(epoch)).shuffle(&mut order);
        let pos = (step % steps_per_epoch) as usize * tc.batch_size;
        let batch: Vec<usize> = order
            .iter()
            .cycle()
            .skip(pos)
            .take(tc.batch_size.min(order.len()))
            .copied()
            .collect();

        let mut tape = Tape::<T>::new();
        let bp = model.bind(&mut tape);
        let mut sample_losses: Vec<Var> = Vec::with_capacity(batch.len());
        for (slot, &sid) in batch.iter().enumerate() {
            let mut crop_rng = Rng::derive(
                tc.seed,
                TAG_CROP
                    .wrapping_add(step.wrapping_mul(64))
                    .wrapping_add(slot as u64),
            );
            let cropped: Cropped<T> = crop_sample(
                &samples[sid],
                &flows_full[sid],
                model_cfg.burst,
                tc.hr_crop,
                scale,
                &mut crop_rng,
            );
            let (out, flows) = model.forward_with_flows_t(&mut tape, &bp, &cropped.burst)?;
            let (mut loss, _fallback) = if tc.aligned_l1 {
                aligned_l1_node(&mut tape, &model, out, &cropped.hr)
            } else {
                (l1_node(&mut tape, out, &cropped.hr), false)
            };
            if tc.flow_loss_weight > 0.0 && !flows.is_empty() {
                let mut flow_terms: Vec<Var> = Vec::with_capacity(flows.len());
                for (i, pyr) in flows.iter().enumerate() {
                    let gt = tape.constant(cropped.gt_flows[i].clone());
                    let d = tape.sub(pyr.f1, gt);
                    let sq = tape.mul(d, d);
                    flow_terms.push(tape.mean_all(sq));
                }
                let mut fsum = flow_terms[0];
                for &t in &flow_terms[1..] {
                    fsum = tape.add(fsum, t);
                }
                let fmean = tape.scale_var(
                    fsum,
                    T::from_f64(tc.flow_loss_weight / flows.len() as f64),
                );
                loss = tape.add(loss, fmean);
            }
            sample_losses.push(loss);
        }
        let mut total = sample_losses[0];
        for &l in &sample_losses[1..] {
            total = tape.add(total, l);
        }
        let total = tape.scale_var(total, T::ONE / T::from_usize(sample_losses.len()));

        let loss_val = tape.value(total).data()[0].to_f64();
        if !loss_val.is_finite() {
            let names: Vec<&str> = batch.iter().map(|&i| samples[i].name.as_str()).collect();
            return Err(Error::NanLoss {
                step,
                batch: names.join(","),
            });
        }
        if step == start_step {
            first_loss = loss_val;
        }
        final_loss = loss_val;

        let mut grads = tape.backward(total);
        let mut g = bp.collect_grads(&mut grads);
        drop(tape);
        clip_global_norm(&mut g, tc.clip_norm);
        opt.step(&mut model.params, &g, lr);

        writeln!(log, "step={} loss={} lr={}", step + 1, loss_val, lr)?;

        let done = step + 1 == total_steps;
        if tc.eval_interval > 0 && ((step + 1) % tc.eval_interval == 0 || done) {
            let eval_ids = if val_ids.is_empty() { &train_ids } else { &val_ids };
            let subset: Vec<&LoadedSample> = eval_ids.iter().map(|&i| &samples[i]).collect();
            let report = evaluate_samples(&model, &subset)?;
            writeln!(
                log,
                "step={} val_psnr={} val_ssim={}",
                step + 1,
                report.mean_psnr,
                report.mean_ssim
            )?;
            if report.mean_psnr > best_psnr {
                best_psnr = report.mean_psnr;
                save_ckpt(
                    &best_ckpt_path,
                    &model,
                    &opt,
                    step + 1,
                    epoch,
                    lr,
                    best_psnr,
                )?;
                wrote_best = true;
            }
        }
        if (tc.ckpt_interval > 0 && (step + 1) % tc.ckpt_interval == 0) || done {
            save_ckpt(&latest_ckpt, &model, &opt, step + 1, epoch, lr, best_psnr)?;
        }
    }

    Ok(TrainOutcome {
        steps_run: total_steps - start_step,
        first_loss,
        final_loss,
        log_path,
        latest_ckpt,
        best_ckpt: wrote_best.then_some(best_ckpt_path),
        best_psnr,
    })
}
