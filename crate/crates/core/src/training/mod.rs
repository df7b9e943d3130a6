//! Soft-IoU training with Adam, plus windowed inference.

mod tiling;

pub use tiling::{
    detect_sequence, plan_windows, Detection, Tiling, DEFAULT_OVERLAP, DEFAULT_THRESHOLD,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dilate_into;
use crate::network::{standardize, Mode, Model};
use crate::simulator::Sequence;
use crate::tensor::{BatchStats, Graph, Tensor};

pub const SOFT_IOU_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// `(height, width)` of the random spatial crops.
    pub crop: (usize, usize),
    /// Minimal fraction of crops that contain a target.
    pub presence: f64,
    /// Crops drawn per training sequence and epoch.
    pub repeats: usize,
    pub seed: u64,
    /// Pixels within this distance of a target but outside its mask are
    /// left out of the loss. Zero disables the ring.
    #[serde(default)]
    pub ignore_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 32,
            batch_size: 4,
            lr: 1e-3,
            lr_decay: 0.7,
            decay_every: 10,
            crop: (64, 64),
            presence: 0.75,
            repeats: 1,
            seed: 0,
            ignore_radius: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 || self.repeats == 0 {
            return bad("epochs, batch_size, decay_every and repeats must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return bad("crop must be positive");
        }
        if !(0.0..=1.0).contains(&self.presence) {
            return bad("presence must be in [0, 1]");
        }
        if !(self.ignore_radius >= 0.0 && self.ignore_radius.is_finite()) {
            return bad("ignore_radius must be non-negative");
        }
        Ok(())
    }

    /// `lr * decay^(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros = || {
            model
                .params
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect::<Vec<_>>()
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != model.params.len() {
            return Err(Error::InvalidArgument(
                "one gradient per parameter expected".into(),
            ));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in model
            .params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Soft-IoU loss of `logits` against a binary `mask`.
pub fn soft_iou_loss(logits: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.soft_iou(z, mask, SOFT_IOU_EPS)?;
    Ok(g.value(l).data()[0])
}

/// One training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    /// `[T, h, w]` raw values; frames past `valid` are zero.
    pub input: Tensor,
    pub mask: Tensor,
    /// Frames taken from the sequence.
    pub valid: usize,
}

/// Crop of `frames` starting at frame `start` and pixel `(y0, x0)`. Frames
/// past the end of the sequence are zero.
pub fn crop_at(
    seq: &Sequence,
    frames: usize,
    start: usize,
    (y0, x0): (usize, usize),
    (ch, cw): (usize, usize),
) -> Result<Crop> {
    let [l, h, w] = seq.dims();
    if ch > h || cw > w {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}x{cw} is larger than the {h}x{w} frame"
        )));
    }
    if y0 + ch > h || x0 + cw > w || start >= l {
        return Err(Error::InvalidArgument("crop origin out of range".into()));
    }
    let mut x = Tensor::zeros(&[frames, ch, cw]);
    let mut m = Tensor::zeros(&[frames, ch, cw]);
    let masks = seq.masks.as_ref();
    let valid = frames.min(l - start);
    for t in 0..valid {
        for y in 0..ch {
            let src = (start + t) * h * w + (y0 + y) * w + x0;
            let dst = (t * ch + y) * cw;
            x.data_mut()[dst..dst + cw].copy_from_slice(&seq.frames.data()[src..src + cw]);
            if let Some(mk) = masks {
                m.data_mut()[dst..dst + cw].copy_from_slice(&mk.data()[src..src + cw]);
            }
        }
    }
    Ok(Crop {
        input: x,
        mask: m,
        valid,
    })
}

/// Random temporal start (any frame, zero-filled to `frames`) and random
/// spatial crop. With `want_target` the crop is placed around a random mask
/// pixel of the chosen window; if the sequence has no mask pixel at all an
/// unconstrained crop is returned.
pub fn sample_crop<R: Rng>(
    seq: &Sequence,
    frames: usize,
    crop: (usize, usize),
    want_target: bool,
    rng: &mut R,
) -> Result<Crop> {
    let [l, h, w] = seq.dims();
    if crop.0 > h || crop.1 > w {
        return Err(Error::InvalidArgument(format!(
            "crop {}x{} is larger than the {h}x{w} frame",
            crop.0, crop.1
        )));
    }
    if want_target {
        if let Some(m) = &seq.masks {
            let on: Vec<usize> = m
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.5)
                .map(|(i, _)| i)
                .collect();
            if !on.is_empty() {
                let p = on[rng.random_range(0..on.len())];
                let (t, y, x) = (p / (h * w), (p / w) % h, p % w);
                // Any start that keeps frame t inside the window.
                let start = rng.random_range(t.saturating_sub(frames - 1)..=t);
                let y0 = rng.random_range(y.saturating_sub(crop.0 - 1)..=y.min(h - crop.0));
                let x0 = rng.random_range(x.saturating_sub(crop.1 - 1)..=x.min(w - crop.1));
                return crop_at(seq, frames, start, (y0, x0), crop);
            }
        }
    }
    let start = rng.random_range(0..l);
    let y0 = rng.random_range(0..=h - crop.0);
    let x0 = rng.random_range(0..=w - crop.1);
    crop_at(seq, frames, start, (y0, x0), crop)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    /// Mean step loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn write_loss_csv<W: Write>(out: &mut W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(out, "epoch,step,loss,lr")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.epoch, r.step, r.loss, r.lr)?;
    }
    Ok(())
}

struct SampleResult {
    loss: f64,
    grads: Vec<Vec<f64>>,
    stats: Vec<BatchStats>,
}

/// Logit given to ignored pixels; its sigmoid is below 1e-17.
const IGNORED_LOGIT: f64 = -40.0;

/// `1` where a pixel takes part in the loss, `0` on the ring of width
/// `radius` around each frame's mask. `None` when nothing is ignored.
pub fn loss_weights(mask: &Tensor, radius: f64) -> Option<Tensor> {
    let &[t, h, w] = mask.shape() else {
        return None;
    };
    if radius <= 0.0 {
        return None;
    }
    let mut ring = vec![false; h * w];
    let mut keep = Tensor::full(mask.shape(), 1.0);
    let mut any = false;
    for f in 0..t {
        let frame = mask.frame(f);
        let pixels: Vec<usize> = (0..h * w).filter(|&p| frame[p] > 0.5).collect();
        ring.fill(false);
        dilate_into(&pixels, h, w, radius, &mut ring);
        for p in (0..h * w).filter(|&p| ring[p] && frame[p] <= 0.5) {
            keep.data_mut()[f * h * w + p] = 0.0;
            any = true;
        }
    }
    any.then_some(keep)
}

/// Loss and parameter gradients of one crop.
fn run_sample(
    model: &Model,
    x: &Tensor,
    m: &Tensor,
    keep: Option<&Tensor>,
) -> Result<SampleResult> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let f = model.forward_graph(&mut g, xi, Mode::Train, true)?;
    let logits = match keep {
        // Pinning ignored logits far below zero removes them from both sums
        // of the loss and blocks their gradient.
        Some(k) => {
            let kept = g.mul_const(f.logits, k.clone())?;
            let pin = g.constant(k.map(|v| (1.0 - v) * IGNORED_LOGIT));
            g.add(kept, pin)?
        }
        None => f.logits,
    };
    let loss = g.soft_iou(logits, m, SOFT_IOU_EPS)?;
    g.backward(loss)?;
    let grads = f
        .params
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect();
    Ok(SampleResult {
        loss: g.value(loss).data()[0],
        grads,
        stats: f.bn_stats,
    })
}

/// Trains `model` in place. `progress` receives every finished step.
pub fn train(
    model: &mut Model,
    data: &[Sequence],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training sequences".into()));
    }
    crate::runtime::retain_heap();
    let frames = model.spec.frames;
    let mult = model.spec.spatial_multiple();
    if !cfg.crop.0.is_multiple_of(mult) || !cfg.crop.1.is_multiple_of(mult) {
        return Err(Error::InvalidConfig(format!(
            "crop {:?} must be divisible by {mult}",
            cfg.crop
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut records = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.repeats))
            .collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for batch in &batches {
            let crops = batch
                .iter()
                .map(|&i| {
                    let want = rng.random::<f64>() < cfg.presence;
                    sample_crop(&data[i], frames, cfg.crop, want, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let shared: &Model = model;
            let results: Vec<Result<SampleResult>> = crops
                .par_iter()
                .map(|c| {
                    let keep = loss_weights(&c.mask, cfg.ignore_radius);
                    run_sample(
                        shared,
                        &standardize(&c.input, c.valid),
                        &c.mask,
                        keep.as_ref(),
                    )
                })
                .collect();
            let mut results =
                results
                    .into_iter()
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => Error::Diverged {
                            epoch,
                            step,
                            loss: f64::NAN,
                        },
                        e => e,
                    })?;
            let n = results.len() as f64;
            let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let mut grads = std::mem::take(&mut results[0].grads);
            for r in &results[1..] {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            for g in &mut grads {
                g.iter_mut().for_each(|v| *v /= n);
            }
            adam.update(model, &grads, lr)?;
            if model.params.iter().any(|p| !p.value.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let stats: Vec<Vec<BatchStats>> = results.into_iter().map(|r| r.stats).collect();
            model.update_running_stats(&stats)?;
            let rec = LossRecord {
                epoch,
                step,
                loss,
                lr,
            };
            progress(&rec);
            records.push(rec);
            epoch_sum += loss;
            step += 1;
        }
        epoch_losses.push(epoch_sum / batches.len() as f64);
    }
    model.quantize();
    Ok(TrainReport {
        records,
        epoch_losses,
    })
}
