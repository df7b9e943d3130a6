//! Synthetic infrared sequences: moving Gaussian targets over clutter
//! backgrounds, corrupted by fixed-pattern and temporal noise.
//!
//! A frame is `I = g * (B + G) + o + n` where `B` is the background, `G` the
//! target signal, `g` and `o` the per-pixel gain and offset (constant over the
//! sequence) and `n` fresh Gaussian noise in every frame.

mod background;
mod dataset;

pub use background::Background;
pub use dataset::{
    generate_dataset, BackgroundClass, BackgroundSpec, DatasetSpec, GeneratedSequence, GroupSpec,
    NoiseSpec, Split, TargetSpec,
};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::components;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the square window used for local background statistics.
pub const SNR_WINDOW_HALF: usize = 10;

/// One target in uniform linear motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTrack {
    /// `(x, y)` position at frame 0, in pixels.
    pub start: (f64, f64),
    /// `(vx, vy)` in pixels per frame.
    pub velocity: (f64, f64),
    pub sigma: f64,
    pub peak: f64,
    pub t_enter: usize,
    pub t_exit: usize,
}

impl TargetTrack {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "target sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if self.peak.is_nan() || self.peak <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "target peak must be > 0, got {}",
                self.peak
            )));
        }
        if self.t_enter >= self.t_exit || self.t_exit > frames {
            return Err(Error::InvalidArgument(format!(
                "target interval [{}, {}) is not inside 0..{frames}",
                self.t_enter, self.t_exit
            )));
        }
        Ok(())
    }

    pub fn center(&self, t: usize) -> (f64, f64) {
        (
            self.start.0 + t as f64 * self.velocity.0,
            self.start.1 + t as f64 * self.velocity.1,
        )
    }

    pub fn active(&self, t: usize) -> bool {
        t >= self.t_enter && t < self.t_exit
    }
}

/// Noiseless target signal of `track` at frame `t` on an `H x W` grid: an
/// isotropic Gaussian of height `peak`, truncated beyond four sigmas.
pub fn render_target(track: &TargetTrack, t: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[h, w]);
    if track.active(t) {
        add_target(track, t, h, w, out.data_mut());
    }
    out
}

fn add_target(track: &TargetTrack, t: usize, h: usize, w: usize, frame: &mut [f64]) {
    let (cx, cy) = track.center(t);
    let support = 4.0 * track.sigma;
    let two_s2 = 2.0 * track.sigma * track.sigma;
    let x0 = (cx - support).ceil().max(0.0);
    let x1 = (cx + support).floor().min(w as f64 - 1.0);
    let y0 = (cy - support).ceil().max(0.0);
    let y1 = (cy + support).floor().min(h as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    for y in y0 as usize..=y1 as usize {
        for x in x0 as usize..=x1 as usize {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            if d2 <= support * support {
                frame[y * w + x] += track.peak * (-d2 / two_s2).exp();
            }
        }
    }
}

/// Binary mask of one track at one frame: pixels whose noiseless contribution
/// reaches half of that frame's maximum contribution.
pub fn target_mask(track: &TargetTrack, t: usize, h: usize, w: usize) -> Vec<bool> {
    let frame = render_target(track, t, h, w);
    let peak = frame.data().iter().cloned().fold(0.0, f64::max);
    frame
        .data()
        .iter()
        .map(|&v| peak > 0.0 && v >= 0.5 * peak)
        .collect()
}

/// `[T, H, W]` mask of a single track.
pub fn track_mask(track: &TargetTrack, frames: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[frames, h, w]);
    for t in 0..frames {
        let m = target_mask(track, t, h, w);
        for (d, on) in out.data_mut()[t * h * w..(t + 1) * h * w].iter_mut().zip(m) {
            if on {
                *d = 1.0;
            }
        }
    }
    out
}

/// Sum of all targets' noiseless signals, `[T, H, W]`.
pub fn render_targets(tracks: &[TargetTrack], frames: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[frames, h, w]);
    for t in 0..frames {
        let plane = &mut out.data_mut()[t * h * w..(t + 1) * h * w];
        for tr in tracks.iter().filter(|tr| tr.active(t)) {
            add_target(tr, t, h, w, plane);
        }
    }
    out
}

/// Union of all track masks.
pub fn render_masks(tracks: &[TargetTrack], frames: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[frames, h, w]);
    for tr in tracks {
        let m = track_mask(tr, frames, h, w);
        for (d, s) in out.data_mut().iter_mut().zip(m.data()) {
            *d = d.max(*s);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the temporal Gaussian noise.
    pub sigma_n: f64,
    /// Gains are uniform on `(1 - sigma_g, 1 + sigma_g)`.
    pub sigma_g: f64,
    /// Standard deviation of the Gaussian offsets.
    pub sigma_o: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            sigma_n: 0.0,
            sigma_g: 0.0,
            sigma_o: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.sigma_n) || !ok(self.sigma_g) || !ok(self.sigma_o) {
            return Err(Error::InvalidConfig(format!(
                "noise sigmas must be finite and >= 0: {self:?}"
            )));
        }
        if self.sigma_g >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma_g must be < 1, got {}",
                self.sigma_g
            )));
        }
        Ok(())
    }
}

/// The three noise components sampled for a `[T, H, W]` block.
#[derive(Clone, Debug)]
pub struct NoiseFields {
    /// Per-pixel gain, `[H, W]`.
    pub gain: Vec<f64>,
    /// Per-pixel offset, `[H, W]`.
    pub offset: Vec<f64>,
    /// Temporal noise, `[T, H, W]`.
    pub temporal: Vec<f64>,
}

/// Samples gains, then offsets, then temporal noise frame by frame from one
/// stream seeded by `cfg.seed`. Components with zero sigma are exact
/// (gain 1, offset 0, noise 0) and consume no randomness.
pub fn sample_noise(cfg: &NoiseConfig, frames: usize, h: usize, w: usize) -> Result<NoiseFields> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plane = h * w;
    let gain = if cfg.sigma_g > 0.0 {
        let u = Uniform::new(1.0 - cfg.sigma_g, 1.0 + cfg.sigma_g)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        (0..plane).map(|_| u.sample(&mut rng)).collect()
    } else {
        vec![1.0; plane]
    };
    let offset = gaussian(&mut rng, cfg.sigma_o, plane)?;
    let temporal = gaussian(&mut rng, cfg.sigma_n, frames * plane)?;
    Ok(NoiseFields {
        gain,
        offset,
        temporal,
    })
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64, n: usize) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let d = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok((0..n).map(|_| d.sample(rng)).collect())
}

/// `out[t, y, x] = g[y, x] * clean[t, y, x] + o[y, x] + n[t, y, x]`.
pub fn apply_noise(clean: &Tensor, cfg: &NoiseConfig) -> Result<Tensor> {
    let [t, h, w] = frame_dims(clean)?;
    let fields = sample_noise(cfg, t, h, w)?;
    let plane = h * w;
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = i % plane;
            fields.gain[p] * v + fields.offset[p] + fields.temporal[i]
        })
        .collect();
    Tensor::new(vec![t, h, w], data)
}

pub(crate) fn frame_dims(x: &Tensor) -> Result<[usize; 3]> {
    match *x.shape() {
        [t, h, w] => Ok([t, h, w]),
        ref s => Err(Error::shape(
            "sequence",
            format!("expected [T, H, W], got {s:?}"),
        )),
    }
}

/// A `[T, H, W]` block of gray values with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Tensor,
    pub masks: Option<Tensor>,
    pub tracks: Vec<TargetTrack>,
    pub noise: Option<NoiseConfig>,
    pub snr: Option<f64>,
}

impl Sequence {
    pub fn new(name: impl Into<String>, frames: Tensor) -> Result<Self> {
        frame_dims(&frames)?;
        Ok(Sequence {
            name: name.into(),
            frames,
            masks: None,
            tracks: Vec::new(),
            noise: None,
            snr: None,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        frame_dims(&self.frames).expect("sequence frames are [T, H, W]")
    }

    pub fn len(&self) -> usize {
        self.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_masks(mut self, masks: Tensor) -> Result<Self> {
        if masks.shape() != self.frames.shape() {
            return Err(Error::shape(
                "Sequence::with_masks",
                format!("{:?} vs {:?}", masks.shape(), self.frames.shape()),
            ));
        }
        if masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("masks must be binary".into()));
        }
        self.masks = Some(masks);
        Ok(self)
    }
}

/// Local-contrast SNR of one target instance in one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetSnr {
    pub frame: usize,
    pub centroid: (f64, f64),
    pub snr: f64,
}

/// Per target instance (connected mask component per frame):
/// `(mean target - mean local background) / std local background`, where the
/// local background is the 21x21 window around the centroid minus all mask
/// pixels.
pub fn target_snrs(frames: &Tensor, masks: &Tensor) -> Result<Vec<TargetSnr>> {
    let [t, h, w] = frame_dims(frames)?;
    if masks.shape() != frames.shape() {
        return Err(Error::shape("measure_snr", "mask and frames differ"));
    }
    let mut out = Vec::new();
    for f in 0..t {
        let img = frames.frame(f);
        let m = masks.frame(f);
        for comp in components::label(m, h, w) {
            let mean_t = comp.pixels.iter().map(|&p| img[p]).sum::<f64>() / comp.area() as f64;
            let (cx, cy) = (
                comp.centroid.0.round() as isize,
                comp.centroid.1.round() as isize,
            );
            let r = SNR_WINDOW_HALF as isize;
            let mut bg = Vec::new();
            for y in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
                for x in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                    let p = y as usize * w + x as usize;
                    if m[p] <= 0.5 {
                        bg.push(img[p]);
                    }
                }
            }
            if bg.len() < 2 {
                return Err(Error::Degenerate(format!(
                    "frame {f}: no background pixels around target"
                )));
            }
            let n = bg.len() as f64;
            let mean_b = bg.iter().sum::<f64>() / n;
            let std_b = (bg.iter().map(|v| (v - mean_b).powi(2)).sum::<f64>() / n).sqrt();
            if std_b <= f64::EPSILON * mean_b.abs().max(1.0) {
                return Err(Error::Degenerate(format!(
                    "frame {f}: local background has zero variance, SNR is unbounded"
                )));
            }
            out.push(TargetSnr {
                frame: f,
                centroid: comp.centroid,
                snr: (mean_t - mean_b) / std_b,
            });
        }
    }
    Ok(out)
}

/// Mean local-contrast SNR over every target instance of the sequence.
pub fn measure_snr(seq: &Sequence) -> Result<f64> {
    let masks = seq
        .masks
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("sequence {} has no masks", seq.name)))?;
    let snrs = target_snrs(&seq.frames, masks)?;
    if snrs.is_empty() {
        return Err(Error::EmptyMask(format!(
            "sequence {} has no target pixels",
            seq.name
        )));
    }
    Ok(snrs.iter().map(|s| s.snr).sum::<f64>() / snrs.len() as f64)
}
