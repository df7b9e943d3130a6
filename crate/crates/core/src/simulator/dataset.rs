//! Randomized dataset generation with per-target SNR calibration.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::background::Background;
use super::{
    measure_snr, render_masks, render_targets, sample_noise, track_mask, NoiseConfig, Sequence,
    TargetTrack,
};
use crate::components;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundClass {
    Constant,
    Gradient,
    Cloud,
    Flicker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    /// Each sequence draws one class uniformly from this list.
    pub classes: Vec<BackgroundClass>,
    /// Mean gray level range.
    pub level: [f64; 2],
    /// Clutter strength: total gradient swing across the frame, cloud texture
    /// std, or maximal flicker amplitude.
    pub contrast: [f64; 2],
    /// Blur radius of cloud textures, pixels.
    #[serde(default = "default_cloud_scale")]
    pub cloud_scale: f64,
    /// Maximal cloud drift speed, pixels per frame.
    #[serde(default)]
    pub max_drift: f64,
    /// Flicker period range, frames.
    #[serde(default = "default_flicker_period")]
    pub flicker_period: [f64; 2],
}

fn default_cloud_scale() -> f64 {
    4.0
}

fn default_flicker_period() -> [f64; 2] {
    [6.0, 20.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// Inclusive range of targets per sequence.
    pub count: [usize; 2],
    pub sigma: [f64; 2],
    /// Speed range, pixels per frame; the direction is uniform.
    pub speed: [f64; 2],
    /// Desired local-contrast SNR range; each track's peak is solved for it.
    pub snr: [f64; 2],
    /// Shortest visible interval as a fraction of the sequence length.
    #[serde(default = "one")]
    pub min_duration: f64,
    /// Distance from the frame border the track centers keep.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn one() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_n: f64,
    pub sigma_g: f64,
    pub sigma_o: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    pub count: usize,
    pub split: Split,
    pub background: BackgroundSpec,
    pub targets: TargetSpec,
    pub noise: NoiseSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub groups: Vec<GroupSpec>,
}

fn check_range(what: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= lo && r[0] <= r[1]) {
        return Err(Error::InvalidSpec(format!(
            "{what}: range {r:?} must satisfy {lo} <= min <= max"
        )));
    }
    Ok(())
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec(
                "frames, height and width must be positive".into(),
            ));
        }
        let mut names = std::collections::HashSet::new();
        for g in &self.groups {
            if g.name.is_empty()
                || !g
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return Err(Error::InvalidSpec(format!(
                    "group name {:?} must be non-empty [A-Za-z0-9_-]",
                    g.name
                )));
            }
            if !names.insert(&g.name) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate group name {:?}",
                    g.name
                )));
            }
            let b = &g.background;
            if b.classes.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "group {}: no background classes",
                    g.name
                )));
            }
            check_range("background.level", b.level, 0.0)?;
            check_range("background.contrast", b.contrast, 0.0)?;
            check_range(
                "background.flicker_period",
                b.flicker_period,
                f64::MIN_POSITIVE,
            )?;
            if b.cloud_scale.is_nan()
                || b.cloud_scale < 0.0
                || b.max_drift.is_nan()
                || b.max_drift < 0.0
            {
                return Err(Error::InvalidSpec(format!(
                    "group {}: cloud_scale and max_drift must be >= 0",
                    g.name
                )));
            }
            let t = &g.targets;
            if t.count[0] > t.count[1] {
                return Err(Error::InvalidSpec(format!(
                    "group {}: target count range {:?}",
                    g.name, t.count
                )));
            }
            check_range("targets.sigma", t.sigma, f64::MIN_POSITIVE)?;
            check_range("targets.speed", t.speed, 0.0)?;
            check_range("targets.snr", t.snr, f64::MIN_POSITIVE)?;
            if !(t.min_duration > 0.0 && t.min_duration <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "group {}: min_duration must be in (0, 1]",
                    g.name
                )));
            }
            let free = (self.width.min(self.height) as f64 - 1.0) - 2.0 * t.margin;
            if t.margin.is_nan() || t.margin < 0.0 || free < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "group {}: margin {} does not fit the frame",
                    g.name, t.margin
                )));
            }
            NoiseConfig {
                sigma_n: g.noise.sigma_n,
                sigma_g: g.noise.sigma_g,
                sigma_o: g.noise.sigma_o,
                seed: 0,
            }
            .validate()
            .map_err(|e| Error::InvalidSpec(format!("group {}: {e}", g.name)))?;
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSequence {
    pub sequence: Sequence,
    pub split: Split,
    pub group: String,
}

/// Generates every group of `spec`. Sequence `i` (in group order) draws from
/// its own stream `(seed, i)`, so the output is independent of scheduling.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<GeneratedSequence>> {
    spec.validate()?;
    let jobs: Vec<(usize, &GroupSpec, usize)> = spec
        .groups
        .iter()
        .flat_map(|g| (0..g.count).map(move |k| (g, k)))
        .enumerate()
        .map(|(i, (g, k))| (i, g, k))
        .collect();
    jobs.into_par_iter()
        .map(|(i, g, k)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let name = format!("{}_{:03}", g.name, k);
            let sequence = generate_one(spec, g, name, &mut rng)?;
            Ok(GeneratedSequence {
                sequence,
                split: g.split,
                group: g.name.clone(),
            })
        })
        .collect()
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn generate_one(
    spec: &DatasetSpec,
    g: &GroupSpec,
    name: String,
    rng: &mut ChaCha8Rng,
) -> Result<Sequence> {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let background = sample_background(rng, &g.background, t, h, w);
    let n_targets = rng.random_range(g.targets.count[0]..=g.targets.count[1]);
    let mut tracks: Vec<TargetTrack> = (0..n_targets)
        .map(|_| sample_track(rng, &g.targets, t, h, w))
        .collect();
    let desired: Vec<f64> = tracks.iter().map(|_| uniform(rng, g.targets.snr)).collect();
    let noise = NoiseConfig {
        sigma_n: g.noise.sigma_n,
        sigma_g: g.noise.sigma_g,
        sigma_o: g.noise.sigma_o,
        seed: rng.next_u64(),
    };

    let mut clean_bg = Tensor::zeros(&[t, h, w]);
    for f in 0..t {
        clean_bg.data_mut()[f * h * w..(f + 1) * h * w]
            .copy_from_slice(&background.render(f, h, w));
    }
    let fields = sample_noise(&noise, t, h, w)?;
    let plane = h * w;
    let noisy_bg: Vec<f64> = clean_bg
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| fields.gain[i % plane] * v + fields.offset[i % plane] + fields.temporal[i])
        .collect();
    let union = render_masks(&tracks, t, h, w);

    for (tr, &snr) in tracks.iter_mut().zip(&desired) {
        tr.peak = calibrate_peak(tr, snr, &noisy_bg, &fields.gain, union.data(), [t, h, w])?;
    }

    let signal = render_targets(&tracks, t, h, w);
    let frames: Vec<f64> = noisy_bg
        .iter()
        .zip(signal.data())
        .enumerate()
        .map(|(i, (&b, &s))| b + fields.gain[i % plane] * s)
        .collect();
    let mut seq = Sequence::new(name, Tensor::new(vec![t, h, w], frames)?)?.with_masks(union)?;
    seq.snr = if tracks.is_empty() {
        None
    } else {
        Some(measure_snr(&seq)?)
    };
    seq.tracks = tracks;
    seq.noise = Some(noise);
    Ok(seq)
}

fn sample_background<R: Rng>(
    rng: &mut R,
    b: &BackgroundSpec,
    t: usize,
    h: usize,
    w: usize,
) -> Background {
    let class = b.classes[rng.random_range(0..b.classes.len())];
    let level = uniform(rng, b.level);
    let contrast = uniform(rng, b.contrast);
    match class {
        BackgroundClass::Constant => Background::Constant { level },
        BackgroundClass::Gradient => {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let span = (h.max(w) as f64).max(1.0);
            Background::Gradient {
                level,
                gx: contrast * angle.cos() / span,
                gy: contrast * angle.sin() / span,
            }
        }
        BackgroundClass::Cloud => {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let speed = rng.random::<f64>() * b.max_drift;
            Background::cloud(
                rng,
                h,
                w,
                t,
                level,
                contrast,
                b.cloud_scale,
                (speed * angle.cos(), speed * angle.sin()),
            )
        }
        BackgroundClass::Flicker => {
            let period = uniform(rng, b.flicker_period);
            Background::flicker(rng, h, w, level, contrast, period)
        }
    }
}

fn sample_track<R: Rng>(
    rng: &mut R,
    spec: &TargetSpec,
    t: usize,
    h: usize,
    w: usize,
) -> TargetTrack {
    let min_len = ((spec.min_duration * t as f64).ceil() as usize).clamp(1, t);
    let duration = rng.random_range(min_len..=t);
    let t_enter = rng.random_range(0..=t - duration);
    let sigma = uniform(rng, spec.sigma);
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let mut speed = uniform(rng, spec.speed);
    let span = duration.saturating_sub(1) as f64;
    let lo = spec.margin;
    let (hi_x, hi_y) = (w as f64 - 1.0 - spec.margin, h as f64 - 1.0 - spec.margin);
    // Shorten the path if it cannot fit inside the allowed box.
    let (mut dx, mut dy) = (speed * angle.cos() * span, speed * angle.sin() * span);
    let fit = ((hi_x - lo) / dx.abs().max(1e-12))
        .min((hi_y - lo) / dy.abs().max(1e-12))
        .min(1.0);
    if fit < 1.0 {
        speed *= fit;
        dx *= fit;
        dy *= fit;
    }
    let pick = |rng: &mut R, d: f64, hi: f64| {
        let a = lo - d.min(0.0);
        let b = hi - d.max(0.0);
        if b > a {
            rng.random_range(a..b)
        } else {
            a
        }
    };
    let x_e = pick(rng, dx, hi_x);
    let y_e = pick(rng, dy, hi_y);
    let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
    TargetTrack {
        start: (x_e - vx * t_enter as f64, y_e - vy * t_enter as f64),
        velocity: (vx, vy),
        sigma,
        peak: 1.0,
        t_enter,
        t_exit: t_enter + duration,
    }
}

/// Per instance: noisy background and unit signal on the mask pixels and
/// on the local background pixels.
type ProbeSamples = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

/// Mean SNR of one track's instances as a function of its peak, evaluated on
/// the target-free noisy background plus the gain-modulated signal.
struct SnrProbe {
    instances: Vec<ProbeSamples>,
}

impl SnrProbe {
    fn mean_snr(&self, peak: f64) -> f64 {
        let mut acc = 0.0;
        for (bt, st, bb, sb) in &self.instances {
            let mt = bt.iter().zip(st).map(|(b, s)| b + peak * s).sum::<f64>() / bt.len() as f64;
            let n = bb.len() as f64;
            let mb = bb.iter().zip(sb).map(|(b, s)| b + peak * s).sum::<f64>() / n;
            let var = bb
                .iter()
                .zip(sb)
                .map(|(b, s)| (b + peak * s - mb).powi(2))
                .sum::<f64>()
                / n;
            acc += (mt - mb) / var.sqrt().max(1e-12);
        }
        acc / self.instances.len() as f64
    }
}

fn calibrate_peak(
    track: &TargetTrack,
    desired: f64,
    noisy_bg: &[f64],
    gain: &[f64],
    union: &[f64],
    [t, h, w]: [usize; 3],
) -> Result<f64> {
    let unit = TargetTrack {
        peak: 1.0,
        ..track.clone()
    };
    let signal = render_targets(std::slice::from_ref(&unit), t, h, w);
    let own = track_mask(&unit, t, h, w);
    let plane = h * w;
    let r = super::SNR_WINDOW_HALF as isize;
    let mut probe = SnrProbe {
        instances: Vec::new(),
    };
    for f in 0..t {
        let base = f * plane;
        let sig = |p: usize| gain[p] * signal.data()[base + p];
        for comp in components::label(own.frame(f), h, w) {
            let bt = comp.pixels.iter().map(|&p| noisy_bg[base + p]).collect();
            let st = comp.pixels.iter().map(|&p| sig(p)).collect();
            let (cx, cy) = (
                comp.centroid.0.round() as isize,
                comp.centroid.1.round() as isize,
            );
            let (mut bb, mut sb) = (Vec::new(), Vec::new());
            for y in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
                for x in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                    let p = y as usize * w + x as usize;
                    if union[base + p] <= 0.5 {
                        bb.push(noisy_bg[base + p]);
                        sb.push(sig(p));
                    }
                }
            }
            if bb.len() >= 2 {
                probe.instances.push((bt, st, bb, sb));
            }
        }
    }
    if probe.instances.is_empty() {
        return Ok(1.0);
    }
    let f = |p: f64| probe.mean_snr(p) - desired;
    // Bracket the root by doubling, then bisect.
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut grow = 0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 60 {
            return Err(Error::InvalidSpec(format!(
                "SNR {desired} is unreachable for this target and background"
            )));
        }
    }
    if f(lo) >= 0.0 {
        // Even a vanishing target already reaches the requested contrast.
        return Ok(hi * 1e-6);
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
