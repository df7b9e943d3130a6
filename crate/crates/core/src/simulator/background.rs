//! Clutter backgrounds. All of them are non-negative.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A background image sequence, evaluated frame by frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Background {
    Constant {
        level: f64,
    },
    /// `level + gx * x + gy * y`.
    Gradient {
        level: f64,
        gx: f64,
        gy: f64,
    },
    /// Low-frequency smoothed noise, optionally drifting by `drift` pixels per
    /// frame. `field` covers the frame plus `margin` pixels on every side.
    Cloud {
        level: f64,
        #[serde(skip)]
        field: Vec<f64>,
        margin: usize,
        drift: (f64, f64),
        amplitude: f64,
        scale: f64,
    },
    /// Every pixel oscillates as `a_ij * sin(2 pi t / period + phi_ij)`.
    Flicker {
        level: f64,
        #[serde(skip)]
        amplitudes: Vec<f64>,
        #[serde(skip)]
        phases: Vec<f64>,
        period: f64,
    },
}

impl Background {
    /// A cloud layer with unit-std texture scaled to `amplitude`; `scale` is
    /// the Gaussian blur radius in pixels.
    #[allow(clippy::too_many_arguments)]
    pub fn cloud<R: Rng>(
        rng: &mut R,
        h: usize,
        w: usize,
        frames: usize,
        level: f64,
        amplitude: f64,
        scale: f64,
        drift: (f64, f64),
    ) -> Self {
        let travel = drift.0.abs().max(drift.1.abs()) * frames.saturating_sub(1) as f64;
        let margin = travel.ceil() as usize + 2;
        let (fh, fw) = (h + 2 * margin, w + 2 * margin);
        let white: Vec<f64> = (0..fh * fw).map(|_| StandardNormal.sample(rng)).collect();
        let mut field = blur(&white, fh, fw, scale);
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        let std =
            (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt();
        let k = if std > 0.0 { amplitude / std } else { 0.0 };
        for v in &mut field {
            *v = (*v - mean) * k;
        }
        Background::Cloud {
            level,
            field,
            margin,
            drift,
            amplitude,
            scale,
        }
    }

    pub fn flicker<R: Rng>(
        rng: &mut R,
        h: usize,
        w: usize,
        level: f64,
        amplitude: f64,
        period: f64,
    ) -> Self {
        let amplitudes = (0..h * w)
            .map(|_| rng.random::<f64>() * amplitude)
            .collect();
        let phases = (0..h * w)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        Background::Flicker {
            level,
            amplitudes,
            phases,
            period,
        }
    }

    pub fn render(&self, t: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        match self {
            Background::Constant { level } => out.fill(*level),
            Background::Gradient { level, gx, gy } => {
                for y in 0..h {
                    for x in 0..w {
                        out[y * w + x] = level + gx * x as f64 + gy * y as f64;
                    }
                }
            }
            Background::Cloud {
                level,
                field,
                margin,
                drift,
                ..
            } => {
                let fw = w + 2 * margin;
                let fh = h + 2 * margin;
                let ox = *margin as f64 + drift.0 * t as f64;
                let oy = *margin as f64 + drift.1 * t as f64;
                for y in 0..h {
                    for x in 0..w {
                        out[y * w + x] =
                            level + bilinear(field, fh, fw, ox + x as f64, oy + y as f64);
                    }
                }
            }
            Background::Flicker {
                level,
                amplitudes,
                phases,
                period,
            } => {
                let arg = std::f64::consts::TAU * t as f64 / period;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = level + amplitudes[i] * (arg + phases[i]).sin();
                }
            }
        }
        for v in &mut out {
            *v = v.max(0.0);
        }
        out
    }
}

fn bilinear(f: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = f[y0 * w + x0] * (1.0 - fx) + f[y0 * w + x1] * fx;
    let bot = f[y1 * w + x0] * (1.0 - fx) + f[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Separable Gaussian blur with edge clamping.
fn blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += tap * src[y * w + xx];
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += tap * tmp[yy * w + x];
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}
