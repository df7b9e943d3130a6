//! Temporal profiles and their autocorrelation diagnostics.

use std::io::Write;

use crate::error::{Error, Result};
use crate::simulator::Sequence;

pub const DEFAULT_SMOOTH_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalProfile {
    pub values: Vec<f64>,
    pub pixel: (usize, usize),
    pub source: String,
}

impl TemporalProfile {
    pub fn from_values(values: Vec<f64>) -> Self {
        TemporalProfile {
            values,
            pixel: (0, 0),
            source: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationCurve {
    /// `-(T-1) ..= T-1`.
    pub lags: Vec<i64>,
    pub values: Vec<f64>,
    pub smoothed: Option<Vec<f64>>,
}

impl CorrelationCurve {
    /// Value at lag 0.
    pub fn zero_lag(&self) -> f64 {
        self.values[self.values.len() / 2]
    }
}

/// Gray values of pixel `(x, y)` over all frames.
pub fn extract_profile(seq: &Sequence, x: usize, y: usize) -> Result<TemporalProfile> {
    let [t, h, w] = seq.dims();
    if x >= w || y >= h {
        return Err(Error::InvalidArgument(format!(
            "pixel ({x}, {y}) outside {w}x{h} frame"
        )));
    }
    let values = (0..t)
        .map(|f| seq.frames.data()[f * h * w + y * w + x])
        .collect();
    Ok(TemporalProfile {
        values,
        pixel: (x, y),
        source: seq.name.clone(),
    })
}

/// Autocorrelation of the mean-removed profile with zero extension:
/// `R(tau) = sum_t f(t) f(t - tau)` over the overlap.
pub fn correlation(profile: &TemporalProfile) -> Result<CorrelationCurve> {
    let n = profile.values.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty profile".into()));
    }
    let mean = profile.values.iter().sum::<f64>() / n as f64;
    let f: Vec<f64> = profile.values.iter().map(|v| v - mean).collect();
    let mut values = Vec::with_capacity(2 * n - 1);
    let mut lags = Vec::with_capacity(2 * n - 1);
    for tau in -(n as i64 - 1)..=(n as i64 - 1) {
        let k = tau.unsigned_abs() as usize;
        // Summing the same products in the same order for +tau and -tau keeps
        // the curve exactly symmetric.
        let r: f64 = (k..n).map(|t| f[t] * f[t - k]).sum();
        lags.push(tau);
        values.push(r);
    }
    Ok(CorrelationCurve {
        lags,
        values,
        smoothed: None,
    })
}

/// Centered moving average; near the ends the window shrinks symmetrically
/// to what fits.
pub fn smooth_values(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "smoothing window must be odd, got {window}"
        )));
    }
    if window > values.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds curve length {}",
            values.len()
        )));
    }
    let half = window / 2;
    let n = values.len();
    Ok((0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            values[i - r..=i + r].iter().sum::<f64>() / (2 * r + 1) as f64
        })
        .collect())
}

pub fn smooth(curve: &CorrelationCurve, window: usize) -> Result<CorrelationCurve> {
    Ok(CorrelationCurve {
        smoothed: Some(smooth_values(&curve.values, window)?),
        ..curve.clone()
    })
}

/// Adds `interference`, rescaled to zero mean and std `sigma`, to `target`
/// and returns the smoothed correlation of the mixture.
pub fn mix_and_analyze(
    target: &TemporalProfile,
    interference: &TemporalProfile,
    sigma: f64,
    window: usize,
) -> Result<CorrelationCurve> {
    let n = target.values.len();
    if interference.values.len() != n {
        return Err(Error::InvalidArgument(format!(
            "profile lengths differ: {n} vs {}",
            interference.values.len()
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let mut mixed = target.values.clone();
    if sigma > 0.0 {
        let mean = interference.values.iter().sum::<f64>() / n as f64;
        let std = (interference
            .values
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        if std == 0.0 {
            return Err(Error::Degenerate("interference has zero variance".into()));
        }
        for (m, v) in mixed.iter_mut().zip(&interference.values) {
            *m += (v - mean) / std * sigma;
        }
    }
    let profile = TemporalProfile {
        values: mixed,
        pixel: target.pixel,
        source: target.source.clone(),
    };
    smooth(&correlation(&profile)?, window)
}

/// CSV `lag,value,smoothed,value_norm,smoothed_norm`; the normalized columns
/// divide by the zero-lag value of the same column.
pub fn write_correlation_csv<W: Write>(
    out: &mut W,
    curve: &CorrelationCurve,
) -> std::io::Result<()> {
    writeln!(out, "lag,value,smoothed,value_norm,smoothed_norm")?;
    let mid = curve.values.len() / 2;
    let sm = curve.smoothed.as_ref();
    let r0 = curve.values[mid];
    let s0 = sm.map(|s| s[mid]);
    for (i, (lag, v)) in curve.lags.iter().zip(&curve.values).enumerate() {
        let s = sm.map(|s| s[i]);
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let norm = |x: f64, d: f64| if d != 0.0 { Some(x / d) } else { None };
        writeln!(
            out,
            "{lag},{v},{},{},{}",
            fmt(s),
            fmt(norm(*v, r0)),
            fmt(s.zip(s0).and_then(|(s, s0)| norm(s, s0)))
        )?;
    }
    Ok(())
}

/// CSV `t,value`.
pub fn write_profile_csv<W: Write>(out: &mut W, profile: &TemporalProfile) -> std::io::Result<()> {
    writeln!(out, "t,value")?;
    for (t, v) in profile.values.iter().enumerate() {
        writeln!(out, "{t},{v}")?;
    }
    Ok(())
}
