//! Overlapping temporal windows for sequences of arbitrary length.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::Detector;
use crate::tensor::Tensor;

pub const DEFAULT_OVERLAP: f64 = 0.10;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Window layout over a sequence of `len` frames, all 0-indexed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub len: usize,
    pub frames: usize,
    pub stride: usize,
    /// Starts `0, stride, 2 stride, ...` before the tail adjustment.
    pub nominal: Vec<usize>,
    /// Actual window starts. The last one is right-aligned to `len - frames`
    /// when the nominal start would run past the end.
    pub starts: Vec<usize>,
}

impl Tiling {
    /// `(start, end)` half-open frame ranges; a sequence shorter than one
    /// window yields the single range `0..len`.
    pub fn ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts
            .iter()
            .map(|&s| (s, (s + self.frames).min(self.len)))
    }

    /// How many windows cover each frame.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.len];
        for (a, b) in self.ranges() {
            c[a..b].iter_mut().for_each(|v| *v += 1);
        }
        c
    }
}

pub fn plan_windows(len: usize, frames: usize, overlap: f64) -> Result<Tiling> {
    if len == 0 || frames == 0 {
        return Err(Error::InvalidArgument(
            "sequence and window lengths must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be in [0, 1)"
        )));
    }
    let stride = (((1.0 - overlap) * frames as f64).round() as usize).max(1);
    let mut nominal = Vec::new();
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        nominal.push(s);
        starts.push(s.min(len.saturating_sub(frames)));
        if s + frames >= len {
            break;
        }
        s += stride;
    }
    Ok(Tiling {
        len,
        frames,
        stride,
        nominal,
        starts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Sigmoid confidences `[L, H, W]`, maximum over covering windows.
    pub confidence: Tensor,
    /// `confidence > threshold` as 0/1.
    pub mask: Tensor,
    pub tiling: Tiling,
}

fn pad_spatial(x: &Tensor, hp: usize, wp: usize) -> Tensor {
    let [t, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    if (h, w) == (hp, wp) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[t, hp, wp]);
    for f in 0..t {
        for y in 0..h {
            let src = (f * h + y) * w;
            let dst = (f * hp + y) * wp;
            out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
        }
    }
    out
}

/// Runs `det` over overlapping windows of `frames` (`[L, H, W]`, any
/// `L >= 1`). Each window is passed through [`Detector::prepare`], then
/// zero-padded to the detector's spatial multiple and cropped back.
pub fn detect_sequence<D: Detector + ?Sized>(
    det: &D,
    frames: &Tensor,
    overlap: f64,
    threshold: f64,
) -> Result<Detection> {
    let [l, h, w] = match *frames.shape() {
        [l, h, w] if h > 0 && w > 0 => [l, h, w],
        ref s => {
            return Err(Error::shape(
                "detect",
                format!("sequence must be [L, H, W], got {s:?}"),
            ))
        }
    };
    let tiling = plan_windows(l, det.frames(), overlap)?;
    let mult = det.spatial_multiple();
    let (hp, wp) = (h.div_ceil(mult) * mult, w.div_ceil(mult) * mult);
    let plane = h * w;
    let windows: Vec<(usize, usize)> = tiling.ranges().collect();
    let outputs = windows
        .par_iter()
        .map(|&(a, b)| {
            let clip = Tensor::new(
                vec![b - a, h, w],
                frames.data()[a * plane..b * plane].to_vec(),
            )?;
            det.logits(&pad_spatial(&det.prepare(&clip), hp, wp))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confidence = Tensor::full(&[l, h, w], f64::NEG_INFINITY);
    for (&(a, _), z) in windows.iter().zip(&outputs) {
        for f in 0..z.shape()[0] {
            for y in 0..h {
                let src = (f * hp + y) * wp;
                let dst = ((a + f) * h + y) * w;
                let row = &mut confidence.data_mut()[dst..dst + w];
                for (c, &v) in row.iter_mut().zip(&z.data()[src..src + w]) {
                    *c = c.max(1.0 / (1.0 + (-v).exp()));
                }
            }
        }
    }
    if !confidence.is_finite() {
        return Err(Error::NonFinite { op: "detect" });
    }
    let mask = confidence.map(|c| if c > threshold { 1.0 } else { 0.0 });
    Ok(Detection {
        confidence,
        mask,
        tiling,
    })
}
