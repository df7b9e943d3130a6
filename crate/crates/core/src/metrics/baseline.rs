//! Single-frame adaptive-threshold detector used as a reference.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-frame z-scores `(x - mean) / std`; a flat frame maps to zeros.
///
/// Thresholding these at `k` is the `mean + k sigma` detector, so a sweep
/// over thresholds is a sweep over `k`.
pub fn zscore_confidence(frames: &Tensor) -> Result<Tensor> {
    let [t, h, w] = match *frames.shape() {
        [t, h, w] => [t, h, w],
        ref s => {
            return Err(Error::shape(
                "zscore",
                format!("expected [T, H, W], got {s:?}"),
            ))
        }
    };
    let n = (h * w) as f64;
    let mut out = Tensor::zeros(&[t, h, w]);
    for f in 0..t {
        let x = frames.frame(f);
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 0.0 {
            let dst = &mut out.data_mut()[f * h * w..(f + 1) * h * w];
            dst.iter_mut()
                .zip(x)
                .for_each(|(d, v)| *d = (v - mean) / std);
        }
    }
    Ok(out)
}

/// Binary `x > mean + k std` per frame.
pub fn adaptive_threshold(frames: &Tensor, k: f64) -> Result<Tensor> {
    Ok(zscore_confidence(frames)?.map(|z| if z > k { 1.0 } else { 0.0 }))
}
