//! Integrated gradients for dense detectors, with per-frame and spatial
//! summaries of the resulting maps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Detector;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_STEPS: usize = 64;
/// Default baseline gray level as a fraction of the target's mean gray level.
pub const DEFAULT_BASELINE_FRACTION: f64 = 0.25;

fn check_mask(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArgument("target mask must be 0/1".into()));
    }
    if mask.sum() == 0.0 {
        return Err(Error::EmptyMask("target mask selects no pixel".into()));
    }
    Ok(())
}

/// Summed score of the pixels selected by `mask`.
pub fn converter(confidence: &Tensor, mask: &Tensor) -> Result<f64> {
    if confidence.shape() != mask.shape() {
        return Err(Error::shape(
            "converter",
            format!("{:?} vs {:?}", confidence.shape(), mask.shape()),
        ));
    }
    check_mask(mask)?;
    Ok(confidence
        .data()
        .iter()
        .zip(mask.data())
        .map(|(c, m)| c * m)
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Constant gray level of the baseline clip.
    pub baseline: f64,
    pub steps: usize,
}

impl AttributionConfig {
    /// Baseline at a quarter of the mean gray level under `mask`.
    pub fn for_target(input: &Tensor, mask: &Tensor, steps: usize) -> Result<Self> {
        if input.shape() != mask.shape() {
            return Err(Error::shape(
                "attribution",
                format!("{:?} vs {:?}", input.shape(), mask.shape()),
            ));
        }
        check_mask(mask)?;
        let mean = converter(input, mask)? / mask.sum();
        Ok(AttributionConfig {
            baseline: DEFAULT_BASELINE_FRACTION * mean,
            steps,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    /// Score of the input and of the baseline.
    pub score: f64,
    pub baseline_score: f64,
    /// `|sum(values) - (score - baseline_score)|`.
    pub completeness_gap: f64,
}

impl AttributionMap {
    /// Gap relative to the score difference; infinite when that difference
    /// is zero but the gap is not.
    pub fn relative_gap(&self) -> f64 {
        let d = (self.score - self.baseline_score).abs();
        if d == 0.0 {
            if self.completeness_gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.completeness_gap / d
        }
    }
}

/// Integrated gradients of a scalar function `f` recorded on a graph, along
/// the straight path from `baseline` to `input`, by the midpoint rule.
pub fn integrate_path<F>(
    f: F,
    input: &Tensor,
    baseline: &Tensor,
    steps: usize,
) -> Result<AttributionMap>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if input.shape() != baseline.shape() {
        return Err(Error::shape(
            "integrated_gradients",
            format!("{:?} vs {:?}", input.shape(), baseline.shape()),
        ));
    }
    let delta: Vec<f64> = input
        .data()
        .iter()
        .zip(baseline.data())
        .map(|(x, b)| x - b)
        .collect();
    let eval = |x: Tensor, grad: bool| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), grad);
        let y = f(&mut g, v)?;
        let value = g
            .value(y)
            .item()
            .ok_or_else(|| Error::shape("integrated_gradients", "score is not a scalar"))?;
        if !grad {
            return Ok((value, None));
        }
        g.backward(y)?;
        Ok((
            value,
            Some(g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape()))),
        ))
    };
    let grads = (0..steps)
        .into_par_iter()
        .map(|k| {
            let a = (k as f64 + 0.5) / steps as f64;
            let data = baseline
                .data()
                .iter()
                .zip(&delta)
                .map(|(b, d)| b + a * d)
                .collect();
            eval(Tensor::new(input.shape().to_vec(), data)?, true)
                .map(|(_, g)| g.expect("gradient requested"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; input.numel()];
    for g in &grads {
        acc.iter_mut().zip(g.data()).for_each(|(a, v)| *a += v);
    }
    let values = Tensor::new(
        input.shape().to_vec(),
        acc.iter()
            .zip(&delta)
            .map(|(a, d)| d * a / steps as f64)
            .collect(),
    )?;
    let (score, _) = eval(input.clone(), false)?;
    let (baseline_score, _) = eval(baseline.clone(), false)?;
    let completeness_gap = (values.sum() - (score - baseline_score)).abs();
    Ok(AttributionMap {
        values,
        score,
        baseline_score,
        completeness_gap,
    })
}

/// Attribution of the summed target confidence `sum(sigmoid(D(S)) * mask)`
/// to every input pixel of `input` (`[T', H, W]`, `T' <= T`).
///
/// The detector's input affine map is taken from `input` and applied to
/// both path ends, so the map is expressed in raw input units.
pub fn integrated_gradients<D: Detector + ?Sized>(
    det: &D,
    input: &Tensor,
    mask: &Tensor,
    cfg: &AttributionConfig,
) -> Result<AttributionMap> {
    let [t, h, w] = match *input.shape() {
        [t, h, w] => [t, h, w],
        ref s => {
            return Err(Error::shape(
                "integrated_gradients",
                format!("expected [T, H, W], got {s:?}"),
            ))
        }
    };
    if mask.shape() != input.shape() {
        return Err(Error::shape(
            "integrated_gradients",
            format!("mask {:?} vs input {:?}", mask.shape(), input.shape()),
        ));
    }
    check_mask(mask)?;
    let full = det.frames();
    if t == 0 || t > full {
        return Err(Error::shape(
            "integrated_gradients",
            format!("input has {t} frames, detector takes 1..={full}"),
        ));
    }
    let mult = det.spatial_multiple();
    if h % mult != 0 || w % mult != 0 {
        return Err(Error::shape(
            "integrated_gradients",
            format!("{h}x{w} is not divisible by {mult}"),
        ));
    }
    let (shift, scale) = det.input_affine(input);
    let x = crate::network::pad_time(&input.map(|v| (v - shift) * scale), full);
    let mut b = Tensor::full(&[t, h, w], (cfg.baseline - shift) * scale);
    b = crate::network::pad_time(&b, full);
    let m = crate::network::pad_time(mask, full);
    let f = |g: &mut Graph, v: Var| -> Result<Var> {
        let z = det.logits_graph(g, v)?;
        let p = g.sigmoid(z)?;
        let s = g.mul_const(p, m.clone())?;
        g.sum(s)
    };
    let mut map = integrate_path(f, &x, &b, cfg.steps)?;
    // The map is invariant under the affine input transform, so the
    // normalized-space result already holds raw-space attributions.
    map.values = Tensor::new(vec![t, h, w], map.values.data()[..t * h * w].to_vec())?;
    Ok(map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameInfluence {
    pub sum_abs: Vec<f64>,
    pub mean_abs: Vec<f64>,
    pub max_abs: Vec<f64>,
}

pub fn frame_influence(values: &Tensor) -> Result<FrameInfluence> {
    let t = match *values.shape() {
        [t, _, _] => t,
        ref s => {
            return Err(Error::shape(
                "frame_influence",
                format!("expected [T, H, W], got {s:?}"),
            ))
        }
    };
    let mut out = FrameInfluence {
        sum_abs: vec![0.0; t],
        mean_abs: vec![0.0; t],
        max_abs: vec![0.0; t],
    };
    for f in 0..t {
        let fr = values.frame(f);
        out.sum_abs[f] = fr.iter().map(|v| v.abs()).sum();
        out.mean_abs[f] = if fr.is_empty() {
            0.0
        } else {
            out.sum_abs[f] / fr.len() as f64
        };
        out.max_abs[f] = fr.iter().fold(0.0, |m, v| m.max(v.abs()));
    }
    Ok(out)
}

pub fn write_influence_csv<W: Write>(out: &mut W, inf: &FrameInfluence) -> std::io::Result<()> {
    writeln!(out, "t,mean_abs,max_abs")?;
    for (t, (m, x)) in inf.mean_abs.iter().zip(&inf.max_abs).enumerate() {
        writeln!(out, "{t},{m},{x}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    /// Smallest radius around the target column holding 90% of the L1 mass.
    pub r90: f64,
    /// Set when the map has no mass and `r90` is reported as 0.
    pub degenerate: bool,
}

/// Radius of the vertical cylinder around `(x, y)` that contains 90% of
/// `sum |values|`.
pub fn spatial_concentration(values: &Tensor, (cx, cy): (f64, f64)) -> Result<Concentration> {
    let [t, h, w] = match *values.shape() {
        [t, h, w] => [t, h, w],
        ref s => {
            return Err(Error::shape(
                "spatial_concentration",
                format!("expected [T, H, W], got {s:?}"),
            ))
        }
    };
    let mut column = vec![0.0; h * w];
    for f in 0..t {
        column
            .iter_mut()
            .zip(values.frame(f))
            .for_each(|(c, v)| *c += v.abs());
    }
    let total: f64 = column.iter().sum();
    if total == 0.0 {
        return Ok(Concentration {
            r90: 0.0,
            degenerate: true,
        });
    }
    let mut by_dist: Vec<(f64, f64)> = column
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            (
                (((i % w) as f64 - cx).powi(2) + ((i / w) as f64 - cy).powi(2)).sqrt(),
                m,
            )
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    for (i, &(d, m)) in by_dist.iter().enumerate() {
        acc += m;
        let ring_done = by_dist.get(i + 1).is_none_or(|n| n.0 > d);
        if ring_done && acc >= 0.9 * total {
            return Ok(Concentration {
                r90: d,
                degenerate: false,
            });
        }
    }
    Ok(Concentration {
        r90: by_dist.last().map_or(0.0, |p| p.0),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converter_basics() {
        let mut m = Tensor::zeros(&[1, 2, 3]);
        m.data_mut()[4] = 1.0;
        let c = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        assert_eq!(converter(&c, &m).unwrap(), 4.0);
        let ones = Tensor::full(&[1, 2, 3], 1.0);
        let five = Tensor::from_fn(&[1, 2, 3], |i| if i < 5 { 1.0 } else { 0.0 });
        assert_eq!(converter(&ones, &five).unwrap(), 5.0);
        assert!(matches!(
            converter(&c, &Tensor::zeros(&[1, 2, 3])),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn zero_path_gives_zero_map() {
        let x = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let f = |g: &mut Graph, v: Var| {
            let s = g.mul(v, v)?;
            g.sum(s)
        };
        let m = integrate_path(f, &x, &x, 8).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.completeness_gap, 0.0);
    }

    #[test]
    fn quadratic_is_exact_under_midpoint_rule() {
        // d/dx of x^2 is linear along the path, which the midpoint rule
        // integrates exactly with one step.
        let x = Tensor::from_fn(&[1, 1, 3], |i| i as f64 + 1.0);
        let b = Tensor::zeros(&[1, 1, 3]);
        let f = |g: &mut Graph, v: Var| {
            let s = g.mul(v, v)?;
            g.sum(s)
        };
        let m = integrate_path(f, &x, &b, 1).unwrap();
        assert_eq!(m.values.data(), &[1.0, 4.0, 9.0]);
    }

    #[test]
    fn influence_of_an_impulse() {
        let mut v = Tensor::zeros(&[10, 2, 2]);
        v.data_mut()[7 * 4 + 1] = -3.0;
        let inf = frame_influence(&v).unwrap();
        assert_eq!(inf.sum_abs[7], 3.0);
        assert_eq!(inf.max_abs[7], 3.0);
        assert_eq!(inf.mean_abs[7], 0.75);
        assert_eq!(inf.sum_abs.iter().sum::<f64>(), 3.0);
        let mut buf = Vec::new();
        write_influence_csv(&mut buf, &inf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("t,mean_abs,max_abs\n0,0,0\n"));
    }

    #[test]
    fn concentration_cases() {
        let mut v = Tensor::zeros(&[3, 5, 5]);
        for t in 0..3 {
            v.data_mut()[t * 25 + 2 * 5 + 3] = 1.0;
        }
        assert_eq!(spatial_concentration(&v, (3.0, 2.0)).unwrap().r90, 0.0);
        let z = spatial_concentration(&Tensor::zeros(&[1, 4, 4]), (1.0, 1.0)).unwrap();
        assert!(z.degenerate);
    }

    #[test]
    fn baseline_is_a_quarter_of_target_mean() {
        let x = Tensor::from_fn(&[1, 2, 2], |i| 10.0 * i as f64);
        let mut m = Tensor::zeros(&[1, 2, 2]);
        m.data_mut()[2] = 1.0;
        m.data_mut()[3] = 1.0;
        assert_eq!(
            AttributionConfig::for_target(&x, &m, 4).unwrap().baseline,
            6.25
        );
    }
}
