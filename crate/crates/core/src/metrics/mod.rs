//! Detection metrics for thresholded masks and for threshold sweeps.
//!
//! Ground-truth instances are the 8-connected components of each mask frame.
//! Two hit rules are used:
//!
//! * For a binary prediction, an instance is hit when a predicted component's
//!   centroid lies within `radius` of its centroid; predicted components are
//!   assigned to instances by maximum bipartite matching, so each one hits at
//!   most one instance.
//! * For a confidence sweep, an instance is hit at threshold `θ` when the
//!   confidence of its reference pixel (the instance pixel nearest its
//!   centroid) is `>= θ`. This keeps Pd monotone in `θ`, which the centroid
//!   rule does not.
//!
//! False alarms are counted in pixels: predicted pixels outside the
//! `radius` disc dilation of the hit instances (binary case) or of all
//! instances (sweep), divided by the total pixel count.

mod baseline;

pub use baseline::{adaptive_threshold, zscore_confidence};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::components::{label, Component};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RADIUS: f64 = 3.0;
pub const DEFAULT_THRESHOLDS: usize = 256;

fn dims3(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::shape(op, format!("expected [T, H, W], got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<[usize; 3]> {
    let d = dims3(op, a)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(d)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Maximum bipartite matching between ground-truth and predicted components
/// whose centroids are within `radius`. Returns, per ground-truth component,
/// the index of its predicted partner.
pub fn match_targets(pred: &[Component], gt: &[Component], radius: f64) -> Vec<Option<usize>> {
    let adj: Vec<Vec<usize>> = gt
        .iter()
        .map(|g| {
            (0..pred.len())
                .filter(|&j| dist(g.centroid, pred[j].centroid) <= radius)
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; pred.len()];
    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    for i in 0..gt.len() {
        let mut seen = vec![false; pred.len()];
        augment(i, &adj, &mut seen, &mut owner);
    }
    let mut out = vec![None; gt.len()];
    for (j, o) in owner.iter().enumerate() {
        if let Some(i) = *o {
            out[i] = Some(j);
        }
    }
    out
}

/// Marks every pixel within Euclidean distance `radius` of `pixels`.
pub(crate) fn dilate_into(pixels: &[usize], h: usize, w: usize, radius: f64, out: &mut [bool]) {
    let r = radius.floor() as isize;
    for &p in pixels {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dy * dy + dx * dx) as f64) > radius * radius {
                    continue;
                }
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
}

/// Counts behind a binary-prediction Pd/Fa.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub detected: usize,
    pub targets: usize,
    pub false_pixels: usize,
    pub pixels: usize,
}

impl Counts {
    /// `NaN` when there are no targets.
    pub fn pd(&self) -> f64 {
        if self.targets == 0 {
            f64::NAN
        } else {
            self.detected as f64 / self.targets as f64
        }
    }

    pub fn fa(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.false_pixels as f64 / self.pixels as f64
        }
    }

    pub fn merge(&mut self, o: &Counts) {
        self.detected += o.detected;
        self.targets += o.targets;
        self.false_pixels += o.false_pixels;
        self.pixels += o.pixels;
    }
}

/// Pd/Fa counts of a binary `[T, H, W]` prediction against a binary mask.
pub fn pd_fa(pred: &Tensor, gt: &Tensor, radius: f64) -> Result<Counts> {
    let [t, h, w] = same_shape("pd_fa", pred, gt)?;
    let mut c = Counts {
        pixels: t * h * w,
        ..Default::default()
    };
    let mut covered = vec![false; h * w];
    for f in 0..t {
        let g = label(gt.frame(f), h, w);
        let p = label(pred.frame(f), h, w);
        let m = match_targets(&p, &g, radius);
        covered.iter_mut().for_each(|v| *v = false);
        for (gi, hit) in g.iter().zip(&m) {
            if hit.is_some() {
                dilate_into(&gi.pixels, h, w, radius, &mut covered);
            }
        }
        c.targets += g.len();
        c.detected += m.iter().filter(|x| x.is_some()).count();
        c.false_pixels += pred
            .frame(f)
            .iter()
            .zip(&covered)
            .filter(|&(&v, &cov)| v > 0.5 && !cov)
            .count();
    }
    Ok(c)
}

/// Inputs of a confidence sweep, pooled over any number of sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepScores {
    /// Confidence at each instance's reference pixel.
    pub instances: Vec<f64>,
    /// Confidence of every pixel outside all instance dilations.
    pub background: Vec<f64>,
    /// Every confidence value, used to place thresholds.
    pub all: Vec<f64>,
}

impl SweepScores {
    pub fn collect(confidence: &Tensor, gt: &Tensor, radius: f64) -> Result<Self> {
        let [t, h, w] = same_shape("roc", confidence, gt)?;
        if !confidence.is_finite() {
            return Err(Error::NonFinite { op: "roc" });
        }
        let mut s = SweepScores {
            all: confidence.data().to_vec(),
            ..Default::default()
        };
        let mut covered = vec![false; h * w];
        for f in 0..t {
            let conf = confidence.frame(f);
            covered.iter_mut().for_each(|v| *v = false);
            for g in label(gt.frame(f), h, w) {
                dilate_into(&g.pixels, h, w, radius, &mut covered);
                let reference = g
                    .pixels
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let da = dist(((a % w) as f64, (a / w) as f64), g.centroid);
                        let db = dist(((b % w) as f64, (b / w) as f64), g.centroid);
                        da.total_cmp(&db).then(a.cmp(&b))
                    })
                    .expect("components are non-empty");
                s.instances.push(conf[reference]);
            }
            s.background.extend(
                conf.iter()
                    .zip(&covered)
                    .filter(|(_, &c)| !c)
                    .map(|(&v, _)| v),
            );
        }
        Ok(s)
    }

    pub fn extend(&mut self, o: SweepScores) {
        self.instances.extend(o.instances);
        self.background.extend(o.background);
        self.all.extend(o.all);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa: f64,
    pub pd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Roc {
    /// Ordered by decreasing threshold, so by non-decreasing `fa` and `pd`.
    /// The first and last points are the `(0, pd@max)` and `(1, 1)`
    /// endpoints, with thresholds `+inf` and `-inf`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl Roc {
    /// Largest Pd among the points with `fa <= max_fa`.
    pub fn pd_at(&self, max_fa: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fa <= max_fa)
            .map(|p| p.pd)
            .fold(f64::NAN, f64::max)
    }
}

/// Up to `n` thresholds at evenly spaced ranks of the sorted unique values.
pub fn quantile_thresholds(values: &[f64], n: usize) -> Vec<f64> {
    let mut u = values.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    match n {
        0 => Vec::new(),
        _ if u.len() <= n => u,
        1 => vec![u[u.len() / 2]],
        _ => (0..n)
            .map(|i| u[(i * (u.len() - 1) + (n - 1) / 2) / (n - 1)])
            .collect(),
    }
}

/// Trapezoidal area under `(fa, pd)`.
pub fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|p| (p[1].fa - p[0].fa) * (p[0].pd + p[1].pd) / 2.0)
        .sum()
}

fn count_at_least(sorted_desc: &[f64], th: f64) -> usize {
    sorted_desc.partition_point(|&v| v >= th)
}

pub fn roc_from_scores(s: &SweepScores, n_thresholds: usize) -> Result<Roc> {
    if s.instances.is_empty() {
        return Err(Error::InvalidArgument(
            "ROC needs at least one ground-truth instance".into(),
        ));
    }
    if s.all.is_empty() {
        return Err(Error::InvalidArgument(
            "ROC needs at least one pixel".into(),
        ));
    }
    let desc = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let inst = desc(&s.instances);
    let bg = desc(&s.background);
    let (ni, np) = (inst.len() as f64, s.all.len() as f64);
    let mut ths = quantile_thresholds(&s.all, n_thresholds);
    ths.reverse();
    let mut points = Vec::with_capacity(ths.len() + 2);
    for &th in &ths {
        points.push(RocPoint {
            threshold: th,
            fa: count_at_least(&bg, th) as f64 / np,
            pd: count_at_least(&inst, th) as f64 / ni,
        });
    }
    let pd_max = points.first().map_or(0.0, |p| p.pd);
    points.insert(
        0,
        RocPoint {
            threshold: f64::INFINITY,
            fa: 0.0,
            pd: pd_max,
        },
    );
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fa: 1.0,
        pd: 1.0,
    });
    let auc = trapezoid(&points);
    Ok(Roc { points, auc })
}

/// ROC of one confidence volume.
pub fn roc_auc(confidence: &Tensor, gt: &Tensor, radius: f64, n_thresholds: usize) -> Result<Roc> {
    roc_from_scores(&SweepScores::collect(confidence, gt, radius)?, n_thresholds)
}

/// Declared matching conventions, stored with every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub radius: f64,
    pub threshold: f64,
    pub hit_rule: String,
    pub roc_hit_rule: String,
    pub fa_rule: String,
}

impl Conventions {
    pub fn new(radius: f64, threshold: f64) -> Self {
        Conventions {
            radius,
            threshold,
            hit_rule: "predicted component centroid within radius of instance centroid, one-to-one matching".into(),
            roc_hit_rule: "instance reference pixel (nearest its centroid) at or above threshold".into(),
            fa_rule: "predicted pixels outside the radius dilation of hit instances, over all pixels".into(),
        }
    }
}

/// Serialized with the ROC endpoints' infinite thresholds as `null`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionReport {
    pub conventions: Conventions,
    /// `null` in JSON when there are no targets.
    pub pd: Option<f64>,
    pub fa: f64,
    pub auc: f64,
    pub counts: Counts,
    pub roc: Vec<RocPoint>,
}

/// Thresholded Pd/Fa and the ROC of `(confidence, gt)` pairs, pooled.
pub fn evaluate<'a>(
    pairs: impl IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
    threshold: f64,
    radius: f64,
    n_thresholds: usize,
) -> Result<DetectionReport> {
    let mut counts = Counts::default();
    let mut scores = SweepScores::default();
    for (conf, gt) in pairs {
        let pred = conf.map(|c| if c > threshold { 1.0 } else { 0.0 });
        counts.merge(&pd_fa(&pred, gt, radius)?);
        scores.extend(SweepScores::collect(conf, gt, radius)?);
    }
    let roc = roc_from_scores(&scores, n_thresholds)?;
    let pd = counts.pd();
    Ok(DetectionReport {
        conventions: Conventions::new(radius, threshold),
        pd: (!pd.is_nan()).then_some(pd),
        fa: counts.fa(),
        auc: roc.auc,
        counts,
        roc: roc.points,
    })
}

/// `threshold,fa,pd` rows; the endpoints carry `inf` and `-inf`.
pub fn write_roc_csv<W: Write>(out: &mut W, points: &[RocPoint]) -> std::io::Result<()> {
    writeln!(out, "threshold,fa,pd")?;
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.fa, p.pd)?;
    }
    Ok(())
}
