use super::{clip_affine, pad_time, Mode, Model};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Anything that maps a `[T, H, W]` clip to `[T, H, W]` logits on a graph.
///
/// Windowed detection and attribution are written against this trait so
/// they can be exercised with small analytic models.
pub trait Detector: Sync {
    /// Clip length the detector consumes.
    fn frames(&self) -> usize;

    /// Spatial sizes must be divisible by this.
    fn spatial_multiple(&self) -> usize {
        1
    }

    /// `(shift, scale)` of the affine map `(x - shift) * scale` applied to a
    /// raw clip before it reaches the network.
    fn input_affine(&self, _clip: &Tensor) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn prepare(&self, clip: &Tensor) -> Tensor {
        let (shift, scale) = self.input_affine(clip);
        if (shift, scale) == (0.0, 1.0) {
            return clip.clone();
        }
        clip.map(|v| (v - shift) * scale)
    }

    /// Records eval-mode logits of `input` (exactly `frames()` frames).
    fn logits_graph(&self, g: &mut Graph, input: Var) -> Result<Var>;

    /// Logits of `s` with `1..=frames()` frames; short clips are zero-filled
    /// at the end and trimmed again.
    fn logits(&self, s: &Tensor) -> Result<Tensor> {
        let [t, h, w] = match *s.shape() {
            [t, h, w] => [t, h, w],
            ref sh => {
                return Err(Error::shape(
                    "logits",
                    format!("input must be [T, H, W], got {sh:?}"),
                ))
            }
        };
        let full = self.frames();
        if t == 0 || t > full {
            return Err(Error::shape(
                "logits",
                format!("input has {t} frames, detector takes 1..={full}"),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(pad_time(s, full));
        let y = self.logits_graph(&mut g, x)?;
        let out = g.value(y);
        Tensor::new(vec![t, h, w], out.data()[..t * h * w].to_vec())
    }
}

impl Detector for Model {
    fn frames(&self) -> usize {
        self.spec.frames
    }

    fn spatial_multiple(&self) -> usize {
        self.spec.spatial_multiple()
    }

    fn input_affine(&self, clip: &Tensor) -> (f64, f64) {
        clip_affine(clip.data())
    }

    fn logits_graph(&self, g: &mut Graph, input: Var) -> Result<Var> {
        Ok(self.forward_graph(g, input, Mode::Eval, false)?.logits)
    }
}
