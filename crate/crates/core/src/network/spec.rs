use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    DeepPro,
    DeepProPlus,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deeppro" => Ok(Variant::DeepPro),
            "deeppro-plus" => Ok(Variant::DeepProPlus),
            _ => Err(Error::InvalidSpec(format!(
                "unknown variant {s:?} (deeppro | deeppro-plus)"
            ))),
        }
    }
}

/// Kernel geometry of one convolution: `l` temporal taps, a `k x k` spatial
/// window and per-axis dilation `[dt, dh, dw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub l: usize,
    pub k: usize,
    pub dilation: [usize; 3],
}

impl Kernel {
    pub const fn new(l: usize, k: usize, dilation: [usize; 3]) -> Self {
        Kernel { l, k, dilation }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernels {
    /// First layer of every level (T-Conv, or SD-Conv for DeepPro-Plus).
    pub stem: Kernel,
    /// Difference convolution opening each residual block.
    pub td: Kernel,
    /// Middle convolution of each residual block (T-Conv, or SD-Conv).
    pub mid: Kernel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Input frame count `T`; every SCorM is `T x T`.
    #[serde(rename = "T")]
    pub frames: usize,
    /// SCorMs per TPro.
    pub m: usize,
    /// Channel width `C` of every level.
    pub channels: usize,
    /// Spatial 2x max-pool count of each level.
    pub levels: Vec<usize>,
    /// Residual blocks per level.
    pub blocks: usize,
    pub kernels: Kernels,
}

impl ModelSpec {
    pub const DEFAULT_DEEPPRO_CHANNELS: usize = 20;
    pub const DEFAULT_PLUS_CHANNELS: usize = 32;

    pub fn deeppro(frames: usize, m: usize, channels: usize) -> Self {
        ModelSpec {
            variant: Variant::DeepPro,
            frames,
            m,
            channels,
            levels: vec![0, 1, 2],
            blocks: 2,
            kernels: Kernels {
                stem: Kernel::new(5, 1, [1, 1, 1]),
                td: Kernel::new(3, 1, [2, 1, 1]),
                mid: Kernel::new(3, 1, [1, 1, 1]),
            },
        }
    }

    pub fn deeppro_plus(frames: usize, m: usize, channels: usize) -> Self {
        ModelSpec {
            variant: Variant::DeepProPlus,
            frames,
            m,
            channels,
            levels: vec![0],
            blocks: 2,
            kernels: Kernels {
                stem: Kernel::new(5, 7, [1, 1, 1]),
                td: Kernel::new(3, 3, [2, 1, 1]),
                mid: Kernel::new(3, 3, [1, 2, 2]),
            },
        }
    }

    /// Full-width defaults: `T = 40`, `m = 4` and `C = 20` for DeepPro,
    /// `m = 8` and `C = 32` for DeepPro-Plus.
    pub fn default_for(variant: Variant) -> Self {
        match variant {
            Variant::DeepPro => Self::deeppro(40, 4, Self::DEFAULT_DEEPPRO_CHANNELS),
            Variant::DeepProPlus => Self::deeppro_plus(40, 8, Self::DEFAULT_PLUS_CHANNELS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.frames == 0 || self.channels == 0 || self.m == 0 || self.blocks == 0 {
            return bad(format!("T, C, m and blocks must be positive: {self:?}"));
        }
        if !self.channels.is_multiple_of(self.m) {
            return bad(format!(
                "C = {} is not divisible by m = {}",
                self.channels, self.m
            ));
        }
        for (name, k) in [
            ("stem", self.kernels.stem),
            ("td", self.kernels.td),
            ("mid", self.kernels.mid),
        ] {
            if k.l == 0 || k.l % 2 == 0 || k.k == 0 || k.k % 2 == 0 || k.dilation.contains(&0) {
                return bad(format!(
                    "{name} kernel {k:?} needs odd positive sizes and positive dilation"
                ));
            }
        }
        match self.variant {
            Variant::DeepPro => {
                if self.levels.len() != 3 {
                    return bad(format!(
                        "DeepPro has three levels, got {}",
                        self.levels.len()
                    ));
                }
                let ks = &self.kernels;
                if ks.stem.k != 1 || ks.td.k != 1 || ks.mid.k != 1 {
                    return bad("DeepPro kernels must be spatially 1x1".into());
                }
            }
            Variant::DeepProPlus => {
                if self.levels != [0] {
                    return bad(format!(
                        "DeepPro-Plus has one unpooled level, got {:?}",
                        self.levels
                    ));
                }
                if self.kernels.td.k != 3 || self.kernels.td.l != 3 {
                    return bad("DeepPro-Plus TD-Conv kernels are 3x3x3".into());
                }
            }
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels.iter().copied().max().unwrap_or(0)
    }

    pub fn scorm_count(&self) -> usize {
        self.levels.len() * self.m
    }

    pub fn scorm_params(&self) -> usize {
        self.frames * self.frames
    }

    /// Closed-form trainable parameter count, split into SCorM and other
    /// parameters.
    pub fn analytic_params(&self) -> (usize, usize) {
        let c = self.channels;
        let k2 = |k: Kernel| k.l * k.k * k.k;
        let bn = 2 * c;
        let stem = k2(self.kernels.stem) * c + bn;
        let block = (k2(self.kernels.td) + k2(self.kernels.mid) + 1) * c * c + 3 * bn;
        let tpro = c * c + bn;
        let level = stem + self.blocks * block + tpro;
        let lv = self.levels.len();
        let head = lv * c * c + bn + c + 1;
        (lv * self.m * self.scorm_params(), lv * level + head)
    }

    /// Multiply-accumulate count of one forward pass over an `H x W` input,
    /// divided by `T` (per frame). Difference kernels are counted with the
    /// taps actually evaluated.
    pub fn macs_per_frame(&self, h: usize, w: usize) -> f64 {
        let c = self.channels as f64;
        let t = self.frames as f64;
        let mut total = 0.0;
        for &p in &self.levels {
            let px = (h >> p) as f64 * (w >> p) as f64 * t;
            let taps = |k: Kernel| (k.l * k.k * k.k) as f64;
            let td = ((self.kernels.td.l + 2) * self.kernels.td.k * self.kernels.td.k) as f64;
            total += px * c * taps(self.kernels.stem);
            total += self.blocks as f64 * px * c * c * (td + taps(self.kernels.mid) + 1.0);
            total += px * c * t + px * c * c;
        }
        let full = (h * w) as f64 * t;
        let lv = self.levels.len() as f64;
        total += full * (lv * c * c + c);
        total / t
    }
}
