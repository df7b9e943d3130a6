//! DeepPro and DeepPro-Plus built on the tensor tape.
//!
//! The architecture is written once, in [`run`], against a [`Ctx`] that
//! either creates parameters (while building) or binds an existing model's
//! parameters (while running). Parameter order and naming therefore cannot
//! diverge between the two.

mod checkpoint;
mod detector;
mod scorm;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use detector::Detector;
pub use scorm::{antitranspose, symmetry_score, write_matrix_csv};
pub use spec::{Kernel, Kernels, ModelSpec, Variant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of the noise added to identity SCorMs at build time.
pub const SCORM_INIT_STD: f64 = 0.01;
/// Initial foreground probability of every pixel; the output bias starts at
/// its logit so that training does not begin from p = 0.5 everywhere.
pub const PRIOR_PROBABILITY: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named tensor (trainable parameter or batch-norm buffer).
#[derive(Clone, Debug, PartialEq)]
pub struct Named {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Named>,
    /// `<bn>.mean` and `<bn>.var` pairs, in layer order.
    pub buffers: Vec<Named>,
}

/// Result of recording one forward pass.
pub struct Forward {
    /// `[T, H, W]` logits.
    pub logits: Var,
    /// Leaf handles of the parameters, in `Model::params` order.
    pub params: Vec<Var>,
    /// Statistics seen by each batch norm (training mode only), in
    /// `Model::buffers` pair order.
    pub bn_stats: Vec<BatchStats>,
}

enum Init {
    Kaiming { fan_in: usize },
    Ones,
    Zeros,
    Const(f64),
    Scorm,
}

// Short-lived and never stored in bulk, so the size gap is harmless.
#[allow(clippy::large_enum_variant)]
enum Source<'m> {
    Build {
        params: Vec<Named>,
        buffers: Vec<Named>,
        rng: ChaCha8Rng,
    },
    Bind {
        model: &'m Model,
        grads: bool,
    },
}

struct Ctx<'g, 'm> {
    g: &'g mut Graph,
    mode: Mode,
    source: Source<'m>,
    next_param: usize,
    next_buffer: usize,
    bound: Vec<Var>,
    stats: Vec<BatchStats>,
}

impl Ctx<'_, '_> {
    fn param(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        let v = match &mut self.source {
            Source::Build { params, rng, .. } => {
                let mut t = match init {
                    Init::Kaiming { fan_in } => {
                        let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
                        let n = shape.iter().product();
                        Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect())?
                    }
                    Init::Ones => Tensor::full(shape, 1.0),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Const(v) => Tensor::full(shape, v),
                    Init::Scorm => {
                        let d = Normal::new(0.0, SCORM_INIT_STD)
                            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
                        let n = shape[0];
                        Tensor::from_fn(shape, |i| {
                            f64::from(u8::from(i / n == i % n)) + d.sample(rng)
                        })
                    }
                };
                t.round_to_f32();
                params.push(Named {
                    name,
                    value: t.clone(),
                });
                self.g.leaf(t, false)
            }
            Source::Bind { model, grads } => {
                let p = model.params.get(self.next_param).ok_or_else(|| {
                    Error::InvalidSpec(format!("model has no parameter for {name}"))
                })?;
                if p.name != name || p.value.shape() != shape {
                    return Err(Error::InvalidSpec(format!(
                        "parameter mismatch: model has {} {:?}, architecture expects {name} {shape:?}",
                        p.name,
                        p.value.shape()
                    )));
                }
                self.g.leaf(p.value.clone(), *grads)
            }
        };
        self.next_param += 1;
        self.bound.push(v);
        Ok(v)
    }

    fn buffers(&mut self, name: &str, c: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mn, vn) = (format!("{name}.mean"), format!("{name}.var"));
        let out = match &mut self.source {
            Source::Build { buffers, .. } => {
                buffers.push(Named {
                    name: mn,
                    value: Tensor::zeros(&[c]),
                });
                buffers.push(Named {
                    name: vn,
                    value: Tensor::full(&[c], 1.0),
                });
                (vec![0.0; c], vec![1.0; c])
            }
            Source::Bind { model, .. } => {
                let get = |i: usize, want: &str| -> Result<Vec<f64>> {
                    match model.buffers.get(i) {
                        Some(b) if b.name == want && b.value.shape() == [c] => {
                            Ok(b.value.data().to_vec())
                        }
                        _ => Err(Error::InvalidSpec(format!(
                            "model lacks buffer {want} [{c}]"
                        ))),
                    }
                };
                (get(self.next_buffer, &mn)?, get(self.next_buffer + 1, &vn)?)
            }
        };
        self.next_buffer += 2;
        Ok(out)
    }

    fn channels(&self, x: Var) -> usize {
        self.g.value(x).shape()[0]
    }

    fn weight(&mut self, name: &str, c_in: usize, c_out: usize, k: Kernel) -> Result<Var> {
        let shape = [c_out, c_in, k.l, k.k, k.k];
        self.param(
            format!("{name}.w"),
            &shape,
            Init::Kaiming {
                fan_in: c_in * k.l * k.k * k.k,
            },
        )
    }

    /// Creates or binds the parameters of a conv + batch norm + ReLU layer.
    fn layer_spec(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kind: ConvKind,
        k: Kernel,
    ) -> Result<Layer> {
        let weight = self.weight(name, c_in, c_out, k)?;
        let gamma = self.param(format!("{name}.bn.gamma"), &[c_out], Init::Ones)?;
        let beta = self.param(format!("{name}.bn.beta"), &[c_out], Init::Zeros)?;
        let (mean, var) = self.buffers(&format!("{name}.bn"), c_out)?;
        let norm = match self.mode {
            Mode::Train => Norm::Train { gamma, beta },
            Mode::Eval => Norm::Eval {
                gamma,
                beta,
                mean,
                var,
            },
        };
        Ok(Layer {
            weight,
            kind,
            dilation: k.dilation,
            norm,
        })
    }

    fn cbr(&mut self, name: &str, x: Var, c_out: usize, kind: ConvKind, k: Kernel) -> Result<Var> {
        let c_in = self.channels(x);
        let l = self.layer_spec(name, c_in, c_out, kind, k)?;
        layer(self.g, x, &l, &mut self.stats)
    }
}

/// How a convolution weight is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Plain,
    TemporalDiff,
    SpatialDiff,
}

/// Normalization between a convolution and its ReLU.
#[derive(Clone, Debug)]
pub enum Norm {
    Identity,
    Train {
        gamma: Var,
        beta: Var,
    },
    Eval {
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

/// One conv + norm + ReLU layer bound to graph variables.
#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: Var,
    pub kind: ConvKind,
    pub dilation: [usize; 3],
    pub norm: Norm,
}

pub fn conv(
    g: &mut Graph,
    x: Var,
    weight: Var,
    kind: ConvKind,
    dilation: [usize; 3],
) -> Result<Var> {
    match kind {
        ConvKind::Plain => g.conv3d(x, weight, dilation),
        ConvKind::TemporalDiff => g.td_conv(x, weight, dilation),
        ConvKind::SpatialDiff => g.sd_conv(x, weight, dilation),
    }
}

/// `relu(norm(conv(x)))`; training-mode statistics are appended to `stats`.
pub fn layer(g: &mut Graph, x: Var, l: &Layer, stats: &mut Vec<BatchStats>) -> Result<Var> {
    let y = conv(g, x, l.weight, l.kind, l.dilation)?;
    let y = match &l.norm {
        Norm::Identity => y,
        Norm::Train { gamma, beta } => {
            let (y, s) = g.batch_norm_train(y, *gamma, *beta, BN_EPS)?;
            stats.push(s);
            y
        }
        Norm::Eval {
            gamma,
            beta,
            mean,
            var,
        } => g.batch_norm_eval(y, *gamma, *beta, mean, var, BN_EPS)?,
    };
    g.relu(y)
}

const POINTWISE: Kernel = Kernel::new(1, 1, [1, 1, 1]);

/// Temporal probes: the channels of `x` are split into `scorms.len()` equal
/// groups, each group's time vectors are multiplied by its SCorM, the groups
/// are concatenated again and fused by the pointwise layer `fuse`.
pub fn tpro(
    g: &mut Graph,
    x: Var,
    scorms: &[Var],
    fuse: &Layer,
    stats: &mut Vec<BatchStats>,
) -> Result<Var> {
    let c = g.value(x).shape().first().copied().unwrap_or(0);
    let m = scorms.len();
    if m == 0 || c % m != 0 {
        return Err(Error::InvalidSpec(format!(
            "{c} channels cannot be split into {m} probes"
        )));
    }
    let group = c / m;
    let mut parts = Vec::with_capacity(m);
    for (i, &w) in scorms.iter().enumerate() {
        let xi = if m == 1 {
            x
        } else {
            g.slice_channels(x, i * group, group)?
        };
        parts.push(g.matmul_time(xi, w)?);
    }
    let cat = if m == 1 {
        parts[0]
    } else {
        g.concat_channels(&parts)?
    };
    layer(g, cat, fuse, stats)
}

/// Residual block `x + P(Mid(TD(x)))` from its three layers.
pub fn td_resblock(
    g: &mut Graph,
    x: Var,
    layers: &[Layer; 3],
    stats: &mut Vec<BatchStats>,
) -> Result<Var> {
    let mut y = x;
    for l in layers {
        y = layer(g, y, l, stats)?;
    }
    if g.value(y).shape() != g.value(x).shape() {
        return Err(Error::shape(
            "td_resblock",
            "branch output does not match the skip connection",
        ));
    }
    g.add(x, y)
}

fn tpro_ctx(ctx: &mut Ctx, name: &str, x: Var, m: usize) -> Result<Var> {
    let [c, t] = {
        let s = ctx.g.value(x).shape();
        [s[0], s[1]]
    };
    if c % m != 0 {
        return Err(Error::InvalidSpec(format!(
            "{c} channels cannot be split into {m} probes"
        )));
    }
    let scorms = (0..m)
        .map(|i| ctx.param(format!("{name}.scorm{i}"), &[t, t], Init::Scorm))
        .collect::<Result<Vec<_>>>()?;
    let fuse = ctx.layer_spec(&format!("{name}.p"), c, c, ConvKind::Plain, POINTWISE)?;
    tpro(ctx.g, x, &scorms, &fuse, &mut ctx.stats)
}

fn resblock_ctx(ctx: &mut Ctx, spec: &ModelSpec, name: &str, x: Var) -> Result<Var> {
    let c = spec.channels;
    let mid_kind = match spec.variant {
        Variant::DeepPro => ConvKind::Plain,
        Variant::DeepProPlus => ConvKind::SpatialDiff,
    };
    let layers = [
        ctx.layer_spec(
            &format!("{name}.td"),
            c,
            c,
            ConvKind::TemporalDiff,
            spec.kernels.td,
        )?,
        ctx.layer_spec(&format!("{name}.mid"), c, c, mid_kind, spec.kernels.mid)?,
        ctx.layer_spec(&format!("{name}.p"), c, c, ConvKind::Plain, POINTWISE)?,
    ];
    td_resblock(ctx.g, x, &layers, &mut ctx.stats)
}

/// Feature extractor of one level: `[1, T, H, W]` in, `[C, T, H, W]` out.
fn level(ctx: &mut Ctx, spec: &ModelSpec, index: usize, pools: usize, x: Var) -> Result<Var> {
    let name = format!("l{index}");
    let mut y = x;
    for _ in 0..pools {
        y = ctx.g.max_pool2(y)?;
    }
    let stem_kind = match spec.variant {
        Variant::DeepPro => ConvKind::Plain,
        Variant::DeepProPlus => ConvKind::SpatialDiff,
    };
    y = ctx.cbr(
        &format!("{name}.stem"),
        y,
        spec.channels,
        stem_kind,
        spec.kernels.stem,
    )?;
    for b in 0..spec.blocks {
        y = resblock_ctx(ctx, spec, &format!("{name}.block{b}"), y)?;
    }
    y = tpro_ctx(ctx, &format!("{name}.tpro"), y, spec.m)?;
    for _ in 0..pools {
        y = ctx.g.upsample2(y)?;
    }
    Ok(y)
}

fn run(ctx: &mut Ctx, spec: &ModelSpec, input: Var) -> Result<Var> {
    let [t, h, w] = match *ctx.g.value(input).shape() {
        [t, h, w] => [t, h, w],
        ref s => {
            return Err(Error::shape(
                "forward",
                format!("input must be [T, H, W], got {s:?}"),
            ))
        }
    };
    if t != spec.frames {
        return Err(Error::shape(
            "forward",
            format!("model expects T = {}, input has {t}", spec.frames),
        ));
    }
    let mult = spec.spatial_multiple();
    if h % mult != 0 || w % mult != 0 {
        return Err(Error::shape(
            "forward",
            format!("spatial size {h}x{w} must be divisible by {mult}"),
        ));
    }
    let x = ctx.g.reshape(input, &[1, t, h, w])?;
    let mut outs = Vec::with_capacity(spec.levels.len());
    for (i, &p) in spec.levels.iter().enumerate() {
        outs.push(level(ctx, spec, i, p, x)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        ctx.g.concat_channels(&outs)?
    };
    let y = ctx.cbr("head.p0", cat, spec.channels, ConvKind::Plain, POINTWISE)?;
    let c = ctx.channels(y);
    let wo = ctx.weight("head.out", c, 1, POINTWISE)?;
    let y = conv(ctx.g, y, wo, ConvKind::Plain, POINTWISE.dilation)?;
    let prior = (PRIOR_PROBABILITY / (1.0 - PRIOR_PROBABILITY)).ln();
    let b = ctx.param("head.out.b".into(), &[1], Init::Const(prior))?;
    let y = ctx.g.channel_bias(y, b)?;
    ctx.g.reshape(y, &[t, h, w])
}

impl Model {
    /// Kaiming-initialized model; deterministic in `seed`. Weights are
    /// rounded to f32 so that checkpoints reproduce them exactly.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut g = Graph::new();
        let m = spec.spatial_multiple();
        let input = g.constant(Tensor::zeros(&[spec.frames, m, m]));
        let mut ctx = Ctx {
            g: &mut g,
            mode: Mode::Eval,
            source: Source::Build {
                params: Vec::new(),
                buffers: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            next_param: 0,
            next_buffer: 0,
            bound: Vec::new(),
            stats: Vec::new(),
        };
        run(&mut ctx, spec, input)?;
        let Source::Build {
            params, buffers, ..
        } = ctx.source
        else {
            unreachable!()
        };
        Ok(Model {
            spec: spec.clone(),
            params,
            buffers,
        })
    }

    /// Records a forward pass of `input` (`[T, H, W]`, exactly `spec.T`
    /// frames) on `g`. With `param_grads` the parameters become gradient
    /// leaves.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: Var,
        mode: Mode,
        param_grads: bool,
    ) -> Result<Forward> {
        let mut ctx = Ctx {
            g,
            mode,
            source: Source::Bind {
                model: self,
                grads: param_grads,
            },
            next_param: 0,
            next_buffer: 0,
            bound: Vec::with_capacity(self.params.len()),
            stats: Vec::new(),
        };
        let logits = run(&mut ctx, &self.spec, input)?;
        if ctx.next_param != self.params.len() || ctx.next_buffer != self.buffers.len() {
            return Err(Error::InvalidSpec(
                "model holds parameters the architecture does not use".into(),
            ));
        }
        Ok(Forward {
            logits,
            params: ctx.bound,
            bn_stats: ctx.stats,
        })
    }

    /// Logits of `s` (`[T', H, W]`, `T' <= T`). Shorter inputs are
    /// zero-filled at the end and the padded frames are dropped again.
    pub fn forward(&self, s: &Tensor, mode: Mode) -> Result<Tensor> {
        let [t, h, w] = match *s.shape() {
            [t, h, w] => [t, h, w],
            ref sh => {
                return Err(Error::shape(
                    "forward",
                    format!("input must be [T, H, W], got {sh:?}"),
                ))
            }
        };
        let full = self.spec.frames;
        if t == 0 || t > full {
            return Err(Error::shape(
                "forward",
                format!("input has {t} frames, model takes 1..={full}"),
            ));
        }
        let padded = pad_time(s, full);
        let mut g = Graph::new();
        let x = g.constant(padded);
        let f = self.forward_graph(&mut g, x, mode, false)?;
        let out = g.value(f.logits);
        if t == full {
            return Ok(out.clone());
        }
        Tensor::new(vec![t, h, w], out.data()[..t * h * w].to_vec())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// `(scorm, other)` counted from the stored tensors.
    pub fn counted_params(&self) -> (usize, usize) {
        let scorm: usize = self.scorms().map(|p| p.value.numel()).sum();
        (scorm, self.param_count() - scorm)
    }

    pub fn scorms(&self) -> impl Iterator<Item = &Named> {
        self.params.iter().filter(|p| p.name.contains(".scorm"))
    }

    /// Folds training-mode statistics into the running buffers, one sample
    /// after another.
    pub fn update_running_stats(&mut self, per_sample: &[Vec<BatchStats>]) -> Result<()> {
        for stats in per_sample {
            if 2 * stats.len() != self.buffers.len() {
                return Err(Error::InvalidArgument(
                    "batch-norm statistics do not match the model".into(),
                ));
            }
            for (i, s) in stats.iter().enumerate() {
                let unbias = if s.count > 1 {
                    s.count as f64 / (s.count - 1) as f64
                } else {
                    1.0
                };
                let (mean, var) = {
                    let (a, b) = self.buffers.split_at_mut(2 * i + 1);
                    (&mut a[2 * i].value, &mut b[0].value)
                };
                for (r, &m) in mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, &v) in var.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
            }
        }
        Ok(())
    }

    /// Rounds every parameter and buffer to f32 precision.
    pub fn quantize(&mut self) {
        for n in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            n.value.round_to_f32();
        }
    }
}

/// `(mean, 1 / std)` of `x`; a flat or empty slice gives scale 1.
pub fn clip_affine(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 1.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if std > 0.0 { 1.0 / std } else { 1.0 })
}

/// Shifts and scales the first `valid` frames of `clip` to zero mean and unit
/// standard deviation; later frames are left at zero.
pub fn standardize(clip: &Tensor, valid: usize) -> Tensor {
    let plane: usize = clip.shape()[1..].iter().product();
    let n = (valid * plane).min(clip.numel());
    let x = &clip.data()[..n];
    let (shift, scale) = clip_affine(x);
    let mut out = Tensor::zeros(clip.shape());
    out.data_mut()[..n]
        .iter_mut()
        .zip(x)
        .for_each(|(o, v)| *o = (v - shift) * scale);
    out
}

/// `[T', H, W]` to `[T, H, W]` with zero frames appended (`T' <= T`).
pub fn pad_time(s: &Tensor, frames: usize) -> Tensor {
    let sh = s.shape();
    if sh[0] == frames {
        return s.clone();
    }
    let mut data = s.data().to_vec();
    data.resize(frames * sh[1] * sh[2], 0.0);
    Tensor::new(vec![frames, sh[1], sh[2]], data).expect("padded size")
}
