use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    MatmulTime(Var, Var),
    Conv3d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    TdKernel(Var),
    SdKernel(Var),
    ChannelBias(Var, Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    SoftIou {
        logits: Var,
        mask: Tensor,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A tape of recorded operations. Nodes are appended in execution order, so
/// every op's inputs precede it and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn features(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [c, tt, h, w] => Ok([c, tt, h, w]),
        ref s => Err(Error::shape(
            op,
            format!("expected [C, T, H, W], got {s:?}"),
        )),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Takes the gradient buffer of `v` out of the node list (allocating zeros on
/// first use), lets `f` accumulate into it with read access to all values, and
/// puts it back. Does nothing for nodes that do not require gradients.
fn accumulate(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    let mut buf = nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; n]);
    f(&mut buf, nodes);
    nodes[v.0].grad = Some(buf);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let x = self.value(a);
        same_shape("mul_const", x, &c)?;
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Applies a `[T, T]` matrix to the time vector of every `(channel, pixel)`
    /// of `[C, T, H, W]` features: `out[c, :, y, x] = x[c, :, y, x] * W`.
    pub fn matmul_time(&mut self, x: Var, w: Var) -> Result<Var> {
        let [c, t, h, wd] = features("matmul_time", self.value(x))?;
        let ws = self.value(w).shape();
        if ws != [t, t] {
            return Err(Error::shape(
                "matmul_time",
                format!("features have T={t}, matrix is {ws:?}"),
            ));
        }
        let data =
            kernels::matmul_time_forward(c, t, h * wd, self.value(x).data(), self.value(w).data());
        let out = Tensor::new(vec![c, t, h, wd], data)?;
        self.push("matmul_time", out, Op::MatmulTime(x, w), &[x, w])
    }

    /// Size-preserving zero-padded 3-D cross-correlation. Kernel extents must be
    /// odd so that the padding is symmetric.
    pub fn conv3d(&mut self, x: Var, k: Var, dilation: [usize; 3]) -> Result<Var> {
        let [c_in, t, h, w] = features("conv3d", self.value(x))?;
        let ks = self.value(k).shape().to_vec();
        let [c_out, kc, kt, kh, kw] = match ks[..] {
            [a, b, c, d, e] => [a, b, c, d, e],
            _ => {
                return Err(Error::shape(
                    "conv3d",
                    format!("kernel must be 5-D, got {ks:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv3d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if dilation.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "conv3d dilation must be positive, got {dilation:?}"
            )));
        }
        if [kt, kh, kw].iter().any(|&e| e % 2 == 0) {
            return Err(Error::shape(
                "conv3d",
                format!("kernel extents must be odd, got {ks:?}"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            t,
            h,
            w,
            kt,
            kh,
            kw,
            dil: dilation,
        };
        let data = kernels::conv3d_forward(&geom, self.value(x).data(), self.value(k).data());
        let out = Tensor::new(vec![c_out, t, h, w], data)?;
        self.push("conv3d", out, Op::Conv3d { x, k, geom }, &[x, k])
    }

    /// Direct-form kernel of a temporal difference convolution (see
    /// [`Graph::td_conv`]); differentiable with respect to `w`.
    pub fn td_kernel(&mut self, w: Var) -> Result<Var> {
        let shape = self.value(w).shape().to_vec();
        if shape.len() != 5 || shape[2] == 0 {
            return Err(Error::shape(
                "td_kernel",
                format!("expected [Co, Ci, l, kh, kw], got {shape:?}"),
            ));
        }
        let (eshape, data) = kernels::td_kernel_forward(&shape, self.value(w).data());
        let out = Tensor::new(eshape, data)?;
        self.push("td_kernel", out, Op::TdKernel(w), &[w])
    }

    /// Direct-form kernel of a spatial (center-pixel) difference convolution;
    /// differentiable with respect to `w`.
    pub fn sd_kernel(&mut self, w: Var) -> Result<Var> {
        let shape = self.value(w).shape().to_vec();
        if shape.len() != 5 {
            return Err(Error::shape(
                "sd_kernel",
                format!("expected [Co, Ci, l, k, k], got {shape:?}"),
            ));
        }
        if shape[3] != shape[4] || shape[3].is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "spatial difference kernels need an odd square window, got {}x{}",
                shape[3], shape[4]
            )));
        }
        let data = kernels::sd_kernel_forward(&shape, self.value(w).data());
        let out = Tensor::new(shape, data)?;
        self.push("sd_kernel", out, Op::SdKernel(w), &[w])
    }

    /// Temporal difference convolution: every window computes
    /// `sum_t w_t (2 f_t - f_{t+1} - f_{t-1})`, evaluated as a plain convolution
    /// with the reweighted `l + 2` tap kernel.
    pub fn td_conv(&mut self, x: Var, w: Var, dilation: [usize; 3]) -> Result<Var> {
        let k = self.td_kernel(w)?;
        self.conv3d(x, k, dilation)
    }

    /// Spatial difference convolution: `x_c * sum_i w_i - sum_{i != c} w_i x_i`
    /// over each `k x k` window, for every temporal tap.
    pub fn sd_conv(&mut self, x: Var, w: Var, dilation: [usize; 3]) -> Result<Var> {
        let k = self.sd_kernel(w)?;
        self.conv3d(x, k, dilation)
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [c, t, h, w] = features("channel_bias", self.value(x))?;
        let bias = self.value(b);
        if bias.numel() != c {
            return Err(Error::shape(
                "channel_bias",
                format!("{} biases for {c} channels", bias.numel()),
            ));
        }
        let vol = t * h * w;
        let mut data = self.value(x).data().to_vec();
        for (ch, chunk) in data.chunks_mut(vol).enumerate() {
            let bv = bias.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::new(vec![c, t, h, w], data)?;
        self.push("channel_bias", out, Op::ChannelBias(x, b), &[x, b])
    }

    fn check_bn_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("affine parameters must have {c} entries"),
            ));
        }
        Ok(())
    }

    /// Batch norm using the statistics of `x` itself (per channel over T, H, W).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let [c, t, h, w] = features("batch_norm", self.value(x))?;
        self.check_bn_params(c, gamma, beta)?;
        let vol = t * h * w;
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut stats = BatchStats {
            mean: vec![0.0; c],
            var: vec![0.0; c],
            count: vol,
        };
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let src = &xs[ch * vol..(ch + 1) * vol];
            let mean = src.iter().sum::<f64>() / vol as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..vol {
                let xh = (src[i] - mean) * inv;
                xhat[ch * vol + i] = xh;
                out[ch * vol + i] = g[ch] * xh + b[ch];
            }
            stats.mean[ch] = mean;
            stats.var[ch] = var;
            inv_std[ch] = inv;
        }
        let out = Tensor::new(vec![c, t, h, w], out)?;
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics; an affine map per channel.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [c, t, h, w] = features("batch_norm", self.value(x))?;
        self.check_bn_params(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running statistics must have {c} entries"),
            ));
        }
        let vol = t * h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = self.value(x).data().to_vec();
        for (ch, chunk) in data.chunks_mut(vol).enumerate() {
            let s = g[ch] * inv_std[ch];
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * s + b[ch]);
        }
        let out = Tensor::new(vec![c, t, h, w], data)?;
        self.push(
            "batch_norm",
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// 2x2, stride-2 max pooling over the spatial axes of `[C, T, H, W]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [c, t, h, w] = features("max_pool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("spatial size {h}x{w} is not even"),
            ));
        }
        let (data, argmax) = kernels::max_pool2(c * t, h, w, self.value(x).data());
        let out = Tensor::new(vec![c, t, h / 2, w / 2], data)?;
        self.push("max_pool2", out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Nearest-neighbour 2x spatial upsampling of `[C, T, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [c, t, h, w] = features("upsample2", self.value(x))?;
        let data = kernels::upsample2(c * t, h, w, self.value(x).data());
        let out = Tensor::new(vec![c, t, 2 * h, 2 * w], data)?;
        self.push("upsample2", out, Op::Upsample2(x), &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let [_, t, h, w] = features("concat_channels", self.value(first))?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let [c, pt, ph, pw] = features("concat_channels", self.value(p))?;
            if (pt, ph, pw) != (t, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("[T, H, W] {:?} vs {:?}", (t, h, w), (pt, ph, pw)),
                ));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![c_total, t, h, w], data)?;
        self.push("concat_channels", out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [c, t, h, w] = features("slice_channels", self.value(x))?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let vol = t * h * w;
        let data = self.value(x).data()[start * vol..(start + len) * vol].to_vec();
        let out = Tensor::new(vec![len, t, h, w], data)?;
        self.push("slice_channels", out, Op::SliceChannels { x, start }, &[x])
    }

    /// `1 - (sum p m + eps) / (sum p + sum m - sum p m + eps)` with `p = sigmoid(logits)`.
    pub fn soft_iou(&mut self, logits: Var, mask: &Tensor, eps: f64) -> Result<Var> {
        let z = self.value(logits);
        same_shape("soft_iou", z, mask)?;
        let (inter, union) = soft_iou_terms(z.data(), mask.data());
        let loss = 1.0 - (inter + eps) / (union + eps);
        let op = Op::SoftIou {
            logits,
            mask: mask.clone(),
            eps,
        };
        self.push("soft_iou", Tensor::scalar(loss), op, &[logits])
    }

    /// Reverse sweep from a scalar `loss`. Gradients from any previous call
    /// are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward(
                "loss is detached from every tensor that requires grad".into(),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(id);
            backprop(&rest[0], &g, before);
            rest[0].grad = Some(g);
        }
        Ok(())
    }
}

fn soft_iou_terms(z: &[f64], m: &[f64]) -> (f64, f64) {
    let (mut inter, mut sp, mut sm) = (0.0, 0.0, 0.0);
    for (&zi, &mi) in z.iter().zip(m) {
        let p = sigmoid(zi);
        inter += p * mi;
        sp += p;
        sm += mi;
    }
    (inter, sp + sm - inter)
}

fn backprop(node: &Node, g: &[f64], nodes: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                accumulate(nodes, v, |buf, _| {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                });
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            accumulate(nodes, a, |buf, ns| {
                let y = ns[b.0].value.data();
                for i in 0..buf.len() {
                    buf[i] += g[i] * y[i];
                }
            });
            accumulate(nodes, b, |buf, ns| {
                let x = ns[a.0].value.data();
                for i in 0..buf.len() {
                    buf[i] += g[i] * x[i];
                }
            });
        }
        Op::MulConst(a, c) => accumulate(nodes, *a, |buf, _| {
            for ((d, s), k) in buf.iter_mut().zip(g).zip(c.data()) {
                *d += s * k;
            }
        }),
        Op::Scale(a, s) => accumulate(nodes, *a, |buf, _| {
            buf.iter_mut().zip(g).for_each(|(d, u)| *d += u * s);
        }),
        Op::Sum(a) => accumulate(nodes, *a, |buf, _| buf.iter_mut().for_each(|d| *d += g[0])),
        Op::Relu(a) => {
            let a = *a;
            accumulate(nodes, a, |buf, ns| {
                let x = ns[a.0].value.data();
                for i in 0..buf.len() {
                    if x[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            })
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(nodes, *a, |buf, _| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            })
        }
        Op::Reshape(a) => accumulate(nodes, *a, |buf, _| {
            buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
        }),
        Op::MatmulTime(x, w) => {
            let (x, w) = (*x, *w);
            let [c, t, h, wd] = match *nodes[x.0].value.shape() {
                [a, b, c, d] => [a, b, c, d],
                _ => unreachable!(),
            };
            accumulate(nodes, x, |buf, ns| {
                kernels::matmul_time_backward(
                    c,
                    t,
                    h * wd,
                    ns[x.0].value.data(),
                    ns[w.0].value.data(),
                    g,
                    Some(buf),
                    None,
                )
            });
            accumulate(nodes, w, |buf, ns| {
                kernels::matmul_time_backward(
                    c,
                    t,
                    h * wd,
                    ns[x.0].value.data(),
                    ns[w.0].value.data(),
                    g,
                    None,
                    Some(buf),
                )
            });
        }
        Op::Conv3d { x, k, geom } => {
            let (x, k) = (*x, *k);
            accumulate(nodes, x, |buf, ns| {
                kernels::conv3d_backward_input(geom, g, ns[k.0].value.data(), buf)
            });
            accumulate(nodes, k, |buf, ns| {
                kernels::conv3d_backward_kernel(geom, g, ns[x.0].value.data(), buf)
            });
        }
        Op::TdKernel(w) => {
            let w = *w;
            let shape = nodes[w.0].value.shape().to_vec();
            accumulate(nodes, w, |buf, _| {
                kernels::td_kernel_backward(&shape, g, buf)
            });
        }
        Op::SdKernel(w) => {
            let w = *w;
            let shape = nodes[w.0].value.shape().to_vec();
            accumulate(nodes, w, |buf, _| {
                kernels::sd_kernel_backward(&shape, g, buf)
            });
        }
        Op::ChannelBias(x, b) => {
            accumulate(nodes, *x, |buf, _| {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
            });
            let c = nodes[b.0].value.numel();
            let vol = g.len() / c;
            accumulate(nodes, *b, |buf, _| {
                for ch in 0..c {
                    buf[ch] += g[ch * vol..(ch + 1) * vol].iter().sum::<f64>();
                }
            });
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = inv_std.len();
            let vol = g.len() / c;
            let gam = nodes[gamma.0].value.data().to_vec();
            accumulate(nodes, *x, |buf, _| {
                let n = vol as f64;
                for ch in 0..c {
                    let r = ch * vol..(ch + 1) * vol;
                    let (gs, xs) = (&g[r.clone()], &xhat[r.clone()]);
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    let k = gam[ch] * inv_std[ch] / n;
                    for (i, d) in buf[r].iter_mut().enumerate() {
                        *d += k * (n * gs[i] - sum_g - xs[i] * sum_gx);
                    }
                }
            });
            accumulate(nodes, *gamma, |buf, _| {
                for (ch, b) in buf.iter_mut().enumerate().take(c) {
                    let r = ch * vol..(ch + 1) * vol;
                    *b += g[r.clone()]
                        .iter()
                        .zip(&xhat[r])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            });
            accumulate(nodes, *beta, |buf, _| {
                for ch in 0..c {
                    buf[ch] += g[ch * vol..(ch + 1) * vol].iter().sum::<f64>();
                }
            });
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let (x, gamma) = (*x, *gamma);
            let c = inv_std.len();
            let vol = g.len() / c;
            let gam = nodes[gamma.0].value.data().to_vec();
            accumulate(nodes, x, |buf, _| {
                for ch in 0..c {
                    let s = gam[ch] * inv_std[ch];
                    for i in ch * vol..(ch + 1) * vol {
                        buf[i] += g[i] * s;
                    }
                }
            });
            accumulate(nodes, gamma, |buf, ns| {
                let xs = ns[x.0].value.data();
                for ch in 0..c {
                    let r = ch * vol..(ch + 1) * vol;
                    let acc: f64 = g[r.clone()]
                        .iter()
                        .zip(&xs[r])
                        .map(|(a, v)| a * (v - mean[ch]))
                        .sum();
                    buf[ch] += acc * inv_std[ch];
                }
            });
            accumulate(nodes, *beta, |buf, _| {
                for ch in 0..c {
                    buf[ch] += g[ch * vol..(ch + 1) * vol].iter().sum::<f64>();
                }
            });
        }
        Op::MaxPool2 { x, argmax } => accumulate(nodes, *x, |buf, _| {
            for (o, &src) in argmax.iter().enumerate() {
                buf[src] += g[o];
            }
        }),
        Op::Upsample2(x) => {
            let x = *x;
            let s = nodes[x.0].value.shape().to_vec();
            accumulate(nodes, x, |buf, _| {
                kernels::upsample2_backward(s[0] * s[1], s[2], s[3], g, buf)
            });
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p.0].value.numel();
                accumulate(nodes, p, |buf, _| {
                    buf.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(d, s)| *d += s)
                });
                off += n;
            }
        }
        Op::SliceChannels { x, start } => {
            let s = nodes[x.0].value.shape().to_vec();
            let vol = s[1] * s[2] * s[3];
            let off = start * vol;
            accumulate(nodes, *x, |buf, _| {
                buf[off..off + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, s)| *d += s)
            });
        }
        Op::SoftIou { logits, mask, eps } => {
            let logits = *logits;
            accumulate(nodes, logits, |buf, ns| {
                let z = ns[logits.0].value.data();
                let m = mask.data();
                let (inter, union) = soft_iou_terms(z, m);
                let (num, den) = (inter + eps, union + eps);
                for i in 0..buf.len() {
                    let p = sigmoid(z[i]);
                    // d(loss)/dp = -(m (den) - num (1 - m)) / den^2
                    let dldp = -(m[i] * den - num * (1.0 - m[i])) / (den * den);
                    buf[i] += g[0] * dldp * p * (1.0 - p);
                }
            });
        }
    }
}
