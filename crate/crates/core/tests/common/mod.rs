//! Helpers shared by the integration tests: random tensors, a finite
//! difference gradient checker and brute-force operator oracles.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempro_core::network::{tpro, ConvKind, Layer, Norm, BN_EPS};
use tempro_core::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of the
/// finite-difference step.
pub fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces `y` to a scalar with a fixed random projection so every output
/// element contributes a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    if g.value(y).numel() == 1 {
        return Ok(y);
    }
    let shape = g.value(y).shape().to_vec();
    let w = random(&shape, &mut rng(seed ^ 0x9e37_79b9));
    let p = g.mul_const(y, w)?;
    g.sum(p)
}

fn scalar<F>(f: &F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let y = f(&mut g, &vars).expect("forward");
    let s = project(&mut g, y, seed).expect("projection");
    g.value(s).item().expect("scalar")
}

/// Worst relative error `||a - n|| / max(||a||, ||n||)` between the analytic
/// gradient `a` and central differences `n`, over every input.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vars).expect("forward");
    let s = project(&mut g, y, seed).expect("projection");
    g.backward(s).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut numeric = vec![0.0; x.numel()];
        let mut probe: Vec<Tensor> = inputs.to_vec();
        for (j, n) in numeric.iter_mut().enumerate() {
            let base = x.data()[j];
            probe[i].data_mut()[j] = base + FD_STEP;
            let up = scalar(&f, &probe, seed);
            probe[i].data_mut()[j] = base - FD_STEP;
            let down = scalar(&f, &probe, seed);
            probe[i].data_mut()[j] = base;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Zero-padded read of `[C, T, H, W]` data.
pub fn at(x: &Tensor, c: usize, t: isize, y: isize, xx: isize) -> f64 {
    let s = x.shape();
    if t < 0 || y < 0 || xx < 0 || t >= s[1] as isize || y >= s[2] as isize || xx >= s[3] as isize {
        return 0.0;
    }
    x.data()[((c * s[1] + t as usize) * s[2] + y as usize) * s[3] + xx as usize]
}

fn offset(i: usize, extent: usize, dil: usize) -> isize {
    (i as isize - (extent as isize - 1) / 2) * dil as isize
}

/// Plain six-loop cross-correlation with centered odd kernels.
pub fn naive_conv3d(x: &Tensor, k: &Tensor, dil: [usize; 3]) -> Tensor {
    let [ci, t, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kt, kh, kw] = [
        k.shape()[0],
        k.shape()[1],
        k.shape()[2],
        k.shape()[3],
        k.shape()[4],
    ];
    let mut out = Tensor::zeros(&[co, t, h, w]);
    let mut idx = 0;
    for o in 0..co {
        for tt in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for a in 0..kt {
                            for b in 0..kh {
                                for d in 0..kw {
                                    let kv = k.data()[(((o * ci + c) * kt + a) * kh + b) * kw + d];
                                    acc += kv
                                        * at(
                                            x,
                                            c,
                                            tt as isize + offset(a, kt, dil[0]),
                                            y as isize + offset(b, kh, dil[1]),
                                            xx as isize + offset(d, kw, dil[2]),
                                        );
                                }
                            }
                        }
                    }
                    out.data_mut()[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Temporal difference convolution in its defining form:
/// `sum_j w_j (2 f(t_j) - f(t_j + d) - f(t_j - d))` at every temporal tap
/// `t_j` of an `l`-tap kernel with dilation `d`.
pub fn naive_td_conv(x: &Tensor, wt: &Tensor, dil: [usize; 3]) -> Tensor {
    let [ci, t, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, l, kh, kw] = [
        wt.shape()[0],
        wt.shape()[1],
        wt.shape()[2],
        wt.shape()[3],
        wt.shape()[4],
    ];
    let d = dil[0] as isize;
    Tensor::from_fn(&[co, t, h, w], |i| {
        let (o, tt, y, xx) = (i / (t * h * w), (i / (h * w)) % t, (i / w) % h, i % w);
        let mut acc = 0.0;
        for c in 0..ci {
            for j in 0..l {
                for b in 0..kh {
                    for e in 0..kw {
                        let wv = wt.data()[(((o * ci + c) * l + j) * kh + b) * kw + e];
                        let tj = tt as isize + offset(j, l, dil[0]);
                        let yy = y as isize + offset(b, kh, dil[1]);
                        let xv = xx as isize + offset(e, kw, dil[2]);
                        let f = |dt: isize| at(x, c, tj + dt, yy, xv);
                        acc += wv * (2.0 * f(0) - f(d) - f(-d));
                    }
                }
            }
        }
        acc
    })
}

/// Spatial difference convolution in its defining form:
/// `sum_i w_i (x_c - x_i) + w_c x_c` over each `k x k` window.
pub fn naive_sd_conv(x: &Tensor, wt: &Tensor, dil: [usize; 3]) -> Tensor {
    let [ci, t, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, l, k, _] = [
        wt.shape()[0],
        wt.shape()[1],
        wt.shape()[2],
        wt.shape()[3],
        wt.shape()[4],
    ];
    let center = (k * k) / 2;
    Tensor::from_fn(&[co, t, h, w], |i| {
        let (o, tt, y, xx) = (i / (t * h * w), (i / (h * w)) % t, (i / w) % h, i % w);
        let mut acc = 0.0;
        for c in 0..ci {
            for j in 0..l {
                let tj = tt as isize + offset(j, l, dil[0]);
                let xc = at(x, c, tj, y as isize, xx as isize);
                for q in 0..k * k {
                    let wv = wt.data()[((o * ci + c) * l + j) * k * k + q];
                    if q == center {
                        acc += wv * xc;
                        continue;
                    }
                    let yy = y as isize + offset(q / k, k, dil[1]);
                    let xv = xx as isize + offset(q % k, k, dil[2]);
                    acc += wv * (xc - at(x, c, tj, yy, xv));
                }
            }
        }
        acc
    })
}

/// `out[c, :, y, x] = x[c, :, y, x] * W` by explicit loops.
pub fn naive_matmul_time(x: &Tensor, w: &Tensor) -> Tensor {
    let [c, t, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    Tensor::from_fn(&[c, t, h, wd], |i| {
        let (ch, j, y, xx) = (i / (t * h * wd), (i / (h * wd)) % t, (i / wd) % h, i % wd);
        (0..t)
            .map(|s| at(x, ch, s as isize, y as isize, xx as isize) * w.data()[s * t + j])
            .sum()
    })
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One randomized case per differentiable operation: its name, inputs and
/// the recorded computation.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut r = rng(seed);
    let feat = [2, 4, 2, 2];
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    let mut case = |name, inputs: Vec<Tensor>, f: OpFn| cases.push((name, inputs, f));

    case(
        "add",
        vec![random(&feat, &mut r), random(&feat, &mut r)],
        Box::new(|g, v| g.add(v[0], v[1])),
    );
    case(
        "mul",
        vec![random(&feat, &mut r), random(&feat, &mut r)],
        Box::new(|g, v| g.mul(v[0], v[1])),
    );
    let c = random(&feat, &mut r);
    case(
        "mul_const",
        vec![random(&feat, &mut r)],
        Box::new(move |g, v| g.mul_const(v[0], c.clone())),
    );
    case(
        "scale",
        vec![random(&feat, &mut r)],
        Box::new(|g, v| g.scale(v[0], -2.5)),
    );
    case(
        "sum",
        vec![random(&feat, &mut r)],
        Box::new(|g, v| g.sum(v[0])),
    );
    case(
        "relu",
        vec![random_off_zero(&feat, &mut r)],
        Box::new(|g, v| g.relu(v[0])),
    );
    let wide = Tensor::from_fn(&feat, |_| r.random_range(-4.0..4.0));
    case("sigmoid", vec![wide], Box::new(|g, v| g.sigmoid(v[0])));
    case(
        "reshape",
        vec![random(&feat, &mut r)],
        Box::new(|g, v| g.reshape(v[0], &[8, 4])),
    );
    case(
        "matmul_time",
        vec![random(&[2, 4, 2, 3], &mut r), random(&[4, 4], &mut r)],
        Box::new(|g, v| g.matmul_time(v[0], v[1])),
    );
    case(
        "conv3d",
        vec![
            random(&[2, 5, 4, 4], &mut r),
            random(&[3, 2, 3, 3, 3], &mut r),
        ],
        Box::new(|g, v| g.conv3d(v[0], v[1], [2, 1, 2])),
    );
    case(
        "td_conv",
        vec![
            random(&[2, 7, 2, 3], &mut r),
            random(&[2, 2, 3, 1, 1], &mut r),
        ],
        Box::new(|g, v| g.td_conv(v[0], v[1], [2, 1, 1])),
    );
    case(
        "td_conv_3x3x3",
        vec![
            random(&[2, 5, 4, 4], &mut r),
            random(&[2, 2, 3, 3, 3], &mut r),
        ],
        Box::new(|g, v| g.td_conv(v[0], v[1], [2, 1, 1])),
    );
    case(
        "sd_conv",
        vec![
            random(&[2, 4, 5, 5], &mut r),
            random(&[2, 2, 3, 3, 3], &mut r),
        ],
        Box::new(|g, v| g.sd_conv(v[0], v[1], [1, 2, 2])),
    );
    case(
        "channel_bias",
        vec![random(&feat, &mut r), random(&[2], &mut r)],
        Box::new(|g, v| g.channel_bias(v[0], v[1])),
    );
    case(
        "batch_norm_train",
        vec![
            random(&feat, &mut r),
            random(&[2], &mut r),
            random(&[2], &mut r),
        ],
        Box::new(|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)),
    );
    let (mean, var) = (vec![0.3, -0.2], vec![0.5, 2.0]);
    case(
        "batch_norm_eval",
        vec![
            random(&feat, &mut r),
            random(&[2], &mut r),
            random(&[2], &mut r),
        ],
        Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
    );
    case(
        "max_pool2",
        vec![random(&[2, 3, 4, 6], &mut r)],
        Box::new(|g, v| g.max_pool2(v[0])),
    );
    case(
        "upsample2",
        vec![random(&[2, 3, 2, 3], &mut r)],
        Box::new(|g, v| g.upsample2(v[0])),
    );
    case(
        "concat_channels",
        vec![random(&[1, 4, 2, 2], &mut r), random(&[3, 4, 2, 2], &mut r)],
        Box::new(|g, v| g.concat_channels(&[v[0], v[1]])),
    );
    case(
        "slice_channels",
        vec![random(&[4, 3, 2, 2], &mut r)],
        Box::new(|g, v| g.slice_channels(v[0], 1, 2)),
    );
    let mask = Tensor::from_fn(&[3, 4, 4], |_| f64::from(u8::from(r.random_bool(0.3))));
    case(
        "soft_iou",
        vec![Tensor::from_fn(&[3, 4, 4], |_| r.random_range(-3.0..3.0))],
        Box::new(move |g, v| g.soft_iou(v[0], &mask, 1e-6)),
    );
    cases
}

/// Worst relative gradient error of every operation over `seeds`.
pub fn op_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in seeds {
        for (i, (name, inputs, f)) in op_cases(seed).into_iter().enumerate() {
            let err = gradcheck(&inputs, seed, f);
            match worst.get_mut(i) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    worst
}

fn bn_eval(g: &mut Graph, c: usize, r: &mut rand_chacha::ChaCha8Rng) -> Norm {
    let gamma = g.leaf(Tensor::from_fn(&[c], |_| r.random_range(0.5..1.5)), false);
    let beta = g.leaf(Tensor::from_fn(&[c], |_| r.random_range(-0.5..0.5)), false);
    let mean = (0..c).map(|_| r.random_range(-0.3..0.3)).collect();
    let var = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    Norm::Eval {
        gamma,
        beta,
        mean,
        var,
    }
}

/// Largest deviation of the temporal-probe module from a per-pixel loop on a
/// random `[8, 12, 6, 6]` input with four probes.
pub fn tpro_oracle_error(seed: u64) -> f64 {
    let (c, t, h, w, m) = (8, 12, 6, 6, 4);
    let mut r = rng(seed);
    let x = random(&[c, t, h, w], &mut r);
    let ws: Vec<Tensor> = (0..m).map(|_| random(&[t, t], &mut r)).collect();
    let p = random(&[c, c, 1, 1, 1], &mut r);

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let sv: Vec<Var> = ws.iter().map(|s| g.leaf(s.clone(), false)).collect();
    let pv = g.leaf(p.clone(), false);
    let norm = bn_eval(&mut g, c, &mut r);
    let Norm::Eval {
        gamma,
        beta,
        ref mean,
        ref var,
    } = norm
    else {
        unreachable!()
    };
    let (gm, bt) = (g.value(gamma).clone(), g.value(beta).clone());
    let (mean, var) = (mean.clone(), var.clone());
    let fuse = Layer {
        weight: pv,
        kind: ConvKind::Plain,
        dilation: [1, 1, 1],
        norm,
    };
    let y = tpro(&mut g, xv, &sv, &fuse, &mut Vec::new()).unwrap();
    let got = g.value(y);

    let group = c / m;
    let mut worst: f64 = 0.0;
    for yy in 0..h {
        for xx in 0..w {
            // Time vectors of this pixel after each group's SCorM.
            let mut z = vec![vec![0.0; t]; c];
            for (ch, zc) in z.iter_mut().enumerate() {
                let s = &ws[ch / group];
                for j in 0..t {
                    zc[j] = (0..t)
                        .map(|i| x.data()[((ch * t + i) * h + yy) * w + xx] * s.data()[i * t + j])
                        .sum();
                }
            }
            for o in 0..c {
                for j in 0..t {
                    let u: f64 = (0..c).map(|ch| p.data()[o * c + ch] * z[ch][j]).sum();
                    let bn = (u - mean[o]) / (var[o] + BN_EPS).sqrt() * gm.data()[o] + bt.data()[o];
                    let want = bn.max(0.0);
                    worst = worst.max((got.data()[((o * t + j) * h + yy) * w + xx] - want).abs());
                }
            }
        }
    }
    worst
}

/// 8-connected components of the nonzero pixels of one `h x w` frame, by
/// breadth-first flood fill.
pub fn flood_components(frame: &[f64], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for s in 0..h * w {
        if seen[s] || frame[s] <= 0.5 {
            continue;
        }
        seen[s] = true;
        let mut queue = std::collections::VecDeque::from([s]);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && frame[q] > 0.5 {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// ROC area by sweeping every distinct confidence value, counting hits and
/// false alarms from scratch at each threshold.
pub fn exhaustive_auc(conf: &Tensor, gt: &Tensor, radius: f64) -> f64 {
    let [t, h, w] = [conf.shape()[0], conf.shape()[1], conf.shape()[2]];
    let mut refs = Vec::new();
    let mut background = Vec::new();
    for f in 0..t {
        let c = conf.frame(f);
        let comps = flood_components(gt.frame(f), h, w);
        let near = |p: usize, q: usize| {
            let (dy, dx) = (
                (p / w) as f64 - (q / w) as f64,
                (p % w) as f64 - (q % w) as f64,
            );
            dy * dy + dx * dx <= radius * radius
        };
        for p in 0..h * w {
            if !comps.iter().flatten().any(|&q| near(p, q)) {
                background.push(c[p]);
            }
        }
        for comp in &comps {
            let n = comp.len() as f64;
            let cy = comp.iter().map(|&p| (p / w) as f64).sum::<f64>() / n;
            let cx = comp.iter().map(|&p| (p % w) as f64).sum::<f64>() / n;
            let d = |p: usize| ((p % w) as f64 - cx).hypot((p / w) as f64 - cy);
            let mut best = comp[0];
            for &p in comp {
                if d(p) < d(best) {
                    best = p;
                }
            }
            refs.push(c[best]);
        }
    }
    let total = conf.numel() as f64;
    let mut ths: Vec<f64> = conf.data().to_vec();
    ths.sort_by(|a, b| b.total_cmp(a));
    ths.dedup();
    let point = |th: f64| {
        let pd = refs.iter().filter(|&&v| v >= th).count() as f64 / refs.len() as f64;
        let fa = background.iter().filter(|&&v| v >= th).count() as f64 / total;
        (fa, pd)
    };
    let mut curve = vec![(0.0, point(ths[0]).1)];
    curve.extend(ths.iter().map(|&th| point(th)));
    curve.push((1.0, 1.0));
    curve
        .windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[0].1 + p[1].1) / 2.0)
        .sum()
}
