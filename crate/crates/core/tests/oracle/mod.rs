//! Test-side oracles shared by the integration suites.
//!
//! `gradient_check` compares analytic gradients against central finite
//! differences over every parameter of a network. It runs its own naive
//! forward pass and, for each perturbed parameter, pushes the perturbation
//! forward as an exact delta over the region it actually reaches. Working in
//! deltas keeps `f(p + h) - f(p)` free of cancellation, so tiny steps stay
//! accurate, and bounding the region keeps a 150K-parameter network checkable
//! in seconds.

#![allow(dead_code)]

use std::time::Instant;

use fpr::nn::{Activation, Layer, Loss, Mode, Network, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Objective of a single-sample check.
#[derive(Debug, Clone)]
pub enum Objective {
    Xent { label: u8 },
    Mse { target: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub parameters: usize,
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst parameter.
    pub worst: (usize, usize),
    pub worst_values: (f64, f64),
    /// Parameters re-measured with a smaller step because a kink was crossed.
    pub retries: usize,
    pub seconds: f64,
}

/// Shape of a per-sample activation; dense vectors are `[n, 1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    c: usize,
    h: usize,
    w: usize,
}

impl Shape {
    fn len(self) -> usize {
        self.c * self.h * self.w
    }
}

/// Sparse activation delta: listed channels over a spatial box, stored
/// `[chans.len()][y1 - y0][x1 - x0]`.
#[derive(Debug, Clone)]
struct Delta {
    chans: Vec<usize>,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    data: Vec<f64>,
}

impl Delta {
    fn empty() -> Self {
        Delta {
            chans: Vec::new(),
            y0: 0,
            y1: 0,
            x0: 0,
            x1: 0,
            data: Vec::new(),
        }
    }

    fn bw(&self) -> usize {
        self.x1 - self.x0
    }

    fn plane(&self) -> usize {
        (self.y1 - self.y0) * self.bw()
    }

    /// Drops channels that are all zero and tightens the box.
    fn shrink(self) -> Self {
        let (bw, plane) = (self.bw(), self.plane());
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        let mut keep = Vec::new();
        for (k, _) in self.chans.iter().enumerate() {
            let p = &self.data[k * plane..(k + 1) * plane];
            let mut any = false;
            for (i, &v) in p.iter().enumerate() {
                if v != 0.0 {
                    any = true;
                    let (y, x) = (self.y0 + i / bw, self.x0 + i % bw);
                    y0 = y0.min(y);
                    y1 = y1.max(y + 1);
                    x0 = x0.min(x);
                    x1 = x1.max(x + 1);
                }
            }
            if any {
                keep.push(k);
            }
        }
        if keep.is_empty() {
            return Delta::empty();
        }
        let nbw = x1 - x0;
        let mut data = Vec::with_capacity(keep.len() * (y1 - y0) * nbw);
        for &k in &keep {
            for y in y0..y1 {
                let row = k * plane + (y - self.y0) * bw + (x0 - self.x0);
                data.extend_from_slice(&self.data[row..row + nbw]);
            }
        }
        Delta {
            chans: keep.iter().map(|&k| self.chans[k]).collect(),
            y0,
            y1,
            x0,
            x1,
            data,
        }
    }
}

/// Baseline state of one layer: input shape, preactivation (conv/dense),
/// output.
struct Step {
    input: Shape,
    output: Shape,
    pre: Vec<f64>,
    out: Vec<f64>,
}

struct Oracle<'a> {
    net: &'a Network<f64>,
    x: Vec<f64>,
    steps: Vec<Step>,
    objective: Objective,
    /// Softmax of the baseline logits, or the baseline residual for MSE.
    base_out: Vec<f64>,
    crossed: std::cell::Cell<bool>,
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::Linear => v,
    }
}

/// Exact `act(z + d) - act(z)`, flagging a kink crossing.
fn act_delta(a: Activation, z: f64, d: f64, crossed: &std::cell::Cell<bool>) -> f64 {
    match a {
        Activation::Linear => d,
        Activation::Relu => {
            let n = z + d;
            match (z > 0.0, n > 0.0) {
                (true, true) => d,
                (false, false) => 0.0,
                (true, false) => {
                    crossed.set(true);
                    -z
                }
                (false, true) => {
                    crossed.set(true);
                    n
                }
            }
        }
    }
}

fn naive_conv(x: &[f64], s: Shape, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let kd = k.data();
    let mut z = vec![0.0; cout * s.h * s.w];
    for o in 0..cout {
        let zo = &mut z[o * s.h * s.w..(o + 1) * s.h * s.w];
        zo.fill(b.data()[o]);
        for c in 0..s.c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = kd[((o * s.c + c) * kh + ky) * kw + kx];
                    for y in 0..s.h {
                        let sy = y as isize + ky as isize - ph as isize;
                        if sy < 0 || sy >= s.h as isize {
                            continue;
                        }
                        for xx in 0..s.w {
                            let sx = xx as isize + kx as isize - pw as isize;
                            if sx >= 0 && sx < s.w as isize {
                                zo[y * s.w + xx] +=
                                    wgt * x[(c * s.h + sy as usize) * s.w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    z
}

fn pool_window(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (2 * y..(2 * y + 2).min(h))
        .flat_map(move |yy| (2 * x..(2 * x + 2).min(w)).map(move |xx| (yy, xx)))
}

impl<'a> Oracle<'a> {
    fn new(net: &'a Network<f64>, x: &[f64], objective: Objective) -> Self {
        let s0 = net.input_shape();
        let mut shape = match s0.len() {
            3 => Shape {
                c: s0[0],
                h: s0[1],
                w: s0[2],
            },
            _ => Shape {
                c: s0.iter().product(),
                h: 1,
                w: 1,
            },
        };
        let mut cur = x.to_vec();
        let mut steps = Vec::new();
        for layer in net.layers() {
            let (out_shape, pre, out) = match layer {
                Layer::Conv(l) => {
                    let z = naive_conv(&cur, shape, &l.kernels, &l.bias);
                    let o = Shape {
                        c: l.kernels.shape()[0],
                        ..shape
                    };
                    let a = z.iter().map(|&v| act(l.activation, v)).collect();
                    (o, z, a)
                }
                Layer::MaxPool(_) => {
                    let o = Shape {
                        c: shape.c,
                        h: shape.h.div_ceil(2),
                        w: shape.w.div_ceil(2),
                    };
                    let mut p = Vec::with_capacity(o.len());
                    for c in 0..shape.c {
                        for y in 0..o.h {
                            for xx in 0..o.w {
                                let m = pool_window(y, xx, shape.h, shape.w)
                                    .map(|(a, b)| cur[(c * shape.h + a) * shape.w + b])
                                    .fold(f64::NEG_INFINITY, f64::max);
                                p.push(m);
                            }
                        }
                    }
                    (o, Vec::new(), p)
                }
                Layer::Dense(l) => {
                    let (n_out, n_in) = (l.weights.shape()[0], l.weights.shape()[1]);
                    let wd = l.weights.data();
                    let z: Vec<f64> = (0..n_out)
                        .map(|j| {
                            l.bias.data()[j]
                                + (0..n_in).map(|i| wd[j * n_in + i] * cur[i]).sum::<f64>()
                        })
                        .collect();
                    let a = z.iter().map(|&v| act(l.activation, v)).collect();
                    (
                        Shape {
                            c: n_out,
                            h: 1,
                            w: 1,
                        },
                        z,
                        a,
                    )
                }
                Layer::Dropout(_) => (shape, Vec::new(), cur.clone()),
            };
            steps.push(Step {
                input: shape,
                output: out_shape,
                pre,
                out: out.clone(),
            });
            shape = out_shape;
            cur = out;
        }
        let base_out = match &objective {
            Objective::Xent { .. } => {
                let m = cur.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = cur.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
            Objective::Mse { target } => cur.iter().zip(target).map(|(o, t)| o - t).collect(),
        };
        Oracle {
            net,
            x: x.to_vec(),
            steps,
            objective,
            base_out,
            crossed: std::cell::Cell::new(false),
        }
    }

    fn input_of(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.x
        } else {
            &self.steps[i - 1].out
        }
    }

    fn logits(&self) -> &[f64] {
        &self.steps.last().unwrap().out
    }

    /// Baseline loss.
    fn loss(&self) -> f64 {
        match &self.objective {
            Objective::Xent { label } => -self.base_out[*label as usize].ln(),
            Objective::Mse { .. } => self.base_out.iter().map(|e| e * e).sum(),
        }
    }

    /// Loss change for an output delta.
    fn loss_delta(&self, d: &Delta) -> f64 {
        let n = self.steps.last().unwrap().output.c;
        let mut full = vec![0.0; n];
        for (k, &c) in d.chans.iter().enumerate() {
            full[c] = d.data[k * d.plane()];
        }
        match &self.objective {
            Objective::Xent { label } => {
                let s: f64 = self
                    .base_out
                    .iter()
                    .zip(&full)
                    .map(|(p, dl)| p * dl.exp_m1())
                    .sum();
                s.ln_1p() - full[*label as usize]
            }
            Objective::Mse { .. } => self
                .base_out
                .iter()
                .zip(&full)
                .map(|(e, dv)| dv * (2.0 * e + dv))
                .sum(),
        }
    }

    /// Applies the activation delta over a preactivation delta laid out on
    /// the output grid of layer `i`.
    fn finish_act(&self, i: usize, a: Activation, mut d: Delta) -> Delta {
        let s = self.steps[i].output;
        let (bw, plane) = (d.bw(), d.plane());
        for (k, &c) in d.chans.iter().enumerate() {
            for y in d.y0..d.y1 {
                for x in d.x0..d.x1 {
                    let idx = k * plane + (y - d.y0) * bw + (x - d.x0);
                    let z = self.steps[i].pre[(c * s.h + y) * s.w + x];
                    d.data[idx] = act_delta(a, z, d.data[idx], &self.crossed);
                }
            }
        }
        d.shrink()
    }

    /// Propagates an input delta through layer `i`.
    fn through(&self, i: usize, d: Delta) -> Delta {
        if d.chans.is_empty() {
            return d;
        }
        let step = &self.steps[i];
        let (si, so) = (step.input, step.output);
        match &self.net.layers()[i] {
            Layer::Dropout(_) => d,
            Layer::Conv(l) => {
                let (kh, kw) = (l.kernels.shape()[2], l.kernels.shape()[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let (y0, y1) = (d.y0.saturating_sub(kh - 1 - ph), (d.y1 + ph).min(so.h));
                let (x0, x1) = (d.x0.saturating_sub(kw - 1 - pw), (d.x1 + pw).min(so.w));
                let (bw, plane) = (x1 - x0, (y1 - y0) * (x1 - x0));
                let (dbw, dplane) = (d.bw(), d.plane());
                let kd = l.kernels.data();
                let mut out = vec![0.0; so.c * plane];
                for o in 0..so.c {
                    let oplane = &mut out[o * plane..(o + 1) * plane];
                    for (k, &c) in d.chans.iter().enumerate() {
                        let dp = &d.data[k * dplane..(k + 1) * dplane];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wgt = kd[((o * si.c + c) * kh + ky) * kw + kx];
                                for y in y0..y1 {
                                    let sy = y as isize + ky as isize - ph as isize;
                                    if sy < d.y0 as isize || sy >= d.y1 as isize {
                                        continue;
                                    }
                                    // x range whose source column lies in the delta box
                                    let lo = (d.x0 as isize - kx as isize + pw as isize)
                                        .max(x0 as isize)
                                        as usize;
                                    let hi = (d.x1 as isize - kx as isize + pw as isize)
                                        .min(x1 as isize);
                                    if hi <= lo as isize {
                                        continue;
                                    }
                                    let hi = hi as usize;
                                    let src0 = (sy as usize - d.y0) * dbw + (lo + kx - pw - d.x0);
                                    let dst0 = (y - y0) * bw + (lo - x0);
                                    let src = &dp[src0..src0 + (hi - lo)];
                                    let dst = &mut oplane[dst0..dst0 + (hi - lo)];
                                    for (a, b) in dst.iter_mut().zip(src) {
                                        *a += wgt * b;
                                    }
                                }
                            }
                        }
                    }
                }
                let nd = Delta {
                    chans: (0..so.c).collect(),
                    y0,
                    y1,
                    x0,
                    x1,
                    data: out,
                };
                self.finish_act(i, l.activation, nd)
            }
            Layer::MaxPool(_) => {
                let base = self.input_of(i);
                let (y0, y1) = (d.y0 / 2, d.y1.div_ceil(2).min(so.h));
                let (x0, x1) = (d.x0 / 2, d.x1.div_ceil(2).min(so.w));
                let (bw, plane) = (x1 - x0, (y1 - y0) * (x1 - x0));
                let (dbw, dplane) = (d.bw(), d.plane());
                let mut out = vec![0.0; d.chans.len() * plane];
                for (k, &c) in d.chans.iter().enumerate() {
                    let get = |y: usize, x: usize| {
                        if y >= d.y0 && y < d.y1 && x >= d.x0 && x < d.x1 {
                            d.data[k * dplane + (y - d.y0) * dbw + (x - d.x0)]
                        } else {
                            0.0
                        }
                    };
                    for oy in y0..y1 {
                        for ox in x0..x1 {
                            let at = |(y, x): (usize, usize)| base[(c * si.h + y) * si.w + x];
                            let mut old = (0, 0);
                            let mut old_v = f64::NEG_INFINITY;
                            let mut new = (0, 0);
                            let mut new_v = f64::NEG_INFINITY;
                            for p in pool_window(oy, ox, si.h, si.w) {
                                if at(p) > old_v {
                                    old_v = at(p);
                                    old = p;
                                }
                                let v = at(p) + get(p.0, p.1);
                                if v > new_v {
                                    new_v = v;
                                    new = p;
                                }
                            }
                            let v = if new == old {
                                get(old.0, old.1)
                            } else {
                                self.crossed.set(true);
                                (at(new) - old_v) + get(new.0, new.1)
                            };
                            out[k * plane + (oy - y0) * bw + (ox - x0)] = v;
                        }
                    }
                }
                Delta {
                    chans: d.chans.clone(),
                    y0,
                    y1,
                    x0,
                    x1,
                    data: out,
                }
                .shrink()
            }
            Layer::Dense(l) => {
                let n_in = l.weights.shape()[1];
                let wd = l.weights.data();
                let (dbw, dplane) = (d.bw(), d.plane());
                let mut pairs = Vec::new();
                for (k, &c) in d.chans.iter().enumerate() {
                    for y in d.y0..d.y1 {
                        for x in d.x0..d.x1 {
                            let v = d.data[k * dplane + (y - d.y0) * dbw + (x - d.x0)];
                            if v != 0.0 {
                                pairs.push(((c * si.h + y) * si.w + x, v));
                            }
                        }
                    }
                }
                let out: Vec<f64> = (0..so.c)
                    .map(|j| pairs.iter().map(|&(idx, v)| wd[j * n_in + idx] * v).sum())
                    .collect();
                let nd = Delta {
                    chans: (0..so.c).collect(),
                    y0: 0,
                    y1: 1,
                    x0: 0,
                    x1: 1,
                    data: out,
                };
                self.finish_act(i, l.activation, nd)
            }
        }
    }

    /// Output delta of layer `i` when its parameter `(tensor, idx)` moves by
    /// `h`; tensor 0 is the weights, 1 the bias.
    fn perturb(&self, i: usize, tensor: usize, idx: usize, h: f64) -> Delta {
        let step = &self.steps[i];
        let (si, so) = (step.input, step.output);
        let x = self.input_of(i);
        match &self.net.layers()[i] {
            Layer::Conv(l) => {
                let plane = so.h * so.w;
                let (o, data, y0, y1, x0, x1) = if tensor == 1 {
                    (idx, vec![h; plane], 0, so.h, 0, so.w)
                } else {
                    let (kh, kw) = (l.kernels.shape()[2], l.kernels.shape()[3]);
                    let (ph, pw) = (kh / 2, kw / 2);
                    let (o, rem) = (idx / (si.c * kh * kw), idx % (si.c * kh * kw));
                    let (c, ky, kx) = (rem / (kh * kw), (rem / kw) % kh, rem % kw);
                    let mut dz = vec![0.0; plane];
                    for y in 0..so.h {
                        let sy = y as isize + ky as isize - ph as isize;
                        if sy < 0 || sy >= si.h as isize {
                            continue;
                        }
                        for xx in 0..so.w {
                            let sx = xx as isize + kx as isize - pw as isize;
                            if sx >= 0 && sx < si.w as isize {
                                dz[y * so.w + xx] =
                                    h * x[(c * si.h + sy as usize) * si.w + sx as usize];
                            }
                        }
                    }
                    (o, dz, 0, so.h, 0, so.w)
                };
                let d = Delta {
                    chans: vec![o],
                    y0,
                    y1,
                    x0,
                    x1,
                    data,
                }
                .shrink();
                if d.chans.is_empty() {
                    return d;
                }
                self.finish_act(i, l.activation, d)
            }
            Layer::Dense(l) => {
                let n_in = l.weights.shape()[1];
                let (j, v) = if tensor == 1 {
                    (idx, h)
                } else {
                    (idx / n_in, h * x[idx % n_in])
                };
                if v == 0.0 {
                    return Delta::empty();
                }
                let d = Delta {
                    chans: vec![j],
                    y0: 0,
                    y1: 1,
                    x0: 0,
                    x1: 1,
                    data: vec![v],
                };
                self.finish_act(i, l.activation, d)
            }
            _ => unreachable!("parameter-free layer"),
        }
    }

    /// `f(p + h) - f(p)` for one parameter, and whether a kink was crossed.
    fn loss_change(&self, i: usize, tensor: usize, idx: usize, h: f64) -> (f64, bool) {
        self.crossed.set(false);
        let mut d = self.perturb(i, tensor, idx, h);
        for j in i + 1..self.steps.len() {
            d = self.through(j, d);
        }
        if d.chans.is_empty() {
            return (0.0, self.crossed.get());
        }
        (self.loss_delta(&d), self.crossed.get())
    }
}

/// Relative error with both-zero counted as exact.
pub fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Checks every parameter of `net` at input `x`. Dropout is treated as the
/// identity (inference mode). Steps that cross a ReLU or max-pool kink are
/// retried with a step 100 times smaller, up to three times.
pub fn gradient_check(net: &Network<f64>, x: &[f64], objective: Objective, h: f64) -> GradReport {
    let start = Instant::now();
    let oracle = Oracle::new(net, x, objective.clone());

    // the oracle's own forward must reproduce the engine's
    let xt = Tensor::new([&[1usize][..], net.input_shape()].concat(), x.to_vec()).unwrap();
    let engine_out = net.infer(&xt).unwrap();
    for (a, b) in engine_out.data().iter().zip(oracle.logits()) {
        assert!(
            (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
            "forward mismatch: engine {a} vs oracle {b}"
        );
    }

    let labels;
    let target;
    let loss = match &objective {
        Objective::Xent { label } => {
            labels = vec![*label];
            Loss::SoftmaxXent { labels: &labels }
        }
        Objective::Mse { target: t } => {
            target = Tensor::new(engine_out.shape().to_vec(), t.clone()).unwrap();
            Loss::Mse { target: &target }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (value, grads) = net.gradients(&xt, &loss, Mode::Infer, &mut rng).unwrap();
    assert!(
        (value - oracle.loss()).abs() <= 1e-9 * (1.0 + value.abs()),
        "loss mismatch {value} vs {}",
        oracle.loss()
    );

    let mut report = GradReport {
        parameters: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        retries: 0,
        seconds: 0.0,
    };
    let mut t = 0;
    for (i, layer) in net.layers().iter().enumerate() {
        if !matches!(layer, Layer::Conv(_) | Layer::Dense(_)) {
            continue;
        }
        for tensor in 0..2 {
            let g = grads.tensors[t].data();
            for (idx, &a) in g.iter().enumerate() {
                let mut step = h;
                let mut n = 0.0;
                for attempt in 0..4 {
                    let (up, c1) = oracle.loss_change(i, tensor, idx, step);
                    let (down, c2) = oracle.loss_change(i, tensor, idx, -step);
                    n = (up - down) / (2.0 * step);
                    if !(c1 || c2) || attempt == 3 {
                        break;
                    }
                    report.retries += 1;
                    step /= 100.0;
                }
                let e = rel_error(a, n);
                if e > report.max_rel_error {
                    report.max_rel_error = e;
                    report.worst = (t, idx);
                    report.worst_values = (a, n);
                }
                report.parameters += 1;
            }
            t += 1;
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    report
}
