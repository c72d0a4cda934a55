//! Layer kernels. Every layer works on a batch whose leading axis is the
//! sample index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm_nt, matmul, Mat, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output; ReLU'(0) = 0.
    #[inline]
    fn grad_from_output<T: Real>(self, y: T, dy: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    dy
                } else {
                    T::zero()
                }
            }
            Activation::Linear => dy,
        }
    }
}

/// Fully-connected layer `h = act(b + W h_prev)`, `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weights: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }

    pub fn new(weights: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape() != [weights.shape()[0]] {
            return Err(Error::ShapeMismatch(format!(
                "dense weights {:?} with bias {:?}",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, inputs, outputs) = (x.batch(), self.inputs(), self.outputs());
        if x.item_len() != inputs {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects {inputs} inputs, got {}",
                x.item_len()
            )));
        }
        let mut out = vec![T::zero(); batch * outputs];
        for row in out.chunks_exact_mut(outputs) {
            row.copy_from_slice(self.bias.data());
        }
        matmul(
            Mat::new(x.data(), batch, inputs),
            Mat::new(self.weights.data(), outputs, inputs).t(),
            &mut out,
            true,
        );
        for v in &mut out {
            *v = self.activation.apply(*v);
        }
        Tensor::new(vec![batch, outputs], out)
    }

    /// Returns `(dW, db, dx)` given the layer input, its output and the
    /// upstream gradient.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (batch, inputs, outputs) = (x.batch(), self.inputs(), self.outputs());
        let dpre: Vec<T> = y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&yv, &g)| self.activation.grad_from_output(yv, g))
            .collect();
        let mut dw = vec![T::zero(); outputs * inputs];
        matmul(
            Mat::new(&dpre, batch, outputs).t(),
            Mat::new(x.data(), batch, inputs),
            &mut dw,
            false,
        );
        let mut db = vec![T::zero(); outputs];
        for row in dpre.chunks_exact(outputs) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
        let mut dx = vec![T::zero(); batch * inputs];
        matmul(
            Mat::new(&dpre, batch, outputs),
            Mat::new(self.weights.data(), outputs, inputs),
            &mut dx,
            false,
        );
        (
            Tensor::new(vec![outputs, inputs], dw).expect("shape"),
            Tensor::new(vec![outputs], db).expect("shape"),
            Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        )
    }
}

/// Weight-gradient outputs up to this count use the row-dot kernel, which
/// beats packed GEMM when a long inner dimension meets few outputs.
const NT_MAX_OUTPUTS: usize = 8192;

/// Same-size 2D convolution `h_i = act(b_i + sum_j W_ji * h_j)` with
/// symmetric zero padding. Kernels stored `[out, in, kh, kw]` and applied as
/// cross-correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        activation: Activation,
    ) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            Tensor::zeros(&[out_ch]),
            activation,
        )
    }

    pub fn new(kernels: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        let s = kernels.shape();
        if s.len() != 4 || bias.shape() != [s[0]] {
            return Err(Error::ShapeMismatch(format!(
                "conv kernels {:?} with bias {:?}",
                s,
                bias.shape()
            )));
        }
        if s[2].is_multiple_of(2) || s[3].is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "kernel size {}x{} must be odd",
                s[2], s[3]
            )));
        }
        Ok(Self {
            kernels,
            bias,
            activation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv layer expects [batch, {}, h, w], got {:?}",
                self.in_channels(),
                s
            )));
        }
        Ok((s[0], s[2], s[3]))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, h, w) = self.check_input(x)?;
        let (kh, kw) = self.kernel_size();
        let (cin, cout) = (self.in_channels(), self.out_channels());
        let rows = cin * kh * kw;
        let hw = h * w;
        let mut cols = vec![T::zero(); rows * hw];
        let mut out = vec![T::zero(); batch * cout * hw];
        for b in 0..batch {
            im2col(x.item(b), cin, h, w, kh, kw, &mut cols);
            let o = &mut out[b * cout * hw..(b + 1) * cout * hw];
            for (ch, plane) in o.chunks_exact_mut(hw).enumerate() {
                plane.fill(self.bias.data()[ch]);
            }
            matmul(
                Mat::new(self.kernels.data(), cout, rows),
                Mat::new(&cols, rows, hw),
                o,
                true,
            );
        }
        for v in &mut out {
            *v = self.activation.apply(*v);
        }
        Tensor::new(vec![batch, cout, h, w], out)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        self.backward_inner(x, y, dy, true)
    }

    /// As [`Conv2d::backward`]; with `need_dx == false` the returned input
    /// gradient is all zeros and its cost is skipped.
    pub(crate) fn backward_inner(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (batch, h, w) = self.check_input(x).expect("input shape checked in forward");
        let (kh, kw) = self.kernel_size();
        let (cin, cout) = (self.in_channels(), self.out_channels());
        let rows = cin * kh * kw;
        let hw = h * w;
        let mut cols = vec![T::zero(); rows * hw];
        let mut dcols = vec![T::zero(); rows * hw];
        let mut dk = vec![T::zero(); cout * rows];
        let mut db = vec![T::zero(); cout];
        let mut dx = vec![T::zero(); x.len()];
        let mut dpre = vec![T::zero(); cout * hw];
        for b in 0..batch {
            for ((d, &yv), &g) in dpre.iter_mut().zip(y.item(b)).zip(dy.item(b)) {
                *d = self.activation.grad_from_output(yv, g);
            }
            for (ch, plane) in dpre.chunks_exact(hw).enumerate() {
                db[ch] = db[ch] + plane.iter().copied().sum::<T>();
            }
            im2col(x.item(b), cin, h, w, kh, kw, &mut cols);
            if cout * rows <= NT_MAX_OUTPUTS {
                gemm_nt(&dpre, &cols, cout, rows, hw, &mut dk);
            } else {
                matmul(
                    Mat::new(&dpre, cout, hw),
                    Mat::new(&cols, rows, hw).t(),
                    &mut dk,
                    true,
                );
            }
            if !need_dx {
                continue;
            }
            matmul(
                Mat::new(self.kernels.data(), cout, rows).t(),
                Mat::new(&dpre, cout, hw),
                &mut dcols,
                false,
            );
            col2im(
                &dcols,
                cin,
                h,
                w,
                kh,
                kw,
                &mut dx[b * cin * hw..(b + 1) * cin * hw],
            );
        }
        (
            Tensor::new(self.kernels.shape().to_vec(), dk).expect("shape"),
            Tensor::new(vec![cout], db).expect("shape"),
            Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        )
    }
}

/// Valid source column range `[lo, hi)` for kernel column `kx` with padding
/// `pad`; the matching source start is `lo + kx - pad`.
#[inline]
fn col_range(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = if kx > pad {
        w.saturating_sub(kx - pad)
    } else {
        w
    };
    (lo.min(w), hi.max(lo.min(w)))
}

pub(crate) fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cols: &mut [T],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = col_range(w, kx, pw);
                for y in 0..h {
                    let d = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    if hi > lo {
                        let s0 = lo + kx - pw;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, img: &mut [T]) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = col_range(w, kx, pw);
                if hi <= lo {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[y * w + lo..y * w + hi];
                    let s0 = sy as usize * w + lo + kx - pw;
                    for (d, &v) in plane[s0..s0 + (hi - lo)].iter_mut().zip(s) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Non-overlapping 2x2 max pooling; odd extents keep the partial window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaxPool2;

impl MaxPool2 {
    pub fn output_hw(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(2), w.div_ceil(2))
    }

    /// Returns the pooled batch and, per output value, the flat in-item index
    /// of the selected input (first maximum in scan order).
    pub fn forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "maxpool expects [b, c, h, w], got {s:?}"
            )));
        }
        let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = Self::output_hw(h, w);
        let mut out = Vec::with_capacity(batch * c * ho * wo);
        let mut arg = Vec::with_capacity(out.capacity());
        for b in 0..batch {
            let item = x.item(b);
            for ch in 0..c {
                let base = ch * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for y in 2 * oy..(2 * oy + 2).min(h) {
                            for xx in 2 * ox..(2 * ox + 2).min(w) {
                                let i = base + y * w + xx;
                                if item[i] > best {
                                    best = item[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i as u32);
                    }
                }
            }
        }
        Ok((Tensor::new(vec![batch, c, ho, wo], out)?, arg))
    }

    pub fn backward<T: Real>(x_shape: &[usize], argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(x_shape);
        let item_in: usize = x_shape[1..].iter().product();
        let item_out = dy.item_len();
        let data = dx.data_mut();
        for b in 0..x_shape[0] {
            let g = dy.item(b);
            let a = &argmax[b * item_out..(b + 1) * item_out];
            let d = &mut data[b * item_in..(b + 1) * item_in];
            for (&i, &v) in a.iter().zip(g) {
                d[i as usize] = d[i as usize] + v;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout: in training each unit is zeroed with probability `rate`
/// and survivors are scaled by `1 / (1 - rate)`; inference is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidValue(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(Self { rate })
    }

    /// Draws the per-unit scale mask for `n` units.
    pub fn mask<T: Real, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<T> {
        let keep = T::lit(1.0 / (1.0 - self.rate));
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

/// Standalone dropout on a tensor with its own seeded generator.
pub fn dropout<T: Real>(h: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<Tensor<T>> {
    use rand::SeedableRng;
    let layer = Dropout::new(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(h.clone());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<T> = layer.mask(h.len(), &mut rng);
    let data = h.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Tensor::new(h.shape().to_vec(), data)
}
