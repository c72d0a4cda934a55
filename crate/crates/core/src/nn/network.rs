use std::ops::Range;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Conv2d, Dense, Dropout, MaxPool2, Mode};
use super::loss::Loss;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f32> {
    Dense(Dense<T>),
    Conv(Conv2d<T>),
    MaxPool(MaxPool2),
    Dropout(Dropout),
}

/// Parameter-free description of a layer, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        activation: Activation,
    },
    Maxpool,
    Dropout {
        rate: f64,
    },
}

impl<T: Real> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs(),
                outputs: d.outputs(),
                activation: d.activation,
            },
            Layer::Conv(c) => {
                let (kh, kw) = c.kernel_size();
                LayerSpec::Conv {
                    in_channels: c.in_channels(),
                    out_channels: c.out_channels(),
                    kernel: [kh, kw],
                    activation: c.activation,
                }
            }
            Layer::MaxPool(_) => LayerSpec::Maxpool,
            Layer::Dropout(d) => LayerSpec::Dropout { rate: d.rate },
        }
    }

    pub fn from_spec(spec: &LayerSpec) -> Result<Self> {
        Ok(match *spec {
            LayerSpec::Dense {
                inputs,
                outputs,
                activation,
            } => Layer::Dense(Dense::zeros(inputs, outputs, activation)),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                activation,
            } => Layer::Conv(Conv2d::new(
                Tensor::zeros(&[out_channels, in_channels, kernel[0], kernel[1]]),
                Tensor::zeros(&[out_channels]),
                activation,
            )?),
            LayerSpec::Maxpool => Layer::MaxPool(MaxPool2),
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)?),
        })
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                let n: usize = input.iter().product();
                if n != d.inputs() {
                    return Err(Error::ShapeMismatch(format!(
                        "dense layer with {} inputs cannot follow shape {input:?}",
                        d.inputs()
                    )));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return Err(Error::ShapeMismatch(format!(
                        "conv layer with {} input channels cannot follow shape {input:?}",
                        c.in_channels()
                    )));
                }
                Ok(vec![c.out_channels(), input[1], input[2]])
            }
            Layer::MaxPool(_) => {
                if input.len() != 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "maxpool cannot follow shape {input:?}"
                    )));
                }
                let (h, w) = MaxPool2::output_hw(input[1], input[2]);
                Ok(vec![input[0], h, w])
            }
            Layer::Dropout(_) => Ok(input.to_vec()),
        }
    }

    fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Dense(d) => Layer::Dense(Dense {
                weights: d.weights.cast(),
                bias: d.bias.cast(),
                activation: d.activation,
            }),
            Layer::Conv(c) => Layer::Conv(Conv2d {
                kernels: c.kernels.cast(),
                bias: c.bias.cast(),
                activation: c.activation,
            }),
            Layer::MaxPool(p) => Layer::MaxPool(*p),
            Layer::Dropout(d) => Layer::Dropout(*d),
        }
    }
}

enum Aux<T> {
    None,
    Argmax(Vec<u32>),
    Mask(Vec<T>),
}

/// Activations recorded by a forward pass for the matching backward pass.
pub struct Tape<T = f32> {
    acts: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            acts: Vec::new(),
            aux: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.acts.clear();
        self.aux.clear();
    }

    /// Output of layer `i` (index 0 is the network input).
    pub fn activation(&self, i: usize) -> Option<&Tensor<T>> {
        self.acts.get(i)
    }
}

/// Parameter gradients in declaration order (weights then bias per layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x = *x * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// An ordered stack of layers applied to per-sample inputs of `input_shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for l in &layers {
            shape = l.output_shape(&shape)?;
        }
        Ok(Self {
            input_shape,
            layers,
        })
    }

    pub fn from_specs(input_shape: Vec<usize>, specs: &[LayerSpec]) -> Result<Self> {
        let layers = specs
            .iter()
            .map(Layer::from_spec)
            .collect::<Result<Vec<_>>>()?;
        Self::new(input_shape, layers)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Per-sample input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = l
                .output_shape(out.last().unwrap())
                .expect("validated at construction");
            out.push(next);
        }
        out
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().pop().unwrap()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => out.extend([&d.weights, &d.bias]),
                Layer::Conv(c) => out.extend([&c.kernels, &c.bias]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => out.extend([&mut d.weights, &mut d.bias]),
                Layer::Conv(c) => out.extend([&mut c.kernels, &mut c.bias]),
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    /// Draws conv kernels from `N(0, conv_std^2)` and dense weights from
    /// `N(0, dense_std^2)`; zeroes all biases.
    pub fn init_gaussian<R: RngCore + ?Sized>(
        &mut self,
        conv_std: f64,
        dense_std: f64,
        rng: &mut R,
    ) {
        let conv = Normal::new(0.0, conv_std).expect("valid std");
        let dense = Normal::new(0.0, dense_std).expect("valid std");
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    for w in d.weights.data_mut() {
                        *w = T::lit(dense.sample(rng));
                    }
                    d.bias.data_mut().fill(T::zero());
                }
                Layer::Conv(c) => {
                    for w in c.kernels.data_mut() {
                        *w = T::lit(conv.sample(rng));
                    }
                    c.bias.data_mut().fill(T::zero());
                }
                _ => {}
            }
        }
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "network expects [batch, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        x: &Tensor<T>,
        range: Range<usize>,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
        mut tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>> {
        let mut h = x.clone();
        if let Some(t) = tape.as_deref_mut() {
            t.clear();
            t.acts.push(h.clone());
        }
        for layer in &self.layers[range] {
            let (next, aux) = match layer {
                Layer::Dense(d) => (d.forward(&h)?, Aux::None),
                Layer::Conv(c) => (c.forward(&h)?, Aux::None),
                Layer::MaxPool(_) => {
                    let (y, arg) = MaxPool2::forward(&h)?;
                    (y, Aux::Argmax(arg))
                }
                Layer::Dropout(d) => {
                    if mode == Mode::Infer || d.rate == 0.0 {
                        (h.clone(), Aux::None)
                    } else {
                        let r = rng.as_deref_mut().ok_or_else(|| {
                            Error::InvalidValue("training-mode dropout needs a generator".into())
                        })?;
                        let mask: Vec<T> = d.mask(h.len(), r);
                        let data = h.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                        (Tensor::new(h.shape().to_vec(), data)?, Aux::Mask(mask))
                    }
                }
            };
            if let Some(t) = tape.as_deref_mut() {
                t.acts.push(next.clone());
                t.aux.push(aux);
            }
            h = next;
        }
        Ok(h)
    }

    /// Inference-mode forward pass (dropout disabled).
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        self.run(x, 0..self.layers.len(), Mode::Infer, None, None)
    }

    /// Inference through `layers[range]` only; `x` must fit the first layer
    /// of the range.
    pub fn infer_range(&self, x: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
        if range.start == 0 {
            self.check_batch(x)?;
        }
        self.run(x, range, Mode::Infer, None, None)
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward_recorded(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
        tape: &mut Tape<T>,
    ) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        self.run(x, 0..self.layers.len(), mode, Some(rng), Some(tape))
    }

    /// Exact gradients of a scalar objective given `d_output`, plus the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        d_output: &Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        self.backward_impl(tape, d_output, true)
    }

    fn backward_impl(
        &self,
        tape: &Tape<T>,
        d_output: &Tensor<T>,
        need_input: bool,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        if tape.acts.len() != self.layers.len() + 1 || tape.aux.len() != self.layers.len() {
            return Err(Error::NoForwardPass);
        }
        if d_output.shape() != tape.acts.last().unwrap().shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs recorded output {:?}",
                d_output.shape(),
                tape.acts.last().unwrap().shape()
            )));
        }
        let mut grads_rev: Vec<Tensor<T>> = Vec::new();
        let mut d = d_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.acts[i];
            let y = &tape.acts[i + 1];
            d = match (layer, &tape.aux[i]) {
                (Layer::Dense(l), _) => {
                    let (dw, db, dx) = l.backward(x, y, &d);
                    grads_rev.push(db);
                    grads_rev.push(dw);
                    dx
                }
                (Layer::Conv(l), _) => {
                    let (dk, db, dx) = l.backward_inner(x, y, &d, need_input || i > 0);
                    grads_rev.push(db);
                    grads_rev.push(dk);
                    dx
                }
                (Layer::MaxPool(_), Aux::Argmax(arg)) => MaxPool2::backward(x.shape(), arg, &d),
                (Layer::Dropout(_), Aux::Mask(mask)) => {
                    let data = d.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    Tensor::new(d.shape().to_vec(), data)?
                }
                (Layer::Dropout(_), Aux::None) => d,
                _ => return Err(Error::NoForwardPass),
            };
        }
        grads_rev.reverse();
        Ok((Gradients { tensors: grads_rev }, d))
    }

    /// Forward, loss and backward in one call.
    pub fn gradients(
        &self,
        x: &Tensor<T>,
        loss: &Loss<'_, T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Gradients<T>)> {
        let mut tape = Tape::new();
        let out = self.forward_recorded(x, mode, rng, &mut tape)?;
        let (value, d_out) = loss.evaluate(&out)?;
        let (grads, _) = self.backward_impl(&tape, &d_out, false)?;
        Ok((value, grads))
    }
}
