use serde::{Deserialize, Serialize};

use super::network::Gradients;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Scalar Adam settings plus the step counter; also the checkpoint record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamScalars {
    pub t: u64,
    pub base_lr: f64,
    /// Fractional decay applied once per `decay_every` steps (0.04 = 4%).
    pub decay_rate: f64,
    pub decay_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamScalars {
    pub fn new(base_lr: f64, decay_rate: f64, decay_every: u64) -> Self {
        Self {
            t: 0,
            base_lr,
            decay_rate,
            decay_every,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Step-decayed learning rate after `t` completed updates:
    /// `base_lr * (1 - decay_rate)^floor(t / decay_every)`.
    pub fn effective_lr(&self, t: u64) -> f64 {
        let windows = t.checked_div(self.decay_every).unwrap_or(0);
        self.base_lr * (1.0 - self.decay_rate).powf(windows as f64)
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub scalars: AdamScalars,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(scalars: AdamScalars, params: &[&Tensor<T>]) -> Self {
        Self {
            scalars,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.scalars.t
    }

    /// One bias-corrected Adam update. The learning rate is taken from the
    /// number of updates completed before this one.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &Gradients<T>) -> Result<()> {
        if params.len() != self.m.len() || grads.tensors.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam tracks {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.tensors.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(&grads.tensors).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {:?}, gradient {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        let s = self.scalars;
        let lr = s.effective_lr(s.t);
        let t = (s.t + 1) as i32;
        let c1 = 1.0 - s.beta1.powi(t);
        let c2 = 1.0 - s.beta2.powi(t);
        let (b1, b2) = (T::lit(s.beta1), T::lit(s.beta2));
        let (ob1, ob2) = (T::lit(1.0 - s.beta1), T::lit(1.0 - s.beta2));
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(s.eps);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv = *pv - step * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
        self.scalars.t += 1;
        Ok(())
    }
}
