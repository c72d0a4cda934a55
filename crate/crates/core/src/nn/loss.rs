use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped to this margin before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Two-class softmax, stabilized by subtracting the larger logit.
pub fn softmax2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

/// Mean over samples of the squared Euclidean reconstruction error;
/// no normalization by the dimension.
pub fn mse_loss(pairs: &[(&[f32], &[f32])]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|(x, xh)| {
            x.iter()
                .zip(xh.iter())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    total / pairs.len() as f64
}

/// Mean negative log-probability of the true class given `(p1, label)`
/// pairs, with `p1` the predicted nodule probability.
pub fn xent_loss(pairs: &[(f64, u8)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&(p1, y)| {
            let p = if y == 1 { p1 } else { 1.0 - p1 };
            -p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
        })
        .sum();
    total / pairs.len() as f64
}

/// Training objective attached to a network output.
#[derive(Debug, Clone)]
pub enum Loss<'a, T> {
    /// Reconstruction loss against target rows of the same size.
    Mse { target: &'a Tensor<T> },
    /// Softmax cross-entropy over two logits per sample.
    SoftmaxXent { labels: &'a [u8] },
}

impl<T: Real> Loss<'_, T> {
    /// Loss value and its gradient with respect to the network output.
    pub fn evaluate(&self, output: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let batch = output.batch();
        match self {
            Loss::Mse { target } => {
                if target.len() != output.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "mse target {:?} vs output {:?}",
                        target.shape(),
                        output.shape()
                    )));
                }
                let scale = T::lit(2.0 / batch as f64);
                let mut total = 0.0f64;
                let grad = output
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&o, &t)| {
                        let d = o - t;
                        let df = d.to_f64().unwrap_or(f64::NAN);
                        total += df * df;
                        d * scale
                    })
                    .collect();
                Ok((
                    total / batch as f64,
                    Tensor::new(output.shape().to_vec(), grad)?,
                ))
            }
            Loss::SoftmaxXent { labels } => {
                if output.item_len() != 2 || labels.len() != batch {
                    return Err(Error::ShapeMismatch(format!(
                        "softmax head expects [{}, 2] logits, got {:?}",
                        labels.len(),
                        output.shape()
                    )));
                }
                let mut total = 0.0;
                let mut grad = Vec::with_capacity(batch * 2);
                let inv = 1.0 / batch as f64;
                for (b, &y) in labels.iter().enumerate() {
                    let z = output.item(b);
                    let (p0, p1) = softmax2(
                        z[0].to_f64().unwrap_or(f64::NAN),
                        z[1].to_f64().unwrap_or(f64::NAN),
                    );
                    let py = if y == 1 { p1 } else { p0 };
                    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&py);
                    total -= py.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
                    if clamped {
                        // constant region of the clamped log
                        grad.extend([T::zero(), T::zero()]);
                    } else {
                        let t0 = if y == 0 { 1.0 } else { 0.0 };
                        grad.push(T::lit((p0 - t0) * inv));
                        grad.push(T::lit((p1 - (1.0 - t0)) * inv));
                    }
                }
                Ok((total * inv, Tensor::new(output.shape().to_vec(), grad)?))
            }
        }
    }
}
