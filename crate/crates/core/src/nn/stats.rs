use serde::{Deserialize, Serialize};

use super::network::{Layer, Network};
use super::tensor::Real;

/// Parameter count and forward-pass FLOPS. One multiply-add counts as two
/// operations; only dense and convolution inner products are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub parameters: u64,
    pub flops: u64,
}

impl std::ops::Add for ModelStats {
    type Output = ModelStats;
    fn add(self, o: ModelStats) -> ModelStats {
        ModelStats {
            parameters: self.parameters + o.parameters,
            flops: self.flops + o.flops,
        }
    }
}

pub fn model_stats<T: Real>(net: &Network<T>) -> ModelStats {
    let shapes = net.shapes();
    let mut stats = ModelStats {
        parameters: 0,
        flops: 0,
    };
    for (layer, input) in net.layers().iter().zip(&shapes) {
        match layer {
            Layer::Dense(d) => {
                stats.parameters += (d.weights.len() + d.bias.len()) as u64;
                stats.flops += 2 * (d.inputs() * d.outputs()) as u64;
            }
            Layer::Conv(c) => {
                let (kh, kw) = c.kernel_size();
                stats.parameters += (c.kernels.len() + c.bias.len()) as u64;
                let macs = input[1] * input[2] * c.out_channels() * c.in_channels() * kh * kw;
                stats.flops += 2 * macs as u64;
            }
            Layer::MaxPool(_) | Layer::Dropout(_) => {}
        }
    }
    stats
}
