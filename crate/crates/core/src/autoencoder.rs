//! Fully-connected autoencoder over 64x64 patches; its middle code is the
//! feature vector used to categorize non-nodules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Activation, AdamScalars, AdamState, Checkpoint, Dense, Layer, Loss, Mode, Network, Tensor,
};
use crate::patch::{Patch2D, PATCH_PIXELS};

pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    /// Encoder widths between the input and the code; mirrored in the decoder.
    pub hidden: Vec<usize>,
    pub code: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub init_std: f64,
    /// Masking-noise level for the denoising variant; `None` trains a plain
    /// autoencoder.
    pub denoise: Option<f64>,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 512, 384],
            code: 256,
            iterations: 1000,
            batch_size: 64,
            learning_rate: 0.001,
            decay_rate: 0.04,
            decay_every: 1000,
            init_std: 0.05,
            denoise: None,
        }
    }
}

pub const DEFAULT_DAE_NOISE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct AeModel {
    pub net: Network<f32>,
}

impl AeModel {
    /// Zero-initialized model `4096 -> hidden.. -> code -> hidden(rev).. -> 4096`.
    pub fn new(hidden: &[usize], code: usize) -> Result<Self> {
        if code == 0 || hidden.contains(&0) {
            return Err(Error::InvalidValue(
                "autoencoder widths must be positive".into(),
            ));
        }
        let mut widths = vec![PATCH_PIXELS];
        widths.extend_from_slice(hidden);
        widths.push(code);
        widths.extend(hidden.iter().rev());
        widths.push(PATCH_PIXELS);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Linear
                } else {
                    Activation::Relu
                };
                Layer::Dense(Dense::zeros(widths[i], widths[i + 1], act))
            })
            .collect();
        Ok(Self {
            net: Network::new(vec![PATCH_PIXELS], layers)?,
        })
    }

    pub fn from_config(config: &AeConfig) -> Result<Self> {
        Self::new(&config.hidden, config.code)
    }

    /// Number of layers up to and including the code layer.
    pub fn encoder_depth(&self) -> usize {
        self.net.layers().len() / 2
    }

    pub fn code_size(&self) -> usize {
        match &self.net.layers()[self.encoder_depth() - 1] {
            Layer::Dense(d) => d.outputs(),
            _ => unreachable!("autoencoder holds dense layers only"),
        }
    }

    pub fn encode_batch(&self, patches: &[&[f32]]) -> Result<Tensor<f32>> {
        let x = Tensor::stack(patches, &[PATCH_PIXELS])?;
        self.net.infer_range(&x, 0..self.encoder_depth())
    }

    pub fn decode(&self, codes: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net
            .infer_range(codes, self.encoder_depth()..self.net.layers().len())
    }

    pub fn reconstruct(&self, patch: &Patch2D) -> Result<Vec<f32>> {
        let x = Tensor::from_slice(&[1, PATCH_PIXELS], &patch.pixels)?;
        Ok(self.net.infer(&x)?.into_data())
    }

    pub fn to_checkpoint(
        &self,
        adam: Option<AdamScalars>,
        seed: u64,
        iteration: u64,
        meta: serde_json::Value,
    ) -> Checkpoint {
        Checkpoint::from_network(CHECKPOINT_KIND, &self.net, adam, seed, iteration, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != CHECKPOINT_KIND {
            return Err(Error::MalformedCheckpoint(format!(
                "expected an {CHECKPOINT_KIND} checkpoint, found {:?}",
                ck.header.kind
            )));
        }
        let net = ck.to_network()?;
        let model = Self { net };
        let n = model.net.layers().len();
        if n < 2 || !n.is_multiple_of(2) || model.net.input_shape() != [PATCH_PIXELS] {
            return Err(Error::MalformedCheckpoint(
                "not an autoencoder layout".into(),
            ));
        }
        Ok(model)
    }
}

/// The middle code of one patch; non-negative since the code layer is ReLU.
pub fn ae_encode(model: &AeModel, patch: &Patch2D) -> Result<Vec<f32>> {
    Ok(model.encode_batch(&[&patch.pixels])?.into_data())
}

/// Masking noise: each pixel is zeroed independently with probability
/// `noise_level`.
pub fn ae_corrupt(patch: &Patch2D, noise_level: f64, seed: u64) -> Result<Patch2D> {
    if !(0.0..1.0).contains(&noise_level) {
        return Err(Error::InvalidValue(format!(
            "noise level {noise_level} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Patch2D {
        pixels: corrupt_pixels(&patch.pixels, noise_level, &mut rng),
        source: patch.source.clone(),
    })
}

fn corrupt_pixels<R: Rng>(pixels: &[f32], noise_level: f64, rng: &mut R) -> Vec<f32> {
    pixels
        .iter()
        .map(|&p| {
            if rng.random::<f64>() < noise_level {
                0.0
            } else {
                p
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AeTraining {
    pub model: AeModel,
    pub losses: Vec<f64>,
    pub adam: AdamScalars,
}

/// Adam on the mean squared reconstruction error over mini-batches drawn
/// with replacement. With `denoise` set, inputs are masked and the target
/// stays the clean patch.
pub fn ae_train(patches: &[Patch2D], config: &AeConfig, seed: u64) -> Result<AeTraining> {
    if patches.is_empty() {
        return Err(Error::EmptyInput(
            "autoencoder training needs at least one patch".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidValue("batch size must be positive".into()));
    }
    if let Some(level) = config.denoise {
        if !(0.0..1.0).contains(&level) {
            return Err(Error::InvalidValue(format!(
                "noise level {level} outside [0, 1)"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = AeModel::from_config(config)?;
    model
        .net
        .init_gaussian(config.init_std, config.init_std, &mut rng);
    let mut adam = AdamState::new(
        AdamScalars::new(config.learning_rate, config.decay_rate, config.decay_every),
        &model.net.params(),
    );
    let mut losses = Vec::with_capacity(config.iterations);
    let mut clean = Vec::with_capacity(config.batch_size * PATCH_PIXELS);
    let mut noisy = Vec::with_capacity(config.batch_size * PATCH_PIXELS);
    for _ in 0..config.iterations {
        clean.clear();
        noisy.clear();
        for _ in 0..config.batch_size {
            let p = &patches[rng.random_range(0..patches.len())].pixels;
            clean.extend_from_slice(p);
            if let Some(level) = config.denoise {
                noisy.extend(corrupt_pixels(p, level, &mut rng));
            }
        }
        let target = Tensor::new(vec![config.batch_size, PATCH_PIXELS], clean.clone())?;
        let input = if config.denoise.is_some() {
            Tensor::new(vec![config.batch_size, PATCH_PIXELS], noisy.clone())?
        } else {
            target.clone()
        };
        let (loss, grads) = model.net.gradients(
            &input,
            &Loss::Mse { target: &target },
            Mode::Train,
            &mut rng,
        )?;
        losses.push(loss);
        adam.step(model.net.params_mut(), &grads)?;
    }
    Ok(AeTraining {
        model,
        losses,
        adam: adam.scalars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::PatchSource;

    fn patch(f: impl Fn(usize) -> f32) -> Patch2D {
        Patch2D {
            pixels: (0..PATCH_PIXELS).map(f).collect(),
            source: PatchSource {
                scan_id: "s".into(),
                candidate: 0,
            },
        }
    }

    #[test]
    fn layout_is_symmetric_with_linear_output() {
        let m = AeModel::new(&[1024, 512, 384], 256).unwrap();
        let shapes = m.net.shapes();
        let widths: Vec<usize> = shapes.iter().map(|s| s[0]).collect();
        assert_eq!(widths, [4096, 1024, 512, 384, 256, 384, 512, 1024, 4096]);
        assert_eq!(m.encoder_depth(), 4);
        assert_eq!(m.code_size(), 256);
        match m.net.layers().last().unwrap() {
            Layer::Dense(d) => assert_eq!(d.activation, Activation::Linear),
            _ => panic!(),
        }
    }

    #[test]
    fn zero_model_encodes_to_zeros() {
        let m = AeModel::new(&[32, 16], 256).unwrap();
        let code = ae_encode(&m, &patch(|i| (i % 7) as f32 / 7.0)).unwrap();
        assert_eq!(code, vec![0.0; 256]);
    }

    #[test]
    fn encode_then_decode_equals_full_forward() {
        let cfg = AeConfig {
            hidden: vec![64, 32],
            code: 16,
            iterations: 3,
            batch_size: 4,
            ..AeConfig::default()
        };
        let p = patch(|i| ((i * 31) % 97) as f32 / 97.0);
        let m = ae_train(std::slice::from_ref(&p), &cfg, 1).unwrap().model;
        let code = m.encode_batch(&[&p.pixels]).unwrap();
        assert!(code.data().iter().all(|&v| v >= 0.0));
        assert_eq!(
            m.decode(&code).unwrap().into_data(),
            m.reconstruct(&p).unwrap()
        );
    }

    #[test]
    fn memorizes_a_single_patch() {
        let cfg = AeConfig {
            hidden: vec![128, 64],
            code: 32,
            iterations: 500,
            batch_size: 8,
            ..AeConfig::default()
        };
        let p = patch(|i| 0.5 + 0.4 * ((i as f32) * 0.05).sin());
        let run = ae_train(std::slice::from_ref(&p), &cfg, 3).unwrap();
        assert!(run.losses.iter().all(|l| l.is_finite()));
        let (first, last) = (run.losses[0], *run.losses.last().unwrap());
        assert!(last < 0.01 * first, "{first} -> {last}");
        let again = ae_train(std::slice::from_ref(&p), &cfg, 3).unwrap();
        assert_eq!(again.model, run.model);
    }

    #[test]
    fn corruption() {
        let p = patch(|_| 1.0);
        assert_eq!(ae_corrupt(&p, 0.0, 1).unwrap(), p);
        let level = 1.0 - 1e-6;
        let c = ae_corrupt(&p, level, 5).unwrap();
        let zeros = c.pixels.iter().filter(|&&v| v == 0.0).count() as f64 / PATCH_PIXELS as f64;
        assert!((zeros - level).abs() <= 0.03);
        let half = ae_corrupt(&p, 0.25, 5).unwrap();
        let zeros = half.pixels.iter().filter(|&&v| v == 0.0).count() as f64 / PATCH_PIXELS as f64;
        assert!((zeros - 0.25).abs() <= 0.03);
        assert!(half.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(half, ae_corrupt(&p, 0.25, 5).unwrap());
        assert!(ae_corrupt(&p, 1.0, 5).is_err());
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(
            ae_train(&[], &AeConfig::default(), 0),
            Err(Error::EmptyInput(_))
        ));
    }
}
