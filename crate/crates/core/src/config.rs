//! Pipeline configuration, read from TOML. Every key has a default, so an
//! empty file is the reference configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeConfig, DEFAULT_DAE_NOISE};
use crate::categorizer::{DEFAULT_K, DEFAULT_RESTARTS};
use crate::classifier::{CnnConfig, Regime};
use crate::error::{Error, Result};
use crate::folds::DEFAULT_FOLD_COUNT;
use crate::froc::{check_levels, DEFAULT_RESAMPLES, FP_LEVELS};
use crate::phantom::PhantomSpec;
use crate::seed::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory, relative to the output directory unless absolute.
    pub data: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldsConfig {
    pub count: usize,
}

impl Default for FoldsConfig {
    fn default() -> Self {
        Self {
            count: DEFAULT_FOLD_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub hidden: Vec<usize>,
    /// Size of the middle code, i.e. the clustering feature dimension.
    pub feature_dim: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub init_std: f64,
    /// Masking-noise level used by the denoising variant.
    pub dae_noise: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        let ae = AeConfig::default();
        Self {
            hidden: ae.hidden,
            feature_dim: ae.code,
            iterations: ae.iterations,
            batch_size: ae.batch_size,
            learning_rate: ae.learning_rate,
            decay_rate: ae.decay_rate,
            decay_every: ae.decay_every,
            init_std: ae.init_std,
            dae_noise: DEFAULT_DAE_NOISE,
        }
    }
}

impl AutoencoderConfig {
    pub fn to_ae_config(&self, denoise: bool) -> AeConfig {
        AeConfig {
            hidden: self.hidden.clone(),
            code: self.feature_dim,
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay_rate: self.decay_rate,
            decay_every: self.decay_every,
            init_std: self.init_std,
            denoise: denoise.then_some(self.dae_noise),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategorizerConfig {
    pub restarts: usize,
}

impl Default for CategorizerConfig {
    fn default() -> Self {
        Self {
            restarts: DEFAULT_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub regime: Regime,
    /// Number of members, and of clusters for the AE and DAE regimes.
    pub k: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Ae,
            k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fp_levels: Vec<f64>,
    pub bootstrap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fp_levels: FP_LEVELS.to_vec(),
            bootstrap: DEFAULT_RESAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub paths: PathsConfig,
    /// Phantom generator settings. Its `seed` key is ignored by the pipeline,
    /// which derives the phantom seed from the master seed.
    pub phantom: PhantomSpec,
    pub folds: FoldsConfig,
    pub autoencoder: AutoencoderConfig,
    pub categorizer: CategorizerConfig,
    pub cnn: CnnConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
}

fn check_rate(name: &str, v: f64, lo_open: bool) -> Result<()> {
    let ok = v.is_finite() && v < 1.0 && if lo_open { v > 0.0 } else { v >= 0.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} = {v} is out of range"
        )))
    }
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidConfig(format!("{name} must be positive")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Two folds, small networks and short schedules: a full phantom run of
    /// the AE, A and S regimes takes a few minutes on one core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.folds.count = 2;
        c.autoencoder.hidden = vec![256, 128];
        c.autoencoder.iterations = 300;
        c.cnn.kernels = [5, 3, 3];
        c.cnn.channels = [8, 16, 16];
        c.cnn.hidden = 32;
        c.cnn.batch_size = 32;
        c.cnn.iterations = 240;
        c.cnn.eval_every = 40;
        c.cnn.decay_every = 100;
        c.eval.bootstrap = 200;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: Error| Error::InvalidConfig(e.to_string());
        self.phantom.validate().map_err(invalid)?;
        if self.folds.count < 2 {
            return Err(Error::InvalidConfig(
                "folds.count must be at least 2".into(),
            ));
        }
        let ae = &self.autoencoder;
        check_positive("autoencoder.feature_dim", ae.feature_dim)?;
        check_positive("autoencoder.iterations", ae.iterations)?;
        check_positive("autoencoder.batch_size", ae.batch_size)?;
        if ae.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "autoencoder.hidden widths must be positive".into(),
            ));
        }
        check_rate("autoencoder.learning_rate", ae.learning_rate, true)?;
        check_rate("autoencoder.decay_rate", ae.decay_rate, false)?;
        check_rate("autoencoder.dae_noise", ae.dae_noise, false)?;
        check_positive("autoencoder.decay_every", ae.decay_every as usize)?;
        check_positive("categorizer.restarts", self.categorizer.restarts)?;
        check_positive("ensemble.k", self.ensemble.k)?;
        let cnn = &self.cnn;
        cnn.validate().map_err(invalid)?;
        check_rate("cnn.learning_rate", cnn.learning_rate, true)?;
        check_rate("cnn.decay_rate", cnn.decay_rate, false)?;
        check_rate("cnn.dropout", cnn.dropout, false)?;
        check_rate("cnn.feature_dropout", cnn.feature_dropout, false)?;
        check_positive("cnn.iterations", cnn.iterations)?;
        check_positive("cnn.eval_every", cnn.eval_every)?;
        check_positive("cnn.decay_every", cnn.decay_every as usize)?;
        check_levels(&self.eval.fp_levels).map_err(invalid)?;
        Ok(())
    }

    /// Members for `regime` given a requested K: regime S always has one.
    pub fn members_for(&self, regime: Regime, k: usize) -> usize {
        if regime == Regime::S {
            1
        } else {
            k
        }
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}
