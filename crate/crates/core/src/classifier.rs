//! Single-view 2D CNN, per-regime training sets and the averaging ensemble.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    softmax2, xent_loss, Activation, AdamScalars, AdamState, Checkpoint, Conv2d, Dense, Dropout,
    Layer, Loss, MaxPool2, Mode, Network, Tensor,
};
use crate::patch::{Patch3C, CHANNELS, PATCH_SIZE};

pub const CHECKPOINT_KIND: &str = "cnn";
const INFER_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub kernels: [usize; 3],
    pub channels: [usize; 3],
    pub hidden: usize,
    /// Dropout on the hidden dense layer.
    pub dropout: f64,
    /// Dropout on the flattened conv features; 0 disables it.
    pub feature_dropout: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub conv_std: f64,
    pub dense_std: f64,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            kernels: [7, 5, 3],
            channels: [40, 64, 24],
            hidden: 48,
            dropout: 0.5,
            feature_dropout: 0.0,
            iterations: 6000,
            batch_size: 64,
            learning_rate: 0.001,
            decay_rate: 0.04,
            decay_every: 500,
            conv_std: 0.05,
            dense_std: 0.04,
            eval_every: 200,
            patience: 5,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.kernels;
        if k.iter().any(|&k| k == 0 || k % 2 == 0) || k[0] < k[1] || k[1] < k[2] {
            return Err(Error::InvalidValue(format!(
                "kernels must be odd and non-increasing, got {k:?}"
            )));
        }
        if self.channels.contains(&0) || self.hidden == 0 || self.batch_size < 2 {
            return Err(Error::InvalidValue(
                "channels, hidden width and batch size must be positive (batch >= 2)".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidValue("eval_every must be positive".into()));
        }
        Dropout::new(self.dropout)?;
        Dropout::new(self.feature_dropout)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub net: Network<f32>,
}

impl CnnModel {
    /// Zero-initialized network for `config`.
    pub fn new(config: &CnnConfig) -> Result<Self> {
        config.validate()?;
        let [k1, k2, k3] = config.kernels;
        let [c1, c2, c3] = config.channels;
        let mut layers = vec![
            Layer::Conv(Conv2d::zeros(CHANNELS, c1, k1, Activation::Relu)?),
            Layer::MaxPool(MaxPool2),
            Layer::Conv(Conv2d::zeros(c1, c2, k2, Activation::Relu)?),
            Layer::MaxPool(MaxPool2),
            Layer::Conv(Conv2d::zeros(c2, c3, k3, Activation::Relu)?),
            Layer::MaxPool(MaxPool2),
        ];
        if config.feature_dropout > 0.0 {
            layers.push(Layer::Dropout(Dropout::new(config.feature_dropout)?));
        }
        let side = PATCH_SIZE / 8;
        layers.push(Layer::Dense(Dense::zeros(
            c3 * side * side,
            config.hidden,
            Activation::Relu,
        )));
        layers.push(Layer::Dropout(Dropout::new(config.dropout)?));
        layers.push(Layer::Dense(Dense::zeros(
            config.hidden,
            2,
            Activation::Linear,
        )));
        Ok(Self {
            net: Network::new(vec![CHANNELS, PATCH_SIZE, PATCH_SIZE], layers)?,
        })
    }

    /// Probability pairs for a batch of patches, inference mode.
    pub fn predict_batch(&self, patches: &[&Patch3C]) -> Result<Vec<(f64, f64)>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack(patches)?;
        let logits = self.net.infer(&x)?;
        Ok((0..patches.len())
            .map(|b| {
                let z = logits.item(b);
                softmax2(z[0] as f64, z[1] as f64)
            })
            .collect())
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
                "expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
                ck.header.kind
            )));
        }
        let net = ck.to_network()?;
        if net.input_shape() != [CHANNELS, PATCH_SIZE, PATCH_SIZE] || net.output_shape() != [2] {
            return Err(Error::MalformedCheckpoint(
                "not a two-class patch classifier".into(),
            ));
        }
        Ok(Self { net })
    }
}

fn stack(patches: &[&Patch3C]) -> Result<Tensor<f32>> {
    let items: Vec<&[f32]> = patches.iter().map(|p| p.pixels.as_slice()).collect();
    Tensor::stack(&items, &[CHANNELS, PATCH_SIZE, PATCH_SIZE])
}

pub fn predict_single(model: &CnnModel, patch: &Patch3C) -> Result<(f64, f64)> {
    Ok(model.predict_batch(&[patch])?[0])
}

/// How the non-nodule pool is split across ensemble members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Autoencoder categories.
    #[serde(rename = "AE")]
    Ae,
    /// Denoising-autoencoder categories.
    #[serde(rename = "DAE")]
    Dae,
    /// Random equal split.
    R,
    /// Every member sees the full pool.
    A,
    /// One network on the full pool.
    S,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Ae, Regime::Dae, Regime::R, Regime::A, Regime::S];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Ae => "AE",
            Regime::Dae => "DAE",
            Regime::R => "R",
            Regime::A => "A",
            Regime::S => "S",
        }
    }

    pub fn uses_clusters(self) -> bool {
        matches!(self, Regime::Ae | Regime::Dae)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidValue(format!("unknown regime {s:?}; expected AE, DAE, R, A or S"))
            })
    }
}

/// Shared nodule set plus one non-nodule index set per member, all indexing
/// into a single pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeDatasets<P = Patch3C> {
    pub regime: Regime,
    pub nodules: Vec<P>,
    pub pool: Vec<P>,
    pub members: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub nodules: &'a [Patch3C],
    pub pool: &'a [Patch3C],
    pub non_nodules: &'a [usize],
}

impl<P> RegimeDatasets<P> {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Applies `f` to every nodule and pool entry, keeping the split.
    pub fn try_map<Q>(&self, mut f: impl FnMut(&P) -> Result<Q>) -> Result<RegimeDatasets<Q>> {
        Ok(RegimeDatasets {
            regime: self.regime,
            nodules: self.nodules.iter().map(&mut f).collect::<Result<_>>()?,
            pool: self.pool.iter().map(&mut f).collect::<Result<_>>()?,
            members: self.members.clone(),
        })
    }
}

impl RegimeDatasets<Patch3C> {
    pub fn member(&self, k: usize) -> TrainingSet<'_> {
        TrainingSet {
            nodules: &self.nodules,
            pool: &self.pool,
            non_nodules: &self.members[k],
        }
    }
}

pub fn build_regime_datasets<P>(
    nodules: Vec<P>,
    non_nodules: Vec<P>,
    regime: Regime,
    assignments: Option<&[usize]>,
    k: usize,
    seed: u64,
) -> Result<RegimeDatasets<P>> {
    if k == 0 {
        return Err(Error::KMismatch(
            "an ensemble needs at least one member".into(),
        ));
    }
    let n = non_nodules.len();
    let members = match regime {
        Regime::Ae | Regime::Dae => {
            let a = assignments.ok_or_else(|| {
                Error::MissingAssignments(format!("regime {regime} needs cluster ids"))
            })?;
            if a.len() != n {
                return Err(Error::MissingAssignments(format!(
                    "{} cluster ids for {n} non-nodules",
                    a.len()
                )));
            }
            if let Some(&bad) = a.iter().find(|&&c| c >= k) {
                return Err(Error::KMismatch(format!("cluster id {bad} with K = {k}")));
            }
            let mut sets = vec![Vec::new(); k];
            for (i, &c) in a.iter().enumerate() {
                sets[c].push(i);
            }
            sets
        }
        Regime::R => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (base, extra) = (n / k, n % k);
            let mut sets = Vec::with_capacity(k);
            let mut start = 0;
            for m in 0..k {
                let len = base + usize::from(m < extra);
                let mut s = order[start..start + len].to_vec();
                s.sort_unstable();
                sets.push(s);
                start += len;
            }
            sets
        }
        Regime::A => vec![(0..n).collect(); k],
        Regime::S => {
            if k != 1 {
                return Err(Error::KMismatch(format!(
                    "regime S trains a single network, K = {k} requested"
                )));
            }
            vec![(0..n).collect()]
        }
    };
    Ok(RegimeDatasets {
        regime,
        nodules,
        pool: non_nodules,
        members,
    })
}

#[derive(Debug, Clone)]
pub struct CnnTraining {
    pub model: CnnModel,
    pub losses: Vec<f64>,
    /// `(iteration, validation loss)` at each evaluation.
    pub validation: Vec<(usize, f64)>,
    pub iterations_run: usize,
    /// Iteration whose parameters were kept (best validation loss).
    pub best_iteration: usize,
    pub early_stopped: bool,
    pub adam: AdamScalars,
}

/// Mean cross-entropy of `model` over labelled patches.
pub fn mean_xent(model: &CnnModel, patches: &[Patch3C]) -> Result<f64> {
    let refs: Vec<&Patch3C> = patches.iter().collect();
    let probs = predict_chunks(&[model], &refs)?;
    let pairs: Vec<(f64, u8)> = probs
        .iter()
        .zip(patches)
        .map(|(p, x)| (p.1, x.label))
        .collect();
    Ok(xent_loss(&pairs))
}

/// Class-balanced Adam training: every batch holds `batch_size / 2` nodules
/// and the rest non-nodules, drawn with replacement. With a validation set,
/// the loss on it is checked every `eval_every` iterations; training stops
/// after `patience` checks without improvement and the best parameters are
/// restored.
pub fn cnn_train(
    set: &TrainingSet<'_>,
    validation: &[Patch3C],
    config: &CnnConfig,
    seed: u64,
) -> Result<CnnTraining> {
    if set.nodules.is_empty() || set.non_nodules.is_empty() {
        return Err(Error::SingleClass {
            positives: set.nodules.len(),
            negatives: set.non_nodules.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CnnModel::new(config)?;
    model
        .net
        .init_gaussian(config.conv_std, config.dense_std, &mut rng);
    let mut adam = AdamState::new(
        AdamScalars::new(config.learning_rate, config.decay_rate, config.decay_every),
        &model.net.params(),
    );
    let n_pos = config.batch_size / 2;
    let mut labels = vec![1u8; n_pos];
    labels.resize(config.batch_size, 0);

    let mut losses = Vec::with_capacity(config.iterations);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, CnnModel)> = None;
    let mut stale = 0;
    let mut early_stopped = false;
    let mut batch: Vec<&Patch3C> = Vec::with_capacity(config.batch_size);
    for it in 0..config.iterations {
        batch.clear();
        for b in 0..config.batch_size {
            batch.push(if b < n_pos {
                &set.nodules[rng.random_range(0..set.nodules.len())]
            } else {
                &set.pool[set.non_nodules[rng.random_range(0..set.non_nodules.len())]]
            });
        }
        let x = stack(&batch)?;
        let (loss, grads) = model.net.gradients(
            &x,
            &Loss::SoftmaxXent { labels: &labels },
            Mode::Train,
            &mut rng,
        )?;
        losses.push(loss);
        adam.step(model.net.params_mut(), &grads)?;

        let done = it + 1;
        if !validation.is_empty() && (done % config.eval_every == 0 || done == config.iterations) {
            let v = mean_xent(&model, validation)?;
            history.push((done, v));
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, done, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    early_stopped = true;
                    break;
                }
            }
        }
    }
    let iterations_run = losses.len();
    let (model, best_iteration) = match best {
        Some((_, it, m)) => (m, it),
        None => (model, iterations_run),
    };
    Ok(CnnTraining {
        model,
        losses,
        validation: history,
        iterations_run,
        best_iteration,
        early_stopped,
        adam: adam.scalars,
    })
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub regime: Regime,
    pub members: Vec<CnnModel>,
    /// Location of the cluster model the members were split by.
    pub cluster_model: Option<String>,
}

impl Ensemble {
    pub fn new(
        regime: Regime,
        members: Vec<CnnModel>,
        cluster_model: Option<String>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if regime == Regime::S && members.len() != 1 {
            return Err(Error::KMismatch(format!(
                "regime S holds one network, got {}",
                members.len()
            )));
        }
        Ok(Self {
            regime,
            members,
            cluster_model,
        })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }
}

/// Unweighted mean of the members' probability pairs.
pub fn predict_ensemble(ensemble: &Ensemble, patch: &Patch3C) -> Result<(f64, f64)> {
    let members: Vec<&CnnModel> = ensemble.members.iter().collect();
    Ok(predict_chunks(&members, &[patch])?[0])
}

/// Fused probabilities for many patches; chunks run in parallel and results
/// keep input order.
pub fn predict_chunks(members: &[&CnnModel], patches: &[&Patch3C]) -> Result<Vec<(f64, f64)>> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let k = members.len() as f64;
    let chunks: Vec<Vec<(f64, f64)>> = patches
        .par_chunks(INFER_CHUNK)
        .map(|chunk| {
            let mut acc = vec![(0.0, 0.0); chunk.len()];
            for m in members {
                for (a, p) in acc.iter_mut().zip(m.predict_batch(chunk)?) {
                    a.0 += p.0;
                    a.1 += p.1;
                }
            }
            Ok(acc.into_iter().map(|(a, b)| (a / k, b / k)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Member-file record of a saved ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub regime: Regime,
    pub k: usize,
    pub cluster_model: Option<String>,
    pub members: Vec<String>,
    pub seeds: Vec<u64>,
    pub best_iterations: Vec<usize>,
    pub config: CnnConfig,
}

/// Fraction of patches whose arg-max class equals the label.
pub fn accuracy(model: &CnnModel, patches: &[Patch3C]) -> Result<f64> {
    if patches.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&Patch3C> = patches.iter().collect();
    let probs = predict_chunks(&[model], &refs)?;
    let hits = probs
        .iter()
        .zip(patches)
        .filter(|(p, x)| u8::from(p.1 > p.0) == x.label)
        .count();
    Ok(hits as f64 / patches.len() as f64)
}
