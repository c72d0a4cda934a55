//! Unsupervised categorization of non-nodule codes: drop dimensions that are
//! zero for every sample, then k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::Checkpoint;

/// Values at or below this count as zero when pruning.
pub const EPS_ZERO: f64 = 1e-9;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const CHECKPOINT_KIND: &str = "clusters";

/// Row-major sample matrix; `ids[r]` names the candidate behind row `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<usize>,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<usize>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 || values.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} rows of width {dim} cannot hold {} values",
                ids.len(),
                values.len()
            )));
        }
        Ok(Self { ids, dim, values })
    }

    pub fn from_rows(ids: Vec<usize>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != ids.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("ragged feature rows".into()));
        }
        Self::new(ids, dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }
}

/// Drops columns whose every entry is at most [`EPS_ZERO`]; the survivors
/// keep their order.
pub fn prune_zero_columns(features: &FeatureMatrix) -> Result<(FeatureMatrix, Vec<usize>)> {
    if features.rows() == 0 {
        return Err(Error::EmptyInput("no feature rows to prune".into()));
    }
    let kept: Vec<usize> = (0..features.dim)
        .filter(|&c| (0..features.rows()).any(|r| features.row(r)[c] as f64 > EPS_ZERO))
        .collect();
    if kept.is_empty() {
        return Err(Error::DegenerateFeatures);
    }
    let values = (0..features.rows())
        .flat_map(|r| kept.iter().map(move |&c| features.row(r)[c]))
        .collect();
    Ok((
        FeatureMatrix::new(features.ids.clone(), kept.len(), values)?,
        kept,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// Dimension of the unpruned feature vectors.
    pub feature_dim: usize,
    pub kept_dims: Vec<usize>,
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub ids: Vec<usize>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: impl Iterator<Item = f64>, c: &[f64]) -> f64 {
    a.zip(c).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid and its squared distance; ties go to the
/// lowest index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(x.iter().copied(), cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn to_f64(m: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
        .collect()
}

fn plus_plus<R: Rng>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data
        .iter()
        .map(|x| sq_dist(x.iter().copied(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = data.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..data.len())
        };
        centroids.push(data[pick].clone());
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x.iter().copied(), centroids.last().unwrap()));
        }
    }
    centroids
}

fn assign_all(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    data.iter().map(|x| nearest(x, centroids)).unzip()
}

/// Means of the assigned points. An empty cluster takes the point farthest
/// from its current centroid, which then moves into that cluster.
fn update(data: &[Vec<f64>], assign: &mut [usize], d2: &mut [f64], k: usize) -> Vec<Vec<f64>> {
    let dim = data[0].len();
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            let (far, _) = d2
                .iter()
                .enumerate()
                .filter(|&(i, _)| counts[assign[i]] > 1)
                .fold(
                    (usize::MAX, -1.0),
                    |best, (i, &d)| if d > best.1 { (i, d) } else { best },
                );
            if far == usize::MAX {
                continue;
            }
            counts[assign[far]] -= 1;
            assign[far] = c;
            counts[c] = 1;
            d2[far] = 0.0;
        }
    }
    let mut sums = vec![vec![0.0; dim]; k];
    for (x, &a) in data.iter().zip(assign.iter()) {
        for (s, v) in sums[a].iter_mut().zip(x) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        let n = n.max(1) as f64;
        s.iter_mut().for_each(|v| *v /= n);
    }
    sums
}

/// One k-means run from k-means++ seeding. Returns the model (over the
/// given matrix, no pruning) and the inertia after each assignment step.
pub fn kmeans_run(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    stream: u64,
) -> Result<(ClusterModel, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidValue("k must be at least 1".into()));
    }
    if features.rows() < k {
        return Err(Error::TooFewSamples {
            m: features.rows(),
            k,
        });
    }
    let data = to_f64(features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut centroids = plus_plus(&data, k, &mut rng);
    let (mut assign, mut d2) = assign_all(&data, &centroids);
    let mut trace = vec![d2.iter().sum::<f64>()];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        centroids = update(&data, &mut assign, &mut d2, k);
        let (next, nd2) = assign_all(&data, &centroids);
        trace.push(nd2.iter().sum());
        let done = next == assign;
        assign = next;
        d2 = nd2;
        if done {
            break;
        }
    }
    let inertia = d2.iter().sum();
    Ok((
        ClusterModel {
            feature_dim: features.dim,
            kept_dims: (0..features.dim).collect(),
            k,
            centroids,
            ids: features.ids.clone(),
            assignments: assign,
            inertia,
        },
        trace,
    ))
}

/// Best of `restarts` runs by inertia; earlier restarts win ties.
pub fn kmeans_fit(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) {
        let (m, _) = kmeans_run(features, k, seed, r as u64)?;
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Pruning followed by k-means; the model maps full-width codes.
pub fn categorize(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel> {
    let (reduced, kept) = prune_zero_columns(features)?;
    let mut model = kmeans_fit(&reduced, k, seed, restarts)?;
    model.feature_dim = features.dim;
    model.kept_dims = kept;
    Ok(model)
}

/// Nearest centroid over the retained dimensions; ties go to the lowest id.
pub fn assign_cluster(model: &ClusterModel, feature: &[f32]) -> Result<usize> {
    if feature.len() != model.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "cluster model expects {} features, got {}",
            model.feature_dim,
            feature.len()
        )));
    }
    let x: Vec<f64> = model.kept_dims.iter().map(|&d| feature[d] as f64).collect();
    Ok(nearest(&x, &model.centroids).0)
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.k];
        for &a in &self.assignments {
            n[a] += 1;
        }
        n
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint::bare(CHECKPOINT_KIND, seed, json!(self), Vec::new())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != CHECKPOINT_KIND {
            return Err(Error::MalformedCheckpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
                ck.header.kind
            )));
        }
        let m: Self = serde_json::from_value(ck.header.meta.clone())
            .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        let consistent = m.k >= 1
            && m.centroids.len() == m.k
            && !m.kept_dims.is_empty()
            && m.centroids
                .iter()
                .all(|c| c.len() == m.kept_dims.len() && c.iter().all(|v| v.is_finite()))
            && m.kept_dims.iter().all(|&d| d < m.feature_dim)
            && m.ids.len() == m.assignments.len()
            && m.assignments.iter().all(|&a| a < m.k);
        if !consistent {
            return Err(Error::MalformedCheckpoint(
                "inconsistent cluster model".into(),
            ));
        }
        Ok(m)
    }
}
