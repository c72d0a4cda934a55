//! Stage-by-stage orchestration over an output directory. Each stage reads
//! the artifacts of earlier stages, writes its own under fixed names, and
//! records a JSON manifest with the config hash, seeds, input and output
//! hashes, and timings.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{ae_train, AeModel};
use crate::categorizer::{assign_cluster, categorize, FeatureMatrix};
use crate::classifier::{
    build_regime_datasets, cnn_train, predict_chunks, CnnModel, CnnTraining, EnsembleManifest,
    Regime, RegimeDatasets,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::folds::{build_folds, Fold, FoldPlan};
use crate::froc::{evaluate, render_svg, save_curve, scans_of, EvalInput, EvalSummary};
use crate::nn::{model_stats, Checkpoint, ModelStats};
use crate::patch::{augment_nodule, extract_patch2d, extract_patch3c, Patch3C};
use crate::phantom::gen_dataset;
use crate::seed::{sha256_hex, stage_seed};
use crate::volume::{
    load_annotations, load_candidates, load_volume, save_candidates, write_file, Candidate,
    CtVolume,
};

/// Parameter and FLOPS targets for the default five-member ensemble.
pub const TARGET_PARAMETERS: u64 = 789_000;
pub const TARGET_FLOPS: u64 = 1_024_000_000;
pub const PARAMETER_TOLERANCE: f64 = 0.15;
pub const FLOPS_TOLERANCE: f64 = 0.25;

const ENCODE_CHUNK: usize = 64;

/// Which autoencoder a feature-side stage works with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Ae,
    Dae,
}

impl Flavor {
    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::Ae => "ae",
            Flavor::Dae => "dae",
        }
    }

    /// The denoising regime uses the denoising autoencoder; everything else
    /// uses the plain one.
    pub fn for_regime(regime: Regime) -> Flavor {
        if regime == Regime::Dae {
            Flavor::Dae
        } else {
            Flavor::Ae
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub fold: Option<usize>,
    pub regime: Option<Regime>,
    pub k: Option<usize>,
    pub master_seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the output directory, mapped to sha256 hex digests.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u64>,
}

/// What a command did, for printing.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub manifest: PathBuf,
    pub lines: Vec<String>,
}

/// Regime dataset split in candidate-index form, as written by `build-sets`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetsFile {
    pub fold: usize,
    pub k: usize,
    pub cluster_model: Option<String>,
    /// Validation candidates split among members like the training ones.
    pub validation: RegimeDatasets<usize>,
    pub datasets: RegimeDatasets<usize>,
}

/// Evaluation summary with the run it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub regime: Regime,
    pub k: usize,
    pub folds: Vec<usize>,
    #[serde(flatten)]
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub members: usize,
    pub per_member: ModelStats,
    pub total: ModelStats,
    pub target_parameters: u64,
    pub target_flops: u64,
    pub parameter_ratio: f64,
    pub flops_ratio: f64,
    pub within_tolerance: bool,
}

/// Candidate table and lazily loaded volumes.
struct Data {
    dir: PathBuf,
    candidates: Vec<Candidate>,
    volumes: HashMap<String, CtVolume>,
}

impl Data {
    fn volume(&mut self, scan: &str) -> Result<&CtVolume> {
        if !self.volumes.contains_key(scan) {
            let path = self.dir.join("volumes").join(format!("{scan}.rvol"));
            let v = load_volume(&path)?;
            self.volumes.insert(scan.to_string(), v);
        }
        Ok(&self.volumes[scan])
    }

    /// Indices of candidates in `scans` whose label matches `label` (any
    /// label when `None`), in table order.
    fn indices(&self, scans: &[String], label: Option<u8>) -> Vec<usize> {
        self.candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| scans.contains(&c.scan_id) && (label.is_none() || c.label == label))
            .map(|(i, _)| i)
            .collect()
    }

    fn patch3c(&mut self, index: usize) -> Result<Patch3C> {
        let c = self.candidates[index].clone();
        extract_patch3c(self.volume(&c.scan_id)?, &c, index)
    }
}

fn encode_table(
    model: &AeModel,
    ids: &[usize],
    patches: &[crate::patch::Patch2D],
) -> Result<String> {
    let mut text = String::from("candidate_index");
    for j in 0..model.code_size() {
        write!(text, ",f{j}").unwrap();
    }
    text.push('\n');
    for (chunk_ids, chunk) in ids.chunks(ENCODE_CHUNK).zip(patches.chunks(ENCODE_CHUNK)) {
        let rows: Vec<&[f32]> = chunk.iter().map(|p| p.pixels.as_slice()).collect();
        let codes = model.encode_batch(&rows)?;
        for (b, id) in chunk_ids.iter().enumerate() {
            write!(text, "{id}").unwrap();
            for v in codes.item(b) {
                write!(text, ",{v}").unwrap();
            }
            text.push('\n');
        }
    }
    Ok(text)
}

/// Run context: a validated configuration and an output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

struct Recorder {
    start: Instant,
    manifest: Manifest,
    lines: Vec<String>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.into(),
        })
    }

    // ---- artifact locations ----

    pub fn data_dir(&self) -> PathBuf {
        let p = Path::new(&self.config.paths.data);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn candidates_path(&self) -> PathBuf {
        self.data_dir().join("candidates.csv")
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.data_dir().join("annotations.csv")
    }

    pub fn folds_path(&self) -> PathBuf {
        self.out.join("folds.json")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.out.join(format!("fold{fold}"))
    }

    pub fn ae_path(&self, fold: usize, flavor: Flavor) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("{}.ckpt", flavor.as_str()))
    }

    pub fn ae_log_path(&self, fold: usize, flavor: Flavor) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("{}_losses.csv", flavor.as_str()))
    }

    pub fn features_path(&self, fold: usize, flavor: Flavor) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("features_{}.csv", flavor.as_str()))
    }

    pub fn validation_features_path(&self, fold: usize, flavor: Flavor) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("features_{}_validation.csv", flavor.as_str()))
    }

    pub fn clusters_path(&self, fold: usize, flavor: Flavor, k: usize) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("clusters_{}_k{k}.ckpt", flavor.as_str()))
    }

    pub fn assignments_path(&self, fold: usize, flavor: Flavor, k: usize) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("clusters_{}_k{k}.csv", flavor.as_str()))
    }

    fn run_name(&self, regime: Regime, k: usize) -> String {
        format!(
            "{}-k{}",
            regime.as_str().to_lowercase(),
            self.config.members_for(regime, k)
        )
    }

    pub fn regime_dir(&self, fold: usize, regime: Regime, k: usize) -> PathBuf {
        self.fold_dir(fold).join(self.run_name(regime, k))
    }

    pub fn pooled_dir(&self, regime: Regime, k: usize) -> PathBuf {
        self.out.join("pooled").join(self.run_name(regime, k))
    }

    pub fn stats_path(&self) -> PathBuf {
        self.out.join("stats.json")
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.out.join("manifests")
    }

    /// Path relative to the output directory where possible.
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).display().to_string()
    }

    // ---- bookkeeping ----

    fn recorder(
        &self,
        command: &str,
        fold: Option<usize>,
        regime: Option<Regime>,
        k: Option<usize>,
    ) -> Recorder {
        Recorder {
            start: Instant::now(),
            manifest: Manifest {
                command: command.to_string(),
                fold,
                regime,
                k,
                master_seed: self.config.seed,
                config_hash: self.config.hash(),
                config: self.config.clone(),
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                timings_ms: BTreeMap::new(),
            },
            lines: Vec::new(),
        }
    }

    fn seed(&self, rec: &mut Recorder, stage: &str) -> u64 {
        let s = stage_seed(self.config.seed, stage);
        rec.manifest.seeds.insert(stage.to_string(), s);
        s
    }

    fn require(&self, path: &Path, command: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                command: command.to_string(),
            })
        }
    }

    fn hash_file(path: &Path) -> Result<String> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    fn input(&self, rec: &mut Recorder, path: &Path, command: &str) -> Result<()> {
        self.require(path, command)?;
        rec.manifest
            .inputs
            .insert(self.rel(path), Self::hash_file(path)?);
        Ok(())
    }

    fn output(&self, rec: &mut Recorder, path: &Path) -> Result<()> {
        rec.manifest
            .outputs
            .insert(self.rel(path), Self::hash_file(path)?);
        Ok(())
    }

    fn finish(&self, mut rec: Recorder, tag: &str) -> Result<Report> {
        let total = rec.start.elapsed().as_millis() as u64;
        rec.manifest.timings_ms.insert("total".into(), total);
        let path = self.manifest_dir().join(format!("{tag}.json"));
        let text = serde_json::to_string_pretty(&rec.manifest).expect("manifest serializes");
        write_file(&path, text.as_bytes())?;
        Ok(Report {
            manifest: path,
            lines: rec.lines,
        })
    }

    fn load_data(&self, rec: &mut Recorder) -> Result<Data> {
        let path = self.candidates_path();
        self.input(rec, &path, "phantom")?;
        Ok(Data {
            dir: self.data_dir(),
            candidates: load_candidates(&path)?,
            volumes: HashMap::new(),
        })
    }

    fn load_fold(&self, rec: &mut Recorder, fold: usize) -> Result<Fold> {
        let path = self.folds_path();
        self.input(rec, &path, "folds")?;
        let plan = FoldPlan::load(&path)?;
        plan.fold(fold).cloned()
    }

    /// Folds of the saved plan, or of the config when no plan exists yet.
    pub fn fold_count(&self) -> usize {
        FoldPlan::load(self.folds_path()).map_or(self.config.folds.count, |p| p.fold_count)
    }

    // ---- stages ----

    /// Generates the phantom dataset under the data directory.
    pub fn phantom(&self) -> Result<Report> {
        let mut rec = self.recorder("phantom", None, None, None);
        let mut spec = self.config.phantom.clone();
        spec.seed = self.seed(&mut rec, "phantom");
        let ds = gen_dataset(&spec, self.data_dir())?;
        let candidates_path = self.candidates_path();
        self.output(&mut rec, &candidates_path)?;
        self.output(&mut rec, &self.annotations_path())?;
        self.output(&mut rec, &self.data_dir().join("structures.csv"))?;
        for s in &ds.scans {
            self.output(
                &mut rec,
                &self.data_dir().join("volumes").join(format!("{s}.rvol")),
            )?;
        }
        rec.lines.push(format!(
            "phantom: {} scans, {} candidates, {} nodules in {}",
            ds.scans.len(),
            ds.candidates,
            ds.nodules,
            ds.dir.display()
        ));
        self.finish(rec, "phantom")
    }

    pub fn folds(&self) -> Result<Report> {
        let mut rec = self.recorder("folds", None, None, None);
        let data = self.load_data(&mut rec)?;
        let mut scans = scans_of(&data.candidates);
        scans.sort();
        let seed = self.seed(&mut rec, "folds");
        let plan = build_folds(&scans, self.config.folds.count, seed)?;
        plan.save(self.folds_path())?;
        self.output(&mut rec, &self.folds_path())?;
        rec.lines.push(format!(
            "folds: {} folds over {} scans",
            plan.fold_count,
            scans.len()
        ));
        self.finish(rec, "folds")
    }

    fn ae_patches(
        &self,
        data: &mut Data,
        scans: &[String],
    ) -> Result<(Vec<usize>, Vec<crate::patch::Patch2D>)> {
        let ids = data.indices(scans, Some(0));
        let mut patches = Vec::with_capacity(ids.len());
        for &i in &ids {
            let c = data.candidates[i].clone();
            patches.push(extract_patch2d(data.volume(&c.scan_id)?, &c, i)?);
        }
        Ok((ids, patches))
    }

    /// Trains the (denoising) autoencoder on the training scans' non-nodules.
    pub fn train_ae(&self, fold: usize, flavor: Flavor) -> Result<Report> {
        let mut rec = self.recorder("train-ae", Some(fold), None, None);
        let f = self.load_fold(&mut rec, fold)?;
        let mut data = self.load_data(&mut rec)?;
        let (_, patches) = self.ae_patches(&mut data, &f.train)?;
        let cfg = self.config.autoencoder.to_ae_config(flavor == Flavor::Dae);
        let seed = self.seed(
            &mut rec,
            &format!("train-ae/fold{fold}/{}", flavor.as_str()),
        );
        let t = Instant::now();
        let run = ae_train(&patches, &cfg, seed)?;
        rec.manifest
            .timings_ms
            .insert("train".into(), t.elapsed().as_millis() as u64);
        let meta = serde_json::json!({ "fold": fold, "flavor": flavor, "config": cfg });
        let ck = run
            .model
            .to_checkpoint(Some(run.adam), seed, run.losses.len() as u64, meta);
        let path = self.ae_path(fold, flavor);
        ck.save(&path)?;
        let mut log = String::from("iteration,loss\n");
        for (i, l) in run.losses.iter().enumerate() {
            writeln!(log, "{},{l}", i + 1).unwrap();
        }
        let log_path = self.ae_log_path(fold, flavor);
        write_file(&log_path, log.as_bytes())?;
        self.output(&mut rec, &path)?;
        self.output(&mut rec, &log_path)?;
        let (first, last) = (run.losses[0], run.losses[run.losses.len() - 1]);
        rec.lines.push(format!(
            "train-ae fold {fold} {}: {} patches, loss {first:.4} -> {last:.4} over {} iterations",
            flavor.as_str(),
            patches.len(),
            run.losses.len()
        ));
        self.finish(rec, &format!("train-ae-fold{fold}-{}", flavor.as_str()))
    }

    /// Writes one code vector per non-nodule, for the training scans and,
    /// separately, the validation scans.
    pub fn extract_features(&self, fold: usize, flavor: Flavor) -> Result<Report> {
        let mut rec = self.recorder("extract-features", Some(fold), None, None);
        let f = self.load_fold(&mut rec, fold)?;
        let ae_path = self.ae_path(fold, flavor);
        self.input(&mut rec, &ae_path, "train-ae")?;
        let model = AeModel::from_checkpoint(&Checkpoint::load(&ae_path)?)?;
        let mut data = self.load_data(&mut rec)?;
        let mut counts = Vec::new();
        for (scans, path) in [
            (&f.train, self.features_path(fold, flavor)),
            (&f.validation, self.validation_features_path(fold, flavor)),
        ] {
            let (ids, patches) = self.ae_patches(&mut data, scans)?;
            write_file(&path, encode_table(&model, &ids, &patches)?.as_bytes())?;
            self.output(&mut rec, &path)?;
            counts.push(ids.len());
        }
        rec.lines.push(format!(
            "extract-features fold {fold} {}: {} training and {} validation codes of size {}",
            flavor.as_str(),
            counts[0],
            counts[1],
            model.code_size()
        ));
        self.finish(
            rec,
            &format!("extract-features-fold{fold}-{}", flavor.as_str()),
        )
    }

    fn read_features(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f32>>)> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::Table(format!("{}: {e}", path.display())))?;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            let bad = |v: &str| Error::NonNumeric {
                table: path.display().to_string(),
                row: r,
                column: "feature".into(),
                value: v.to_string(),
            };
            ids.push(record[0].parse::<usize>().map_err(|_| bad(&record[0]))?);
            let row = record
                .iter()
                .skip(1)
                .map(|v| v.parse::<f32>().map_err(|_| bad(v)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok((ids, rows))
    }

    pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
        let (ids, rows) = Self::read_features(path)?;
        FeatureMatrix::from_rows(ids, &rows)
    }

    /// k-means on the extracted features.
    pub fn cluster(&self, fold: usize, flavor: Flavor, k: usize) -> Result<Report> {
        let mut rec = self.recorder("cluster", Some(fold), None, Some(k));
        let path = self.features_path(fold, flavor);
        self.input(&mut rec, &path, "extract-features")?;
        let features = Self::load_features(&path)?;
        let seed = self.seed(
            &mut rec,
            &format!("cluster/fold{fold}/{}/k{k}", flavor.as_str()),
        );
        let model = categorize(&features, k, seed, self.config.categorizer.restarts)?;
        let ck_path = self.clusters_path(fold, flavor, k);
        model.to_checkpoint(seed).save(&ck_path)?;
        let val_path = self.validation_features_path(fold, flavor);
        self.input(&mut rec, &val_path, "extract-features")?;
        let (val_ids, val_rows) = Self::read_features(&val_path)?;
        let mut text = String::from("candidate_index,cluster,split\n");
        for (id, c) in model.ids.iter().zip(&model.assignments) {
            writeln!(text, "{id},{c},train").unwrap();
        }
        for (id, row) in val_ids.iter().zip(&val_rows) {
            writeln!(text, "{id},{},validation", assign_cluster(&model, row)?).unwrap();
        }
        let csv_path = self.assignments_path(fold, flavor, k);
        write_file(&csv_path, text.as_bytes())?;
        self.output(&mut rec, &ck_path)?;
        self.output(&mut rec, &csv_path)?;
        let mut sizes = vec![0usize; k];
        for &c in &model.assignments {
            sizes[c] += 1;
        }
        rec.lines.push(format!(
            "cluster fold {fold} {} K={k}: sizes {sizes:?}, {} of {} dims kept, inertia {:.4}, {} validation codes assigned",
            flavor.as_str(),
            model.kept_dims.len(),
            model.feature_dim,
            model.inertia,
            val_ids.len()
        ));
        self.finish(rec, &format!("cluster-fold{fold}-{}-k{k}", flavor.as_str()))
    }

    fn load_assignments(path: &Path) -> Result<HashMap<usize, usize>> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::Table(format!("{}: {e}", path.display())))?;
        let mut out = HashMap::new();
        for record in rdr.records() {
            let record = record?;
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Table(format!("bad assignment row {record:?}")))
            };
            out.insert(parse(&record[0])?, parse(&record[1])?);
        }
        Ok(out)
    }

    /// Splits the training non-nodules among ensemble members, and the
    /// validation non-nodules the same way so each member is validated on
    /// the kind of candidate it was trained to reject.
    pub fn build_sets(&self, fold: usize, regime: Regime, k: usize) -> Result<Report> {
        let members = self.config.members_for(regime, k);
        let mut rec = self.recorder("build-sets", Some(fold), Some(regime), Some(members));
        let f = self.load_fold(&mut rec, fold)?;
        let data = self.load_data(&mut rec)?;
        let flavor = Flavor::for_regime(regime);
        let (map, cluster_model) = if regime.uses_clusters() {
            let csv_path = self.assignments_path(fold, flavor, k);
            self.input(&mut rec, &csv_path, "cluster")?;
            (
                Some(Self::load_assignments(&csv_path)?),
                Some(self.rel(&self.clusters_path(fold, flavor, k))),
            )
        } else {
            (None, None)
        };
        let lookup = |pool: &[usize]| -> Result<Option<Vec<usize>>> {
            map.as_ref()
                .map(|m| {
                    pool.iter()
                        .map(|i| {
                            m.get(i).copied().ok_or_else(|| {
                                Error::MissingAssignments(format!("candidate {i} has no cluster"))
                            })
                        })
                        .collect()
                })
                .transpose()
        };
        let name = self.run_name(regime, k);
        let split =
            |scans: &[String], stage: &str, rec: &mut Recorder| -> Result<RegimeDatasets<usize>> {
                let pool = data.indices(scans, Some(0));
                let assignments = lookup(&pool)?;
                let seed = self.seed(rec, &format!("{stage}/fold{fold}/{name}"));
                build_regime_datasets(
                    data.indices(scans, Some(1)),
                    pool,
                    regime,
                    assignments.as_deref(),
                    members,
                    seed,
                )
            };
        let datasets = split(&f.train, "build-sets", &mut rec)?;
        let validation = split(&f.validation, "build-sets-validation", &mut rec)?;
        let sizes: Vec<usize> = datasets.members.iter().map(Vec::len).collect();
        let val_sizes: Vec<usize> = validation.members.iter().map(Vec::len).collect();
        let file = SetsFile {
            fold,
            k: members,
            cluster_model,
            validation,
            datasets,
        };
        let dir = self.regime_dir(fold, regime, k);
        let path = dir.join("sets.json");
        write_file(
            &path,
            serde_json::to_string_pretty(&file)
                .expect("sets serialize")
                .as_bytes(),
        )?;
        self.output(&mut rec, &path)?;
        rec.lines.push(format!(
            "build-sets fold {fold} {regime} K={members}: {} nodules, member pools {sizes:?}, validation pools {val_sizes:?}",
            file.datasets.nodules.len()
        ));
        self.finish(rec, &format!("build-sets-fold{fold}-{name}"))
    }

    /// Trains every member of the ensemble, in parallel.
    pub fn train_ensemble(&self, fold: usize, regime: Regime, k: usize) -> Result<Report> {
        let members = self.config.members_for(regime, k);
        let mut rec = self.recorder("train-ensemble", Some(fold), Some(regime), Some(members));
        let dir = self.regime_dir(fold, regime, k);
        let sets_path = dir.join("sets.json");
        self.input(&mut rec, &sets_path, "build-sets")?;
        let text = fs::read_to_string(&sets_path).map_err(|e| Error::io(&sets_path, e))?;
        let sets: SetsFile = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidValue(format!("{}: {e}", sets_path.display())))?;
        if sets.datasets.regime != regime || sets.k != members {
            return Err(Error::KMismatch(format!(
                "{} holds regime {} with K = {}",
                sets_path.display(),
                sets.datasets.regime,
                sets.k
            )));
        }
        let mut data = self.load_data(&mut rec)?;

        let t = Instant::now();
        let mut nodules =
            Vec::with_capacity(sets.datasets.nodules.len() * crate::patch::AUGMENT_COUNT);
        for &i in &sets.datasets.nodules {
            let seed = self.seed(&mut rec, &format!("augment/fold{fold}/{i}"));
            let c = data.candidates[i].clone();
            nodules.extend(augment_nodule(data.volume(&c.scan_id)?, &c, i, seed)?);
        }
        let pool = sets
            .datasets
            .pool
            .iter()
            .map(|&i| data.patch3c(i))
            .collect::<Result<Vec<_>>>()?;
        // Nodules plus the member's own validation non-nodules; a member with
        // none of its kind in the validation scans sees all of them.
        let val = &sets.validation;
        let mut validation = Vec::with_capacity(members);
        for m in 0..members {
            let own = &val.members[m];
            let picked: Vec<usize> = if own.is_empty() {
                (0..val.pool.len()).collect()
            } else {
                own.clone()
            };
            let ids = val
                .nodules
                .iter()
                .copied()
                .chain(picked.iter().map(|&j| val.pool[j]));
            validation.push(ids.map(|i| data.patch3c(i)).collect::<Result<Vec<_>>>()?);
        }
        let ds = RegimeDatasets {
            regime,
            nodules,
            pool,
            members: sets.datasets.members.clone(),
        };
        rec.manifest
            .timings_ms
            .insert("patches".into(), t.elapsed().as_millis() as u64);

        let name = self.run_name(regime, k);
        let seeds: Vec<u64> = (0..members)
            .map(|m| self.seed(&mut rec, &format!("train-ensemble/fold{fold}/{name}/{m}")))
            .collect();
        let t = Instant::now();
        let runs: Vec<CnnTraining> = (0..members)
            .into_par_iter()
            .map(|m| cnn_train(&ds.member(m), &validation[m], &self.config.cnn, seeds[m]))
            .collect::<Result<_>>()?;
        rec.manifest
            .timings_ms
            .insert("train".into(), t.elapsed().as_millis() as u64);

        let mut files = Vec::with_capacity(members);
        let mut log = String::from("member,iteration,train_loss,validation_loss\n");
        for (m, run) in runs.iter().enumerate() {
            let meta = serde_json::json!({
                "fold": fold,
                "regime": regime,
                "member": m,
                "k": members,
                "iterations_run": run.iterations_run,
                "early_stopped": run.early_stopped,
            });
            let ck =
                run.model
                    .to_checkpoint(Some(run.adam), seeds[m], run.best_iteration as u64, meta);
            let file = format!("member{m}.ckpt");
            let path = dir.join(&file);
            ck.save(&path)?;
            self.output(&mut rec, &path)?;
            files.push(file);
            let val: HashMap<usize, f64> = run.validation.iter().copied().collect();
            for (i, l) in run.losses.iter().enumerate() {
                let v = val.get(&(i + 1)).map(|v| v.to_string()).unwrap_or_default();
                writeln!(log, "{m},{},{l},{v}", i + 1).unwrap();
            }
            let last = run.validation.last().map_or(f64::NAN, |v| v.1);
            rec.lines.push(format!(
                "  member {m}: {} non-nodules, {} validation, {} iterations (best {}), train loss {:.4}, validation loss {last:.4}",
                ds.members[m].len(),
                validation[m].len(),
                run.iterations_run,
                run.best_iteration,
                run.losses.last().copied().unwrap_or(f64::NAN),
            ));
        }
        let log_path = dir.join("train_log.csv");
        write_file(&log_path, log.as_bytes())?;
        self.output(&mut rec, &log_path)?;
        let manifest = EnsembleManifest {
            regime,
            k: members,
            cluster_model: sets.cluster_model.clone(),
            members: files,
            seeds,
            best_iterations: runs.iter().map(|r| r.best_iteration).collect(),
            config: self.config.cnn.clone(),
        };
        let ens_path = dir.join("ensemble.json");
        write_file(
            &ens_path,
            serde_json::to_string_pretty(&manifest)
                .expect("manifest serializes")
                .as_bytes(),
        )?;
        self.output(&mut rec, &ens_path)?;
        rec.lines.insert(
            0,
            format!(
                "train-ensemble fold {fold} {regime} K={members}: {} augmented nodules, {} pool, {} validation nodules",
                ds.nodules.len(),
                ds.pool.len(),
                val.nodules.len()
            ),
        );
        self.finish(rec, &format!("train-ensemble-fold{fold}-{name}"))
    }

    pub fn load_ensemble(
        &self,
        fold: usize,
        regime: Regime,
        k: usize,
    ) -> Result<(EnsembleManifest, Vec<CnnModel>)> {
        let dir = self.regime_dir(fold, regime, k);
        let path = dir.join("ensemble.json");
        self.require(&path, "train-ensemble")?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
        let mut models = Vec::with_capacity(manifest.members.len());
        for file in &manifest.members {
            let p = dir.join(file);
            self.require(&p, "train-ensemble")?;
            models.push(CnnModel::from_checkpoint(&Checkpoint::load(&p)?)?);
        }
        Ok((manifest, models))
    }

    /// Scores the test scans' candidates with the averaged ensemble.
    pub fn predict(&self, fold: usize, regime: Regime, k: usize) -> Result<Report> {
        let members = self.config.members_for(regime, k);
        let mut rec = self.recorder("predict", Some(fold), Some(regime), Some(members));
        let f = self.load_fold(&mut rec, fold)?;
        let dir = self.regime_dir(fold, regime, k);
        let (manifest, models) = self.load_ensemble(fold, regime, k)?;
        self.input(&mut rec, &dir.join("ensemble.json"), "train-ensemble")?;
        for file in &manifest.members {
            self.input(&mut rec, &dir.join(file), "train-ensemble")?;
        }
        let mut data = self.load_data(&mut rec)?;
        let ids = data.indices(&f.test, None);
        let patches = ids
            .iter()
            .map(|&i| data.patch3c(i))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Patch3C> = patches.iter().collect();
        let members_ref: Vec<&CnnModel> = models.iter().collect();
        let probs = predict_chunks(&members_ref, &refs)?;
        let scored: Vec<Candidate> = ids
            .iter()
            .zip(&probs)
            .map(|(&i, p)| Candidate {
                probability: Some(p.1),
                ..data.candidates[i].clone()
            })
            .collect();
        let path = dir.join("predictions.csv");
        save_candidates(&scored, &path)?;
        self.output(&mut rec, &path)?;
        rec.lines.push(format!(
            "predict fold {fold} {regime} K={}: {} candidates over {} scans",
            models.len(),
            scored.len(),
            f.test.len()
        ));
        self.finish(
            rec,
            &format!("predict-fold{fold}-{}", self.run_name(regime, k)),
        )
    }

    /// FROC evaluation of one fold's predictions, or of every fold's pooled
    /// when `fold` is `None`. Reads only candidate tables and annotations.
    pub fn evaluate(
        &self,
        fold: Option<usize>,
        regime: Regime,
        k: usize,
    ) -> Result<(Report, SummaryFile)> {
        let members = self.config.members_for(regime, k);
        let mut rec = self.recorder("evaluate", fold, Some(regime), Some(members));
        let folds: Vec<usize> = match fold {
            Some(f) => vec![f],
            None => (0..self.fold_count())
                .filter(|&f| {
                    self.regime_dir(f, regime, k)
                        .join("predictions.csv")
                        .exists()
                })
                .collect(),
        };
        if folds.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.regime_dir(0, regime, k).join("predictions.csv"),
                command: "predict".into(),
            });
        }
        let mut candidates = Vec::new();
        for &f in &folds {
            let path = self.regime_dir(f, regime, k).join("predictions.csv");
            self.input(&mut rec, &path, "predict")?;
            candidates.extend(load_candidates(&path)?);
        }
        let ann_path = self.annotations_path();
        self.input(&mut rec, &ann_path, "phantom")?;
        let scans = scans_of(&candidates);
        let annotations = load_annotations(&ann_path)?
            .into_iter()
            .filter(|a| scans.contains(&a.scan_id))
            .collect();
        let input = EvalInput {
            scans,
            candidates,
            annotations,
            irrelevant: Vec::new(),
        };
        let (dir, tag) = match fold {
            Some(f) => (
                self.regime_dir(f, regime, k),
                format!("fold{f}-{}", self.run_name(regime, k)),
            ),
            None => (
                self.pooled_dir(regime, k),
                format!("pooled-{}", self.run_name(regime, k)),
            ),
        };
        let seed = self.seed(&mut rec, &format!("evaluate/{tag}"));
        let eval = &self.config.eval;
        let (curve, summary) = evaluate(&input, &eval.fp_levels, eval.bootstrap, seed)?;
        let file = SummaryFile {
            regime,
            k: members,
            folds: folds.clone(),
            summary,
        };
        let curve_path = dir.join("froc.csv");
        save_curve(&curve, &curve_path)?;
        let summary_path = dir.join("summary.json");
        write_file(
            &summary_path,
            serde_json::to_string_pretty(&file)
                .expect("summary serializes")
                .as_bytes(),
        )?;
        let svg_path = dir.join("froc.svg");
        write_file(
            &svg_path,
            render_svg(&curve, &file.summary, &format!("{regime} K={members}")).as_bytes(),
        )?;
        for p in [&curve_path, &summary_path, &svg_path] {
            self.output(&mut rec, p)?;
        }
        let s = &file.summary;
        let levels: Vec<String> = s
            .fp_levels
            .iter()
            .zip(&s.sensitivities)
            .map(|(f, v)| format!("{f}:{v:.3}"))
            .collect();
        rec.lines.push(format!(
            "evaluate {regime} K={members} folds {folds:?}: CPM {:.4} ({} of {} nodules found) [{}]",
            s.cpm,
            s.nodules_detected,
            s.total_nodules,
            levels.join(" ")
        ));
        if let Some(ci) = &s.ci {
            rec.lines.push(format!(
                "  95% CI on CPM: [{:.4}, {:.4}] from {} resamples",
                ci.cpm_low, ci.cpm_high, ci.used
            ));
        }
        Ok((self.finish(rec, &format!("evaluate-{tag}"))?, file))
    }

    /// Parameter count and FLOPS of the configured ensemble.
    pub fn stats(&self, regime: Regime, k: usize) -> Result<(Report, StatsFile)> {
        let members = self.config.members_for(regime, k);
        let mut rec = self.recorder("stats", None, Some(regime), Some(members));
        let per_member = model_stats(&CnnModel::new(&self.config.cnn)?.net);
        let total = (0..members).fold(
            ModelStats {
                parameters: 0,
                flops: 0,
            },
            |acc, _| acc + per_member,
        );
        let parameter_ratio = total.parameters as f64 / TARGET_PARAMETERS as f64;
        let flops_ratio = total.flops as f64 / TARGET_FLOPS as f64;
        let file = StatsFile {
            members,
            per_member,
            total,
            target_parameters: TARGET_PARAMETERS,
            target_flops: TARGET_FLOPS,
            parameter_ratio,
            flops_ratio,
            within_tolerance: (parameter_ratio - 1.0).abs() <= PARAMETER_TOLERANCE
                && (flops_ratio - 1.0).abs() <= FLOPS_TOLERANCE,
        };
        let path = self.stats_path();
        write_file(
            &path,
            serde_json::to_string_pretty(&file)
                .expect("stats serialize")
                .as_bytes(),
        )?;
        self.output(&mut rec, &path)?;
        rec.lines.push(format!(
            "stats {members} members: {} parameters ({:+.1}% vs {TARGET_PARAMETERS}), {} FLOPS ({:+.1}% vs {TARGET_FLOPS})",
            total.parameters,
            (parameter_ratio - 1.0) * 100.0,
            total.flops,
            (flops_ratio - 1.0) * 100.0
        ));
        rec.lines.push(format!(
            "  per member: {} parameters, {} FLOPS",
            per_member.parameters, per_member.flops
        ));
        Ok((
            self.finish(rec, &format!("stats-{}", self.run_name(regime, k)))?,
            file,
        ))
    }

    /// Every stage for the given folds and regimes: the dataset and fold
    /// plan (when absent), autoencoder and clustering as the regimes need,
    /// then sets, training, prediction, per-fold and pooled evaluation.
    pub fn run(&self, folds: &[usize], regimes: &[Regime], k: usize) -> Result<Vec<Report>> {
        let mut reports = Vec::new();
        if !self.candidates_path().exists() {
            reports.push(self.phantom()?);
        }
        if !self.folds_path().exists() {
            reports.push(self.folds()?);
        }
        let mut flavors: Vec<Flavor> = regimes
            .iter()
            .filter(|r| r.uses_clusters())
            .map(|&r| Flavor::for_regime(r))
            .collect();
        flavors.dedup();
        for &f in folds {
            for &flavor in &flavors {
                reports.push(self.train_ae(f, flavor)?);
                reports.push(self.extract_features(f, flavor)?);
                reports.push(self.cluster(f, flavor, k)?);
            }
            for &r in regimes {
                reports.push(self.build_sets(f, r, k)?);
                reports.push(self.train_ensemble(f, r, k)?);
                reports.push(self.predict(f, r, k)?);
                reports.push(self.evaluate(Some(f), r, k)?.0);
            }
        }
        for &r in regimes {
            reports.push(self.evaluate(None, r, k)?.0);
        }
        Ok(reports)
    }
}
