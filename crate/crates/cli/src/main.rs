//! `fpr`: runs the pipeline stages over an output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fpr::classifier::Regime;
use fpr::config::PipelineConfig;
use fpr::pipeline::{Flavor, Pipeline, Report};
use fpr::Error;

#[derive(Debug, Parser)]
#[command(
    name = "fpr",
    version,
    about = "False-positive reduction pipeline for nodule candidates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict fold-level commands to one fold (all folds otherwise).
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// ae, dae, r, a or s (`run` also accepts `all`); defaults to the config.
    #[arg(long, global = true)]
    regime: Option<String>,
    /// Ensemble size and cluster count; defaults to the config.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset.
    Phantom,
    /// Partition scans into cross-validation folds.
    Folds,
    /// Train the autoencoder (the denoising one with `--regime dae`).
    TrainAe,
    /// Encode training non-nodules into feature vectors.
    ExtractFeatures,
    /// k-means on the features.
    Cluster,
    /// Split the non-nodule pool among ensemble members.
    BuildSets,
    /// Train every ensemble member.
    TrainEnsemble,
    /// Score test candidates with the ensemble.
    Predict,
    /// FROC and CPM, per fold with `--fold`, pooled over folds otherwise.
    Evaluate,
    /// Parameter count and FLOPS of the configured ensemble.
    Stats,
    /// Every stage in order.
    Run,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact { .. } => 3,
        Error::InvalidConfig(_) => 4,
        Error::CheckpointVersion { .. } => 5,
        _ => 1,
    }
}

fn print(report: &Report) {
    for line in &report.lines {
        println!("{line}");
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let parse = |s: &str| {
        s.parse::<Regime>()
            .map_err(|e| Error::InvalidConfig(e.to_string()))
    };
    let all_regimes = cli.command == Command::Run
        && cli
            .regime
            .as_deref()
            .is_some_and(|r| r.eq_ignore_ascii_case("all"));
    let regime = match &cli.regime {
        Some(_) if all_regimes => config.ensemble.regime,
        Some(r) => parse(r)?,
        None => config.ensemble.regime,
    };
    let k = cli.k.unwrap_or(config.ensemble.k);
    if k == 0 {
        return Err(Error::InvalidConfig("--k must be positive".into()));
    }
    let p = Pipeline::new(config, &cli.out)?;
    let folds: Vec<usize> = match cli.fold {
        Some(f) if f >= p.fold_count() => {
            return Err(Error::InvalidConfig(format!(
                "--fold {f} outside 0..{}",
                p.fold_count()
            )))
        }
        Some(f) => vec![f],
        None => (0..p.fold_count()).collect(),
    };
    let flavor = Flavor::for_regime(regime);
    match cli.command {
        Command::Phantom => print(&p.phantom()?),
        Command::Folds => print(&p.folds()?),
        Command::Stats => print(&p.stats(regime, k)?.0),
        Command::Evaluate => print(&p.evaluate(cli.fold, regime, k)?.0),
        Command::Run => {
            let regimes = if all_regimes {
                Regime::ALL.to_vec()
            } else {
                vec![regime]
            };
            for r in p.run(&folds, &regimes, k)? {
                print(&r);
            }
        }
        cmd => {
            for &f in &folds {
                let report = match cmd {
                    Command::TrainAe => p.train_ae(f, flavor)?,
                    Command::ExtractFeatures => p.extract_features(f, flavor)?,
                    Command::Cluster => p.cluster(f, flavor, k)?,
                    Command::BuildSets => p.build_sets(f, regime, k)?,
                    Command::TrainEnsemble => p.train_ensemble(f, regime, k)?,
                    Command::Predict => p.predict(f, regime, k)?,
                    _ => unreachable!("handled above"),
                };
                print(&report);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
