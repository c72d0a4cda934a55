//! Slow invariants: real training runs on phantom data.

use fpr::autoencoder::{ae_train, AeConfig};
use fpr::classifier::{cnn_train, predict_chunks, CnnConfig, TrainingSet};
use fpr::config::PipelineConfig;
use fpr::patch::{augment_nodule, extract_patch2d, extract_patch3c, Patch3C};
use fpr::phantom::{gen_scan, PhantomSpec};

#[test]
fn desk_file_matches_desk_preset() {
    let file = PipelineConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
    assert_eq!(file, PipelineConfig::desk());
}

/// The phantom has to be learnable, or nothing downstream means anything.
#[test]
fn default_cnn_learns_the_phantom() {
    let spec = PhantomSpec::default();
    let (mut nodules, mut pool, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..12 {
        let scan = gen_scan(&spec, s).unwrap();
        for (i, c) in scan.candidates.iter().enumerate() {
            if s >= 8 {
                test.push(extract_patch3c(&scan.volume, c, i).unwrap());
            } else if c.label == Some(1) {
                nodules.extend(augment_nodule(&scan.volume, c, i, (s * 100 + i) as u64).unwrap());
            } else {
                pool.push(extract_patch3c(&scan.volume, c, i).unwrap());
            }
        }
    }
    let config = CnnConfig {
        iterations: 300,
        batch_size: 32,
        ..CnnConfig::default()
    };
    let all: Vec<usize> = (0..pool.len()).collect();
    let set = TrainingSet {
        nodules: &nodules,
        pool: &pool,
        non_nodules: &all,
    };
    let trained = cnn_train(&set, &[], &config, 3).unwrap();
    let refs: Vec<&Patch3C> = test.iter().collect();
    let probs = predict_chunks(&[&trained.model], &refs).unwrap();
    let rate = |label: u8| {
        let mine: Vec<bool> = probs
            .iter()
            .zip(&test)
            .filter(|(_, x)| x.label == label)
            .map(|(p, _)| u8::from(p.1 > p.0) == label)
            .collect();
        mine.iter().filter(|&&ok| ok).count() as f64 / mine.len() as f64
    };
    let balanced = (rate(0) + rate(1)) / 2.0;
    assert!(balanced > 0.8, "balanced accuracy {balanced:.3}");
}

#[test]
fn autoencoder_smoothed_loss_falls() {
    let spec = PhantomSpec::default();
    let mut patches = Vec::new();
    for s in 0..4 {
        let scan = gen_scan(&spec, s).unwrap();
        for (i, c) in scan.candidates.iter().enumerate() {
            patches.push(extract_patch2d(&scan.volume, c, i).unwrap());
        }
    }
    let config = AeConfig {
        hidden: vec![256, 128],
        iterations: 1000,
        ..AeConfig::default()
    };
    let losses = ae_train(&patches, &config, 5).unwrap().losses;
    assert!(losses.iter().all(|l| l.is_finite()));
    // means over windows of 100 iterations, so batch noise does not matter
    let windows: Vec<f64> = losses
        .chunks(100)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "{windows:?}");
    }
}
