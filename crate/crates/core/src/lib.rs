//! False-positive reduction for pulmonary nodule candidates.
//!
//! Non-nodule candidates are categorized without supervision (autoencoder
//! codes clustered by k-means), one small 2D CNN is trained per category
//! against a shared nodule set, and the members' probabilities are averaged.
//! Results are scored with FROC analysis and the CPM summary.

pub mod autoencoder;
pub mod categorizer;
pub mod classifier;
pub mod config;
pub mod error;
pub mod folds;
pub mod froc;
pub mod nn;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod volume;

pub use error::{Error, Result};
