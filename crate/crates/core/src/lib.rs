//! Universal domain adaptation lab.
//!
//! A one-vs-all open-set classifier with hard-negative mining, target entropy
//! minimization and unknown-weighted adversarial alignment, trained in two
//! stages on a synthetic benchmark whose target domain contains shifted
//! shared classes, misses some source classes, and adds novel ones.
//!
//! Module map:
//!
//! - [`data`]: benchmark generation, source augmentation, crops, batches.
//! - [`net`]: extractor, closed head, one-vs-all head, discriminator.
//! - [`losses`]: the four training losses and the unknown weight.
//! - [`optim`]: decoupled-decay adaptive optimizer and momentum SGD.
//! - [`trainer`]: schedules, per-step objective, stages.
//! - [`metrics`]: prediction rule, five-crop averaging, ACC and AUROC.
//! - [`experiment`]: configuration, runs, source-only baseline, ablations.

pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
