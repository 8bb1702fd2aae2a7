//! Conformal abstention for generative models, with a representation-geometry
//! calibrator built on a fully instrumented toy transformer.
//!
//! * [`score`]: scored records, dataset splits, perplexity.
//! * [`conformal`]: thresholds, the `1-β` coverage level, participation and
//!   conditional-correctness bounds, Monte Carlo validation.
//! * [`microformer`]: the instrumented transformer, its training and decoding.
//! * [`geometry`]: contribution, rotation and anisotropy trajectories.
//! * [`calibration`]: Mahalanobis statistics and the token calibrator.
//! * [`metrics`]: AUROC/AUPRC, participation curves, permutation ablation.
//! * [`harness`]: configuration, synthetic data and the end-to-end pipeline.

pub mod calibration;
pub mod conformal;
pub mod error;
pub mod fsio;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod microformer;
pub mod rng;
pub mod score;

pub use error::{Error, Result};
