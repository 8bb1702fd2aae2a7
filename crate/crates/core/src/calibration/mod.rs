//! Mahalanobis statistics of token features and the token-level calibrator.
//!
//! A token is described by its distances `d_corr`, `d_inc` to the correct and
//! incorrect feature populations plus its raw confidence. The calibrator maps
//! those to a calibrated confidence `p̂`; the perplexity of the `p̂` sequence is
//! the response-level uncertainty.

mod gbdt;
mod logistic;
mod stats;

pub use gbdt::{fit_gbdt, GbdtModel, GbdtParams, Node, Tree};
pub use logistic::{fit_logistic, LogisticModel, LogisticParams};
pub use stats::{
    fit_stats, mahalanobis, mahalanobis_with, mean_and_covariance, DistributionStats, MahalanobisScorer, DEFAULT_RIDGE,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::perplexity_with_floor;

pub const CONFIDENCE_FLOOR: f64 = 1e-6;
pub const CALIBRATOR_FORMAT: &str = "abstain-calibrator";
pub const CALIBRATOR_VERSION: u32 = 1;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Mean binary cross-entropy of logits `margin` against targets `y`.
pub(crate) fn log_loss(margin: &[f64], y: &[f64]) -> f64 {
    let total: f64 = margin
        .iter()
        .zip(y)
        // log(1 + e^m) - y m, written to avoid overflow
        .map(|(&m, &t)| m.max(0.0) + (-m.abs()).exp().ln_1p() - t * m)
        .sum();
    total / margin.len() as f64
}

/// Shared row validation; returns the feature count.
pub(crate) fn check_rows(x: &[Vec<f64>], labels: &[u8]) -> Result<usize> {
    if x.len() != labels.len() {
        return Err(Error::invalid("feature rows and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if pos == 0 || pos == labels.len() {
        return Err(Error::insufficient(format!(
            "calibrator needs both labels, got {pos} positive of {}",
            labels.len()
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("feature rows have inconsistent or zero dimension"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("feature rows contain non-finite values"));
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorKind {
    #[default]
    Gbdt,
    Logistic,
}

/// Hyperparameters for either calibrator family.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibratorParams {
    pub kind: CalibratorKind,
    pub gbdt: GbdtParams,
    pub logistic: LogisticParams,
    /// Append the raw geometry features to `(d_corr, d_inc, confidence)`.
    pub include_raw_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrator {
    Gbdt(GbdtModel),
    Logistic(LogisticModel),
}

impl Calibrator {
    pub fn predict_logit(&self, x: &[f64]) -> f64 {
        match self {
            Calibrator::Gbdt(m) => m.predict_logit(x),
            Calibrator::Logistic(m) => m.predict_logit(x),
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Calibrator::Gbdt(m) => m.n_features,
            Calibrator::Logistic(m) => m.n_features,
        }
    }

    /// Calibrated confidence, clamped to `[1e-6, 1 − 1e-6]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.predict_logit(x)).clamp(CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR)
    }
}

/// On-disk wrapper with a format tag and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorFile {
    pub format: String,
    pub version: u32,
    pub include_raw_features: bool,
    pub model: Calibrator,
}

impl CalibratorFile {
    pub fn new(model: Calibrator, include_raw_features: bool) -> Self {
        Self {
            format: CALIBRATOR_FORMAT.into(),
            version: CALIBRATOR_VERSION,
            include_raw_features,
            model,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.format != CALIBRATOR_FORMAT || self.version != CALIBRATOR_VERSION {
            return Err(Error::format(
                "calibrator file",
                format!(
                    "expected {CALIBRATOR_FORMAT} v{CALIBRATOR_VERSION}, found {} v{}",
                    self.format, self.version
                ),
            ));
        }
        Ok(())
    }
}

/// Fits the configured calibrator; `labels` are 1 for tokens of correct responses.
pub fn fit_calibrator(x: &[Vec<f64>], labels: &[u8], params: &CalibratorParams) -> Result<Calibrator> {
    match params.kind {
        CalibratorKind::Gbdt => fit_gbdt(x, labels, &params.gbdt).map(Calibrator::Gbdt),
        CalibratorKind::Logistic => fit_logistic(x, labels, &params.logistic).map(Calibrator::Logistic),
    }
}

pub fn calibrate_token(model: &Calibrator, d_corr: f64, d_inc: f64, raw_confidence: f64) -> f64 {
    model.predict(&[d_corr, d_inc, raw_confidence])
}

/// Perplexity of calibrated confidences, each clamped to `[1e-6, 1 − 1e-6]`.
pub fn response_uncertainty(calibrated: &[f64]) -> Result<f64> {
    perplexity_with_floor(calibrated, CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR)
}

/// A generated token with its geometry features and raw confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub id: String,
    pub step: usize,
    pub confidence: f64,
    pub features: Vec<f64>,
    /// Correctness of the whole response.
    pub j: u8,
}

/// Calibrator input vector of one token.
pub fn calibrator_inputs(
    scorer: &MahalanobisScorer,
    features: &[f64],
    confidence: f64,
    include_raw: bool,
) -> Result<Vec<f64>> {
    let (d_corr, d_inc) = scorer.distances(features)?;
    let mut x = vec![d_corr, d_inc, confidence];
    if include_raw {
        x.extend_from_slice(features);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseScore {
    pub id: String,
    /// Calibrated uncertainty.
    pub u: f64,
    /// Perplexity of the raw confidences.
    pub u_raw: f64,
    pub j: u8,
}

/// Groups token rows by response id (sorted by id, then step) and aggregates
/// calibrated and raw confidences into response-level uncertainties.
pub fn score_responses(
    model: &Calibrator,
    scorer: &MahalanobisScorer,
    rows: &[TokenRow],
    include_raw: bool,
) -> Result<Vec<ResponseScore>> {
    let mut groups: BTreeMap<&str, Vec<&TokenRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.id.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(id, mut toks)| {
            toks.sort_by_key(|t| t.step);
            let j = toks[0].j;
            if toks.iter().any(|t| t.j != j) {
                return Err(Error::invalid(format!(
                    "response {id} has tokens with different labels"
                )));
            }
            let raw: Vec<f64> = toks.iter().map(|t| t.confidence).collect();
            let cal = toks
                .iter()
                .map(|t| Ok(model.predict(&calibrator_inputs(scorer, &t.features, t.confidence, include_raw)?)))
                .collect::<Result<Vec<f64>>>()?;
            Ok(ResponseScore {
                id: id.to_string(),
                u: response_uncertainty(&cal)?,
                u_raw: crate::score::perplexity_score(&raw)?,
                j,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
