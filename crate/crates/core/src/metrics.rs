//! Ranking metrics, participation curves and the signal-permutation ablation.
//!
//! Throughout, the positive class is an *incorrect* prediction (`j = 0`) and a
//! higher score means more uncertain.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{score_responses, Calibrator, MahalanobisScorer, ResponseScore, TokenRow};
use crate::conformal::{monte_carlo_coverage, GuaranteeReport, MonteCarloOptions};
use crate::error::{Error, Result};
use crate::geometry::SignalGroup;
use crate::rng;
use crate::score::ScoredRecord;

/// Detection labels: 1 for incorrect, 0 for correct.
pub fn detection_labels(j: impl IntoIterator<Item = u8>) -> Vec<u8> {
    j.into_iter().map(|j| u8::from(j == 0)).collect()
}

/// Score groups in decreasing score order: `(positives, negatives)` per
/// distinct score value.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Result<(Vec<(u64, u64)>, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ranking metrics need both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<f64> = None;
    for i in idx {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed above");
        if labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    Ok((groups, pos, neg))
}

/// Mann–Whitney AUROC with ties counted as one half.
///
/// The pair count is accumulated as an integer (doubled, to keep the halves
/// exact) and divided once.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (groups, pos, neg) = tie_groups(scores, labels)?;
    let mut neg_below = neg;
    let mut twice_u: u64 = 0;
    for &(p, n) in &groups {
        neg_below -= n;
        twice_u += p * (2 * neg_below + n);
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over distinct thresholds
/// from the highest score down.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (groups, pos, _) = tie_groups(scores, labels)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for &(p, n) in &groups {
        tp += p;
        fp += n;
        ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEval {
    pub auroc: f64,
    pub auprc: f64,
    pub n: usize,
    pub positives: usize,
}

pub fn evaluate_scores(scores: &[f64], labels: &[u8]) -> Result<RankedEval> {
    Ok(RankedEval {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        n: scores.len(),
        positives: labels.iter().filter(|&&l| l == 1).count(),
    })
}

pub fn evaluate_records(records: &[ScoredRecord]) -> Result<RankedEval> {
    let scores: Vec<f64> = records.iter().map(|r| r.u).collect();
    evaluate_scores(&scores, &detection_labels(records.iter().map(|r| r.j)))
}

/// One Monte Carlo run per grid point.
pub fn participation_curve(
    records: &[ScoredRecord],
    alpha_grid: &[f64],
    trials: usize,
    calib_fraction: f64,
    seed: u64,
) -> Result<Vec<GuaranteeReport>> {
    if let Some(a) = alpha_grid.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::invalid(format!("alpha grid value {a} outside (0, 1)")));
    }
    alpha_grid
        .iter()
        .map(|&alpha| {
            monte_carlo_coverage(
                records,
                &MonteCarloOptions {
                    alpha,
                    trials,
                    calib_fraction,
                    seed,
                    jitter: true,
                },
            )
        })
        .collect()
}

/// Fitted pieces needed to re-score permuted token rows.
pub struct AblationContext<'a> {
    pub model: &'a Calibrator,
    pub scorer: &'a MahalanobisScorer,
    pub rows: &'a [TokenRow],
    pub layers: usize,
    pub include_raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub groups: Vec<SignalGroup>,
    pub shuffle_confidence: bool,
    pub seed: u64,
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_drop: f64,
    pub auprc_drop: f64,
}

fn response_eval(scores: &[ResponseScore]) -> Result<RankedEval> {
    let u: Vec<f64> = scores.iter().map(|s| s.u).collect();
    evaluate_scores(&u, &detection_labels(scores.iter().map(|s| s.j)))
}

/// Unpermuted response-level metrics of the calibrated score.
pub fn baseline_eval(ctx: &AblationContext) -> Result<RankedEval> {
    response_eval(&score_responses(ctx.model, ctx.scorer, ctx.rows, ctx.include_raw)?)
}

/// Shuffles the selected feature blocks across tokens with one seeded
/// permutation (optionally the raw confidence too), re-scores every response
/// and reports the metric drop against `baseline`.
pub fn permutation_ablation(
    ctx: &AblationContext,
    baseline: &RankedEval,
    groups: &[SignalGroup],
    shuffle_confidence: bool,
    seed: u64,
) -> Result<AblationResult> {
    if groups.is_empty() && !shuffle_confidence {
        return Err(Error::invalid("ablation needs at least one group to permute"));
    }
    let n = ctx.rows.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let stream_name: String = groups.iter().map(|g| g.name()).collect::<Vec<_>>().join("+");
    perm.shuffle(&mut rng::stream(seed, &format!("ablation/{stream_name}")));
    let mut rows = ctx.rows.to_vec();
    for (dst, &src) in rows.iter_mut().zip(&perm) {
        let from = &ctx.rows[src];
        for g in groups {
            let r = g.range(ctx.layers);
            if from.features.len() < r.end {
                return Err(Error::invalid("feature rows are shorter than the signal layout"));
            }
            dst.features[r.clone()].copy_from_slice(&from.features[r]);
        }
        if shuffle_confidence {
            dst.confidence = from.confidence;
        }
    }
    let eval = response_eval(&score_responses(ctx.model, ctx.scorer, &rows, ctx.include_raw)?)?;
    Ok(AblationResult {
        groups: groups.to_vec(),
        shuffle_confidence,
        seed,
        auroc: eval.auroc,
        auprc: eval.auprc,
        auroc_drop: baseline.auroc - eval.auroc,
        auprc_drop: baseline.auprc - eval.auprc,
    })
}

/// Each single group and all four together, for `seeds` permutation seeds
/// derived from `root`. Results are ordered by group, then seed.
pub fn ablation_sweep(ctx: &AblationContext, root: u64, seeds: usize) -> Result<Vec<AblationResult>> {
    let baseline = baseline_eval(ctx)?;
    let mut plans: Vec<Vec<SignalGroup>> = SignalGroup::ALL.iter().map(|&g| vec![g]).collect();
    plans.push(SignalGroup::ALL.to_vec());
    let jobs: Vec<(Vec<SignalGroup>, u64)> = plans
        .into_iter()
        .flat_map(|p| (0..seeds as u64).map(move |s| (p.clone(), rng::derive_indexed(root, s))))
        .collect();
    jobs.into_par_iter()
        .map(|(g, s)| permutation_ablation(ctx, &baseline, &g, false, s))
        .collect()
}

pub fn group_label(groups: &[SignalGroup]) -> String {
    if groups.len() == SignalGroup::ALL.len() {
        "all".into()
    } else {
        groups.iter().map(|g| g.name()).collect::<Vec<_>>().join("+")
    }
}

/// CSV text with `#` comment lines, a header and rows.
pub fn render_csv(comments: &[String], header: &str, rows: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        s.push_str("# ");
        s.push_str(c);
        s.push('\n');
    }
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub const METRICS_CSV_HEADER: &str = "method,dataset,auroc,auprc";
pub const CURVE_CSV_HEADER: &str = "method,alpha,participation,correctness,bound,participation_low,participation_high";
pub const ABLATION_CSV_HEADER: &str = "group,seed,auroc,auprc,auroc_drop,auprc_drop";

pub fn curve_csv_row(method: &str, r: &GuaranteeReport) -> String {
    format!(
        "{method},{},{},{},{},{},{}",
        r.alpha,
        r.participation_empirical,
        r.correctness_empirical.unwrap_or(f64::NAN),
        r.correctness_bound,
        r.participation_bound_low,
        r.participation_bound_high
    )
}

pub fn ablation_csv_row(r: &AblationResult) -> String {
    format!(
        "{},{},{},{},{},{}",
        group_label(&r.groups),
        r.seed,
        r.auroc,
        r.auprc,
        r.auroc_drop,
        r.auprc_drop
    )
}
