//! Split-conformal abstention.
//!
//! A threshold `τ` is taken from calibration uncertainty scores; the model
//! answers when `u ≤ τ` and abstains otherwise. Two finite-sample statements
//! follow under exchangeability:
//!
//! * participation: `P(u ≤ τ) ∈ [1-α, 1-α + 1/(n+1))`;
//! * conditional correctness: `P(correct | u ≤ τ) ≥ (1-β)/(1-α+1/(n+1)) · c/n`,
//!   where `c` counts correct calibration records and `1-β = k/(c+1)` with `k`
//!   the number of correct calibration scores not above `τ`.
//!
//! [`monte_carlo_coverage`] checks both empirically by repeated resplitting.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::score::ScoredRecord;

/// Magnitude of the optional tie-breaking jitter.
pub const JITTER_MAGNITUDE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    /// `+∞` when the conformal rank exceeds `n` (keep everything).
    pub tau: f64,
    pub alpha: f64,
    pub n: usize,
}

/// `⌈(1-α)(n+1)⌉`, robust to the representation error in `1-α`.
///
/// A product that lands within 1e-9 above an integer is treated as that
/// integer, so e.g. α = 0.1, n = 9 gives rank 9 rather than 10.
pub fn conformal_rank(alpha: f64, n: usize) -> usize {
    let x = (1.0 - alpha) * (n as f64 + 1.0);
    let r = (x - 1e-9 * x.max(1.0)).ceil();
    r.max(0.0) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// The `⌈(1-α)(n+1)⌉`-th smallest score, or `+∞` when that rank exceeds `n`.
pub fn compute_threshold(scores: &[f64], alpha: f64) -> Result<ConformalThreshold> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::invalid("threshold needs at least one calibration score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("calibration scores must be finite"));
    }
    let n = scores.len();
    let rank = conformal_rank(alpha, n);
    let tau = if rank > n {
        f64::INFINITY
    } else {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[rank.max(1) - 1]
    };
    Ok(ConformalThreshold { tau, alpha, n })
}

/// Whether the model answers (`u ≤ τ`). `false` means abstain.
#[inline]
pub fn participates(u: f64, threshold: &ConformalThreshold) -> bool {
    u <= threshold.tau
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaResult {
    pub one_minus_beta: f64,
    /// `-∞` iff `k = 0`.
    pub sigma: f64,
    pub c: usize,
    pub k: usize,
}

/// Maximal coverage level of the correct-record scores that stays below `τ`.
///
/// `k = |{u ∈ U : u ≤ τ}|`, `1-β = k/(c+1)` and `σ` is the `k`-th smallest
/// element of `U`.
pub fn compute_beta(correct_scores: &[f64], tau: f64) -> BetaResult {
    let c = correct_scores.len();
    let mut below: Vec<f64> = correct_scores.iter().copied().filter(|&u| u <= tau).collect();
    let k = below.len();
    let sigma = if k == 0 {
        f64::NEG_INFINITY
    } else {
        below.sort_by(f64::total_cmp);
        below[k - 1]
    };
    BetaResult {
        one_minus_beta: k as f64 / (c as f64 + 1.0),
        sigma,
        c,
        k,
    }
}

/// Lower end of the participation interval, `1-α`.
pub fn participation_bound_low(alpha: f64) -> f64 {
    1.0 - alpha
}

/// Upper end of the participation interval, `1-α + 1/(n+1)`.
pub fn participation_bound_high(alpha: f64, n: usize) -> f64 {
    1.0 - alpha + 1.0 / (n as f64 + 1.0)
}

/// `(1-β) / (1-α + 1/(n+1)) · c/n`.
pub fn correctness_bound(n: usize, c: usize, alpha: f64, one_minus_beta: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    one_minus_beta / participation_bound_high(alpha, n) * (c as f64 / n as f64)
}

/// Adds uniform noise in `[-JITTER_MAGNITUDE, JITTER_MAGNITUDE]` to break ties.
pub fn jitter_scores(scores: &mut [f64], seed: u64) {
    let mut r = rng::stream(seed, "score-jitter");
    for s in scores.iter_mut() {
        *s += r.gen_range(-JITTER_MAGNITUDE..=JITTER_MAGNITUDE);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub alpha: f64,
    pub trials: usize,
    pub calib_fraction: f64,
    pub seed: u64,
    /// Jitter scores once before resplitting, to make ties almost surely absent.
    pub jitter: bool,
}

/// Outcome of one resplit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub tau: f64,
    pub one_minus_beta: f64,
    pub c_over_n: f64,
    pub correctness_bound: f64,
    pub participation: f64,
    /// `None` when no test record was kept.
    pub conditional_correctness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub alpha: f64,
    /// Calibration size per trial.
    pub n: usize,
    pub c_over_n: f64,
    /// Mean of the finite thresholds; `None` if every trial kept everything.
    pub tau_mean: Option<f64>,
    pub infinite_tau_trials: usize,
    pub one_minus_beta_mean: f64,
    pub participation_bound_low: f64,
    pub participation_bound_high: f64,
    pub participation_empirical: f64,
    pub participation_stderr: f64,
    pub correctness_bound: f64,
    pub correctness_empirical: Option<f64>,
    pub correctness_stderr: Option<f64>,
    pub trials: usize,
    /// Trials whose kept test set was empty; excluded from the correctness mean.
    pub degenerate_trials: usize,
}

/// Calibration and test sizes for a pool of `total` records.
pub fn calibration_size(total: usize, calib_fraction: f64) -> usize {
    ((total as f64 * calib_fraction).round() as usize).clamp(1, total.saturating_sub(1))
}

/// One resplit: `order` is a permutation of record indices; the first `n_cal`
/// entries calibrate, the rest are tested.
pub fn run_trial(records: &[ScoredRecord], order: &[usize], n_cal: usize, alpha: f64) -> Result<TrialOutcome> {
    let (cal, test) = order.split_at(n_cal);
    let cal_scores: Vec<f64> = cal.iter().map(|&i| records[i].u).collect();
    let threshold = compute_threshold(&cal_scores, alpha)?;
    let correct: Vec<f64> = cal
        .iter()
        .filter(|&&i| records[i].is_correct())
        .map(|&i| records[i].u)
        .collect();
    let beta = compute_beta(&correct, threshold.tau);
    let bound = correctness_bound(n_cal, beta.c, alpha, beta.one_minus_beta);

    let mut kept = 0usize;
    let mut kept_correct = 0usize;
    for &i in test {
        if participates(records[i].u, &threshold) {
            kept += 1;
            kept_correct += usize::from(records[i].is_correct());
        }
    }
    Ok(TrialOutcome {
        tau: threshold.tau,
        one_minus_beta: beta.one_minus_beta,
        c_over_n: beta.c as f64 / n_cal as f64,
        correctness_bound: bound,
        participation: kept as f64 / test.len() as f64,
        conditional_correctness: (kept > 0).then(|| kept_correct as f64 / kept as f64),
    })
}

/// Records in canonical (id) order, so the result does not depend on input order.
fn canonical_order(records: &[ScoredRecord]) -> Vec<ScoredRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Repeated random calibration/test resplitting.
///
/// Trial `i` shuffles indices with a stream derived from `(seed, i)`, so each
/// trial is independent of scheduling; trials run in parallel and are reduced
/// in index order.
pub fn monte_carlo_coverage(records: &[ScoredRecord], opts: &MonteCarloOptions) -> Result<GuaranteeReport> {
    check_alpha(opts.alpha)?;
    if records.len() < 10 {
        return Err(Error::insufficient(format!(
            "monte carlo needs at least 10 records, got {}",
            records.len()
        )));
    }
    if opts.trials == 0 {
        return Err(Error::invalid("monte carlo needs at least one trial"));
    }
    if !(opts.calib_fraction > 0.0 && opts.calib_fraction < 1.0) {
        return Err(Error::invalid("calibration fraction must lie in (0, 1)"));
    }
    for r in records {
        r.validate()?;
    }
    let mut pool = canonical_order(records);
    if opts.jitter {
        let mut u: Vec<f64> = pool.iter().map(|r| r.u).collect();
        jitter_scores(&mut u, opts.seed);
        for (r, v) in pool.iter_mut().zip(u) {
            r.u = v;
        }
    }
    let n_cal = calibration_size(pool.len(), opts.calib_fraction);
    let outcomes: Vec<TrialOutcome> = (0..opts.trials)
        .into_par_iter()
        .map(|t| {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng::indexed_stream(opts.seed, t as u64));
            run_trial(&pool, &order, n_cal, opts.alpha)
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(opts.alpha, n_cal, &outcomes))
}

/// Order-sensitive reduction over trials in index order.
pub fn aggregate(alpha: f64, n_cal: usize, outcomes: &[TrialOutcome]) -> GuaranteeReport {
    let trials = outcomes.len();
    let mean = |f: fn(&TrialOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / trials as f64;
    let participations: Vec<f64> = outcomes.iter().map(|o| o.participation).collect();
    let (p_mean, p_se) = mean_and_stderr(&participations);
    let correctness: Vec<f64> = outcomes.iter().filter_map(|o| o.conditional_correctness).collect();
    let (c_mean, c_se) = if correctness.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_and_stderr(&correctness);
        (Some(m), Some(s))
    };
    let finite: Vec<f64> = outcomes.iter().map(|o| o.tau).filter(|t| t.is_finite()).collect();
    GuaranteeReport {
        alpha,
        n: n_cal,
        c_over_n: mean(|o| o.c_over_n),
        tau_mean: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        infinite_tau_trials: trials - finite.len(),
        one_minus_beta_mean: mean(|o| o.one_minus_beta),
        participation_bound_low: participation_bound_low(alpha),
        participation_bound_high: participation_bound_high(alpha, n_cal),
        participation_empirical: p_mean,
        participation_stderr: p_se,
        correctness_bound: mean(|o| o.correctness_bound),
        correctness_empirical: c_mean,
        correctness_stderr: c_se,
        trials,
        degenerate_trials: trials - correctness.len(),
    }
}

/// Default sweep grid: α = 0.05, 0.10, …, 0.95.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=19).map(|i| f64::from(i) / 20.0).collect()
}

/// Header of the per-α sweep CSV.
pub const SWEEP_CSV_HEADER: &str =
    "alpha,participation_empirical,participation_low,correctness_empirical,correctness_bound";

/// One row of the sweep CSV. Undefined correctness is written as `nan`.
pub fn sweep_csv_row(r: &GuaranteeReport) -> String {
    format!(
        "{},{},{},{},{}",
        r.alpha,
        r.participation_empirical,
        r.participation_bound_low,
        r.correctness_empirical.unwrap_or(f64::NAN),
        r.correctness_bound
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(us: &[f64], js: &[u8]) -> Vec<ScoredRecord> {
        us.iter()
            .zip(js)
            .enumerate()
            .map(|(i, (&u, &j))| ScoredRecord::new(format!("r{i:04}"), u, j).unwrap())
            .collect()
    }

    #[test]
    fn threshold_examples() {
        let t = compute_threshold(&[0.4, 0.1, 0.3, 0.2], 0.5).unwrap();
        assert_eq!(t.tau, 0.3);
        let t = compute_threshold(&[5.0], 0.4).unwrap();
        assert_eq!(t.tau, f64::INFINITY);
        let t = compute_threshold(&[0.1, 0.2, 0.3], 1e-6).unwrap();
        assert_eq!(t.tau, f64::INFINITY);
        assert!(compute_threshold(&[], 0.1).is_err());
        assert!(compute_threshold(&[1.0], 0.0).is_err());
        assert!(compute_threshold(&[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn rank_is_robust_to_float_error() {
        // (1 - 0.1) * 10 = 9.000000000000002 in binary floating point
        assert_eq!(conformal_rank(0.1, 9), 9);
        assert_eq!(conformal_rank(0.5, 4), 3);
        assert_eq!(conformal_rank(0.4, 1), 2);
    }

    #[test]
    fn ties_occupy_consecutive_ranks() {
        let t = compute_threshold(&[1.0, 1.0, 1.0, 2.0], 0.5).unwrap();
        assert_eq!(t.tau, 1.0);
    }

    #[test]
    fn participation_boundary_is_inclusive() {
        let t = ConformalThreshold {
            tau: 0.3,
            alpha: 0.5,
            n: 4,
        };
        assert!(participates(0.2, &t));
        assert!(participates(0.3, &t));
        assert!(!participates(0.31, &t));
    }

    #[test]
    fn beta_examples() {
        let b = compute_beta(&[0.1, 0.2, 0.5], 0.3);
        assert_eq!((b.k, b.c), (2, 3));
        assert_eq!(b.one_minus_beta, 0.5);
        assert_eq!(b.sigma, 0.2);

        let b = compute_beta(&[], 1.0);
        assert_eq!(b.one_minus_beta, 0.0);
        assert_eq!(b.sigma, f64::NEG_INFINITY);

        let b = compute_beta(&[0.2, 0.1], f64::INFINITY);
        assert_eq!(b.k, 2);
        assert!((b.one_minus_beta - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(b.sigma, 0.2);
    }

    #[test]
    fn correctness_bound_examples() {
        assert_eq!(correctness_bound(100, 0, 0.2, 0.9), 0.0);
        assert_eq!(correctness_bound(100, 60, 0.2, 0.0), 0.0);
        // 0.9 / (0.8 + 1/101) * 0.6, evaluated with exact rationals:
        // 0.54 * 101 / 81.8 = 54.54 / 81.8
        let v = correctness_bound(100, 60, 0.2, 0.9);
        assert!((v - 0.666_748_166_259_168_7).abs() < 1e-12, "{v}");
    }

    #[test]
    fn all_correct_records_give_full_conditional_correctness() {
        let us: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let records = recs(&us, &[1; 40]);
        let rep = monte_carlo_coverage(
            &records,
            &MonteCarloOptions {
                alpha: 0.3,
                trials: 50,
                calib_fraction: 0.5,
                seed: 3,
                jitter: false,
            },
        )
        .unwrap();
        assert_eq!(rep.correctness_empirical, Some(1.0));
        assert_eq!(rep.correctness_stderr, Some(0.0));
    }

    #[test]
    fn empty_kept_sets_are_flagged() {
        // α = 0.99 puts τ at the smallest calibration score; whenever the lone
        // zero lands in calibration, no test record is kept
        let mut us = vec![1.0; 20];
        us[0] = 0.0;
        let records = recs(&us, &[1; 20]);
        let rep = monte_carlo_coverage(
            &records,
            &MonteCarloOptions {
                alpha: 0.99,
                trials: 20,
                calib_fraction: 0.5,
                seed: 1,
                jitter: false,
            },
        )
        .unwrap();
        assert!(rep.degenerate_trials > 0);
        assert_eq!(rep.trials, 20);
    }

    #[test]
    fn monte_carlo_rejects_tiny_pools() {
        let records = recs(&[0.1; 5], &[1; 5]);
        let opts = MonteCarloOptions {
            alpha: 0.1,
            trials: 1,
            calib_fraction: 0.5,
            seed: 0,
            jitter: false,
        };
        assert!(matches!(
            monte_carlo_coverage(&records, &opts),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn jitter_is_small_and_seeded() {
        let mut a = vec![1.0; 8];
        let mut b = vec![1.0; 8];
        jitter_scores(&mut a, 5);
        jitter_scores(&mut b, 5);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (v - 1.0).abs() <= JITTER_MAGNITUDE));
    }

    #[test]
    fn grid_and_csv_row() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 19);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[18] - 0.95).abs() < 1e-12);
        assert_eq!(
            SWEEP_CSV_HEADER.split(',').count(),
            sweep_csv_row(&aggregate(
                0.1,
                10,
                &[TrialOutcome {
                    tau: 1.0,
                    one_minus_beta: 0.5,
                    c_over_n: 0.5,
                    correctness_bound: 0.3,
                    participation: 0.9,
                    conditional_correctness: None,
                }]
            ))
            .split(',')
            .count()
        );
    }
}
