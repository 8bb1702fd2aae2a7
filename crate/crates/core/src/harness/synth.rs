use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::score::ScoredRecord;

/// Exchangeable synthetic records.
///
/// `j ~ Bernoulli(accuracy)` and `u = softplus(z + 10 · dependence · (1 − j))`
/// with `z ~ N(0, 1)`, so `u` is continuous and positive, independent of `j`
/// at `dependence = 0` and nearly separating at `dependence = 1`.
pub fn gen_synth_scores(n: usize, accuracy: f64, dependence: f64, seed: u64) -> Result<Vec<ScoredRecord>> {
    if !(accuracy > 0.0 && accuracy < 1.0) {
        return Err(Error::invalid(format!("accuracy must lie in (0, 1), got {accuracy}")));
    }
    if !(0.0..=1.0).contains(&dependence) {
        return Err(Error::invalid(format!(
            "dependence must lie in [0, 1], got {dependence}"
        )));
    }
    let mut r = rng::stream(seed, "synthetic-scores");
    Ok((0..n)
        .map(|i| {
            let j = u8::from(r.gen_bool(accuracy));
            let z: f64 = r.sample(StandardNormal);
            let x = z + 10.0 * dependence * f64::from(1 - j);
            let u = if x > 30.0 { x } else { x.exp().ln_1p() };
            ScoredRecord {
                id: format!("s{i:06}"),
                u,
                j,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_records;

    #[test]
    fn independence_gives_chance_auroc() {
        let r = gen_synth_scores(20_000, 0.6, 0.0, 1).unwrap();
        let auc = evaluate_records(&r).unwrap().auroc;
        assert!((auc - 0.5).abs() < 0.02, "{auc}");
    }

    #[test]
    fn full_dependence_separates() {
        let r = gen_synth_scores(5_000, 0.6, 1.0, 2).unwrap();
        assert!(evaluate_records(&r).unwrap().auroc > 0.999);
    }

    #[test]
    fn accuracy_matches_binomial_count() {
        let r = gen_synth_scores(2000, 0.6, 0.5, 3).unwrap();
        let c = r.iter().filter(|x| x.j == 1).count() as f64 / 2000.0;
        // four binomial standard errors
        assert!((c - 0.6).abs() < 4.0 * (0.24f64 / 2000.0).sqrt());
        assert!(r.iter().all(|x| x.u > 0.0 && x.u.is_finite()));
    }

    #[test]
    fn deterministic_and_validated() {
        assert_eq!(
            gen_synth_scores(50, 0.5, 0.3, 4).unwrap(),
            gen_synth_scores(50, 0.5, 0.3, 4).unwrap()
        );
        assert!(gen_synth_scores(10, 1.0, 0.0, 0).is_err());
        assert!(gen_synth_scores(10, 0.5, 1.5, 0).is_err());
    }
}
