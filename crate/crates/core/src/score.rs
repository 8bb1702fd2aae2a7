//! Scored records, dataset splits and the perplexity uncertainty score.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// One (query, prediction) pair: its uncertainty score and correctness label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub id: String,
    pub u: f64,
    pub j: u8,
}

impl ScoredRecord {
    pub fn new(id: impl Into<String>, u: f64, j: u8) -> Result<Self> {
        let r = Self { id: id.into(), u, j };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.u.is_finite() {
            return Err(Error::invalid(format!("record {}: score is not finite", self.id)));
        }
        if self.j > 1 {
            return Err(Error::invalid(format!(
                "record {}: label must be 0 or 1, got {}",
                self.id, self.j
            )));
        }
        Ok(())
    }

    pub fn is_correct(&self) -> bool {
        self.j == 1
    }
}

/// Per-token probabilities of a generated answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenConfidenceSequence {
    pub id: String,
    pub probs: Vec<f64>,
}

/// Perplexity `exp(-(1/N) Σ log p_t)` of a sequence of token probabilities.
///
/// Each probability is clamped into `[PROB_FLOOR, 1]` first.
pub fn perplexity_score(probs: &[f64]) -> Result<f64> {
    perplexity_with_floor(probs, PROB_FLOOR, 1.0)
}

pub(crate) fn perplexity_with_floor(probs: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::invalid("perplexity of an empty sequence"));
    }
    let mut sum = 0.0;
    for &p in probs {
        if p.is_nan() {
            return Err(Error::invalid("token probability is NaN"));
        }
        sum += p.clamp(lo, hi).ln();
    }
    Ok((-sum / probs.len() as f64).exp())
}

/// Disjoint reference / train / calibration / test id sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub reference: Vec<String>,
    pub train: Vec<String>,
    pub calibration: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Reference,
    Train,
    Calibration,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Reference,
        SplitName::Train,
        SplitName::Calibration,
        SplitName::Test,
    ];
}

impl DatasetSplit {
    pub fn part(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Reference => &self.reference,
            SplitName::Train => &self.train,
            SplitName::Calibration => &self.calibration,
            SplitName::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> [usize; 4] {
        [
            self.reference.len(),
            self.train.len(),
            self.calibration.len(),
            self.test.len(),
        ]
    }

    /// Which part holds `id`, if any.
    pub fn locate(&self, id: &str) -> Option<SplitName> {
        SplitName::ALL
            .into_iter()
            .find(|&n| self.part(n).iter().any(|x| x == id))
    }
}

/// Part sizes for `n` items by the largest-remainder rule.
///
/// Remainder ties go to the earlier part.
pub fn largest_remainder_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid("split ratios must be finite and nonnegative"));
    }
    let total: f64 = ratios.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("split ratios must have a positive sum"));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rems: Vec<Option<f64>> = quotas.iter().map(|q| Some(q - q.floor())).collect();
    let assigned: usize = sizes.iter().sum();
    for _ in 0..n.saturating_sub(assigned) {
        // remainders within 1e-9 of each other count as tied
        let mut best: Option<usize> = None;
        for (i, r) in rems.iter().enumerate() {
            if let Some(r) = r {
                if best.map_or(true, |b| *r > rems[b].unwrap() + 1e-9) {
                    best = Some(i);
                }
            }
        }
        let b = best.expect("fewer parts than leftover items");
        sizes[b] += 1;
        rems[b] = None;
    }
    Ok(sizes)
}

/// Seeded shuffle, then contiguous slices sized by [`largest_remainder_sizes`].
pub fn make_split(ids: &[String], ratios: [f64; 4], seed: u64) -> Result<DatasetSplit> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate id `{id}`")));
        }
    }
    let sizes = largest_remainder_sizes(ids.len(), &ratios)?;
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, "dataset-split"));
    let mut it = shuffled.into_iter();
    let mut take = |k: usize| -> Vec<String> { it.by_ref().take(k).collect() };
    Ok(DatasetSplit {
        reference: take(sizes[0]),
        train: take(sizes[1]),
        calibration: take(sizes[2]),
        test: take(sizes[3]),
    })
}

/// Reads one JSON object per non-empty line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::format(what, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::format(what, format!("line {}: {e}", lineno + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, rows: &[T]) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut writer, row)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses scored records and validates each one.
pub fn read_scored_records(reader: impl BufRead) -> Result<Vec<ScoredRecord>> {
    let rows: Vec<ScoredRecord> = read_jsonl(reader, "scored record")?;
    for r in &rows {
        r.validate()?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("q{i}")).collect()
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity_score(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((perplexity_score(&[0.5, 0.5]).unwrap() - 2.0).abs() < 1e-12);
        // geometric mean of 0.5 and 0.125 is 0.25
        assert!((perplexity_score(&[0.5, 0.125]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_rejects_empty_and_floors_zero() {
        assert!(matches!(perplexity_score(&[]), Err(Error::InvalidInput(_))));
        let u = perplexity_score(&[0.0]).unwrap();
        assert!(u.is_finite());
        assert!((u - 1e12).abs() / 1e12 < 1e-9);
    }

    #[test]
    fn split_exact_ratio() {
        let s = make_split(&ids(10), [5.0, 3.0, 1.0, 1.0], 7).unwrap();
        assert_eq!(s.sizes(), [5, 3, 1, 1]);
    }

    #[test]
    fn split_all_to_reference() {
        let s = make_split(&ids(4), [1.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(s.sizes(), [4, 0, 0, 0]);
    }

    /// Largest remainder rule, written out with exact integer arithmetic.
    fn brute_largest_remainder(n: usize, w: [u64; 4]) -> [usize; 4] {
        let total: u64 = w.iter().sum();
        let n64 = n as u64;
        let mut sizes = [0usize; 4];
        let mut rems = [0u64; 4];
        for i in 0..4 {
            sizes[i] = (w[i] * n64 / total) as usize;
            rems[i] = w[i] * n64 % total;
        }
        let mut left = n - sizes.iter().sum::<usize>();
        while left > 0 {
            let mut best = 0;
            for i in 1..4 {
                if rems[i] > rems[best] {
                    best = i;
                }
            }
            sizes[best] += 1;
            rems[best] = 0;
            left -= 1;
        }
        sizes
    }

    #[test]
    fn split_thirteen_matches_brute_force() {
        let s = make_split(&ids(13), [5.0, 3.0, 1.0, 1.0], 3).unwrap();
        let expect = brute_largest_remainder(13, [5, 3, 1, 1]);
        assert_eq!(s.sizes(), expect);
        // 6.5, 3.9, 1.3, 1.3 → floors 6,3,1,1 (11), remainders .5 .9 .3 .3
        assert_eq!(expect, [7, 4, 1, 1]);
    }

    #[test]
    fn split_rejects_duplicates() {
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(
            make_split(&dup, [1.0, 1.0, 1.0, 1.0], 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip_and_validation() {
        let rows = vec![ScoredRecord::new("a", 1.5, 1).unwrap()];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"id\":\"a\",\"u\":1.5,\"j\":1}\n"
        );
        assert_eq!(read_scored_records(&buf[..]).unwrap(), rows);
        assert!(read_scored_records(&b"{\"id\":\"a\",\"u\":1.0,\"j\":2}\n"[..]).is_err());
        let seqs: Vec<TokenConfidenceSequence> =
            read_jsonl(&b"{\"id\":\"x\",\"probs\":[0.5,0.25]}\n"[..], "probs").unwrap();
        assert_eq!(seqs[0].probs.len(), 2);
    }

    proptest! {
        #[test]
        fn perplexity_is_permutation_invariant(mut p in prop::collection::vec(1e-6f64..=1.0, 1..20), rot in 0usize..20) {
            let a = perplexity_score(&p).unwrap();
            let k = rot % p.len();
            p.rotate_left(k);
            p.reverse();
            let b = perplexity_score(&p).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a);
            prop_assert!(a >= 1.0 - 1e-12);
        }

        #[test]
        fn raising_a_probability_lowers_perplexity(p in prop::collection::vec(1e-3f64..0.9, 1..10), idx in 0usize..10, bump in 0.01f64..0.1) {
            let i = idx % p.len();
            let mut q = p.clone();
            q[i] += bump;
            prop_assert!(perplexity_score(&q).unwrap() < perplexity_score(&p).unwrap());
        }

        #[test]
        fn split_is_disjoint_exhaustive_and_reproducible(n in 0usize..60, seed in any::<u64>(),
                w in prop::array::uniform4(0u64..6)) {
            prop_assume!(w.iter().sum::<u64>() > 0);
            let all = ids(n);
            let ratios = w.map(|x| x as f64);
            let a = make_split(&all, ratios, seed).unwrap();
            let b = make_split(&all, ratios, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.sizes(), brute_largest_remainder(n, w));
            let mut seen: Vec<String> = SplitName::ALL.iter().flat_map(|&s| a.part(s).to_vec()).collect();
            seen.sort();
            let mut expect = all.clone();
            expect.sort();
            prop_assert_eq!(seen, expect);
        }
    }
}
