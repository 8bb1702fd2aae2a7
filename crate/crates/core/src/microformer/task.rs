//! Synthetic fact-recall task.
//!
//! A fact maps a two-token prompt `(subject, relation)` to a short answer.
//! Only a fraction of the table is used for training, so queries about the
//! held-out facts are answered from whatever the model generalizes, which is
//! usually wrong. That supplies incorrect predictions without a judge.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactTaskConfig {
    /// Subject tokens are `0..subjects`.
    pub subjects: usize,
    /// Relation tokens are `subjects..subjects + relations`.
    pub relations: usize,
    /// Number of `(subject, relation)` pairs in the table.
    pub facts: usize,
    pub answer_len: usize,
    /// Fraction of facts the model is trained on.
    pub coverage: f64,
    /// Fraction of facts whose answer follows a per-relation rule instead of
    /// being drawn at random.
    pub rule_fraction: f64,
}

impl Default for FactTaskConfig {
    fn default() -> Self {
        Self {
            subjects: 48,
            relations: 16,
            facts: 400,
            answer_len: 1,
            coverage: 0.8,
            rule_fraction: 0.0,
        }
    }
}

impl FactTaskConfig {
    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.subjects == 0 || self.relations == 0 {
            return bad("task.subjects and task.relations must be positive".into());
        }
        if self.subjects + self.relations > vocab {
            return bad(format!(
                "task needs {} prompt tokens but the vocabulary has {vocab}",
                self.subjects + self.relations
            ));
        }
        if self.facts == 0 || self.facts > self.subjects * self.relations {
            return bad(format!("task.facts must lie in 1..={}", self.subjects * self.relations));
        }
        if self.answer_len == 0 || 2 + self.answer_len - 1 > max_len {
            return bad(format!("task.answer_len must lie in 1..={}", max_len - 1));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return bad("task.coverage must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.rule_fraction) {
            return bad("task.rule_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// One query of the fact table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryExample {
    pub id: String,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    /// Whether the model sees this fact during training.
    #[serde(default)]
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactTable {
    pub facts: Vec<QueryExample>,
}

impl FactTable {
    pub fn generate(cfg: &FactTaskConfig, vocab: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "fact-table");
        let mut pairs: Vec<(u32, u32)> = (0..cfg.subjects as u32)
            .flat_map(|s| (0..cfg.relations as u32).map(move |rel| (s, cfg.subjects as u32 + rel)))
            .collect();
        pairs.shuffle(&mut r);
        pairs.truncate(cfg.facts);

        let offsets: Vec<u32> = (0..cfg.relations).map(|_| r.gen_range(0..vocab as u32)).collect();
        let n_train = (cfg.facts as f64 * cfg.coverage).round() as usize;
        let facts = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (s, rel))| {
                let ruled = r.gen_bool(cfg.rule_fraction);
                let answer: Vec<u32> = (0..cfg.answer_len as u32)
                    .map(|k| {
                        if ruled {
                            let off = offsets[(rel as usize - cfg.subjects) % cfg.relations];
                            (s + off + k * 7) % vocab as u32
                        } else {
                            r.gen_range(0..vocab as u32)
                        }
                    })
                    .collect();
                QueryExample {
                    id: format!("f{i:05}"),
                    prompt: vec![s, rel],
                    answer,
                    train: i < n_train,
                }
            })
            .collect();
        Ok(Self { facts })
    }

    pub fn training_pairs(&self) -> Vec<(Vec<u32>, Vec<u32>)> {
        self.facts
            .iter()
            .filter(|f| f.train)
            .map(|f| (f.prompt.clone(), f.answer.clone()))
            .collect()
    }
}

/// Correctness of a generated answer: exact token match.
pub fn exact_match(generated: &[u32], answer: &[u32]) -> bool {
    generated == answer
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn table_is_deterministic_and_covers_requested_fraction() {
        let cfg = FactTaskConfig {
            facts: 100,
            coverage: 0.8,
            ..Default::default()
        };
        let a = FactTable::generate(&cfg, 64, 3).unwrap();
        let b = FactTable::generate(&cfg, 64, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.facts.len(), 100);
        assert_eq!(a.training_pairs().len(), 80);
        let prompts: HashSet<_> = a.facts.iter().map(|f| f.prompt.clone()).collect();
        assert_eq!(prompts.len(), 100);
        for f in &a.facts {
            assert!(f.prompt[0] < 48 && (48..64).contains(&f.prompt[1]));
            assert!(f.answer.iter().all(|&t| t < 64));
        }
    }

    #[test]
    fn validation() {
        let cfg = FactTaskConfig::default();
        assert!(cfg.validate(64, 16).is_ok());
        assert!(cfg.validate(32, 16).is_err());
        assert!(FactTaskConfig { facts: 10_000, ..cfg }.validate(64, 16).is_err());
        assert!(FactTaskConfig { coverage: 1.5, ..cfg }.validate(64, 16).is_err());
    }

    #[test]
    fn exact_match_semantics() {
        assert!(exact_match(&[1, 2], &[1, 2]));
        assert!(!exact_match(&[1, 2], &[2, 1]));
        assert!(!exact_match(&[1], &[1, 2]));
    }
}
