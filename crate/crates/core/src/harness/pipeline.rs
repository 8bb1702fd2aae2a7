//! The end-to-end pipeline. Each stage reads only files written by earlier
//! stages in the output directory, so any stage can be rerun on its own.
//!
//! ```text
//! train-toy       corpus.jsonl splits.json weights.bin weights.json train.json
//! extract         predictions.jsonl anisotropy.json features.jsonl
//! fit-stats       stats.json
//! fit-calibrator  calibrator.json
//! score           scores.jsonl
//! conformal       conformal.json curves.csv
//! evaluate        evaluation.json metrics.csv report.json
//! ablate          ablation.json ablation.csv report.json
//! ```
//!
//! Every file carries the config hash and root seed; a stage refuses inputs
//! stamped with a different hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::calibration::{
    calibrator_inputs, fit_calibrator, fit_stats, score_responses, CalibratorFile, DistributionStats, TokenRow,
};
use crate::conformal::GuaranteeReport;
use crate::error::{Error, Result};
use crate::fsio::{self, Provenance};
use crate::geometry::{token_features, AnisotropyAccumulator, AnisotropyMeans, SignalGroup};
use crate::metrics::{
    ablation_csv_row, ablation_sweep, curve_csv_row, evaluate_scores, group_label, participation_curve, render_csv,
    AblationContext, AblationResult, RankedEval, ABLATION_CSV_HEADER, CURVE_CSV_HEADER, METRICS_CSV_HEADER,
};
use crate::microformer::{
    exact_match, greedy_decode, read_weights, train, write_weights, FactTable, QueryExample, Weights,
};
use crate::rng::derive_seed;
use crate::score::{make_split, perplexity_score, DatasetSplit, ScoredRecord, SplitName};

pub const STAGES: [&str; 8] = [
    "train-toy",
    "extract",
    "fit-stats",
    "fit-calibrator",
    "score",
    "conformal",
    "evaluate",
    "ablate",
];

const POSITIVE_CLASS_NOTE: &str = "positive class = incorrect prediction (j = 0); higher score = more uncertain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub id: String,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub train: bool,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitsFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub ratios: [f64; 4],
    #[serde(flatten)]
    pub split: DatasetSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub train_facts: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub split: SplitName,
    pub trained: bool,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub generated: Vec<u32>,
    pub probs: Vec<f64>,
    pub j: u8,
    pub u_raw: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub means: AnisotropyMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub split: SplitName,
    pub step: usize,
    pub token: u32,
    pub confidence: f64,
    pub j: u8,
    /// `Ω ‖ Θ ‖ Φ_in ‖ Φ_out`.
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub config_hash: String,
}

impl FeatureRow {
    fn token_row(&self) -> TokenRow {
        TokenRow {
            id: self.id.clone(),
            step: self.step,
            confidence: self.confidence,
            features: self.features.clone(),
            j: self.j,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub stats: DistributionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorJson {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub train_tokens: usize,
    pub calibrator: CalibratorFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    /// Calibrated uncertainty.
    pub u: f64,
    pub j: u8,
    /// Raw perplexity.
    pub u_raw: f64,
    pub split: SplitName,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub pooled_records: usize,
    pub calibrated: Vec<GuaranteeReport>,
    pub raw: Vec<GuaranteeReport>,
}

/// Layer-averaged geometry summaries of correct and incorrect tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSummary {
    pub tokens_correct: usize,
    pub tokens_incorrect: usize,
    /// Mean of layer-averaged `Ω ⊙ Θ`.
    pub interaction_correct: f64,
    pub interaction_incorrect: f64,
    /// Mean of layer-averaged `Φ_in − Φ_out`.
    pub angular_correct: f64,
    pub angular_incorrect: f64,
    /// Stronger interaction for correct predictions.
    pub interaction_holds: bool,
    /// Smaller relative angular distance for correct predictions.
    pub angular_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub split: SplitName,
    pub responses: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub accuracy: Vec<SplitAccuracy>,
    /// Test-split metrics; absent when the split lacks one of the classes.
    pub calibrated: Option<RankedEval>,
    pub raw: Option<RankedEval>,
    pub hypothesis: Option<HypothesisSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDrop {
    pub group: String,
    pub mean_auroc_drop: f64,
    pub mean_auprc_drop: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub baseline: Option<RankedEval>,
    pub summary: Vec<GroupDrop>,
    pub results: Vec<AblationResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusFile {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub completed: Vec<String>,
    /// Set when a stage failed; outputs of later stages are missing or stale.
    pub failed: Option<StageFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub crate_version: String,
    pub config: ExperimentConfig,
    pub train_final_loss: Option<f64>,
    pub accuracy: Vec<SplitAccuracy>,
    pub calibrated: Option<RankedEval>,
    pub raw: Option<RankedEval>,
    pub auroc_gain: Option<f64>,
    pub hypothesis: Option<HypothesisSummary>,
    /// Monte Carlo reports at the headline α.
    pub conformal_calibrated: Option<GuaranteeReport>,
    pub conformal_raw: Option<GuaranteeReport>,
    pub ablation: Vec<GroupDrop>,
    pub files: Vec<String>,
}

/// An output directory bound to one resolved configuration.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub provenance: Provenance,
}

impl Run {
    /// Validates the config and writes `config.json`.
    pub fn new(cfg: ExperimentConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let provenance = Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
        };
        let run = Self { cfg, dir, provenance };
        fsio::write_json(
            &run.path("config.json"),
            &ResolvedConfig {
                config_hash: run.provenance.config_hash.clone(),
                seed: run.cfg.seed,
                config: run.cfg.clone(),
            },
        )?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn hash(&self) -> String {
        self.provenance.config_hash.clone()
    }

    fn check_hash(&self, file: &str, found: &str) -> Result<()> {
        if found != self.provenance.config_hash {
            return Err(Error::format(
                file,
                format!(
                    "written by config {found}, current config is {}; rerun the earlier stages",
                    self.provenance.config_hash
                ),
            ));
        }
        Ok(())
    }

    fn read_stamped<T: DeserializeOwned>(&self, file: &str, prov: impl Fn(&T) -> &Provenance) -> Result<T> {
        let v: T = fsio::read_json(&self.path(file))?;
        self.check_hash(file, &prov(&v).config_hash)?;
        Ok(v)
    }

    fn read_rows<T: DeserializeOwned>(&self, file: &str, hash: impl Fn(&T) -> &str) -> Result<Vec<T>> {
        let rows: Vec<T> = fsio::read_jsonl(&self.path(file))?;
        if let Some(r) = rows.first() {
            self.check_hash(file, hash(r))?;
        }
        Ok(rows)
    }

    fn csv_comments(&self) -> Vec<String> {
        vec![
            format!("config_hash={}", self.provenance.config_hash),
            format!("seed={}", self.provenance.seed),
            POSITIVE_CLASS_NOTE.to_string(),
        ]
    }

    fn update_status(&self, stage: &str, failure: Option<&Error>) -> Result<()> {
        let path = self.path("status.json");
        let mut status = fsio::read_json::<StatusFile>(&path)
            .ok()
            .filter(|s| s.provenance == self.provenance)
            .unwrap_or(StatusFile {
                provenance: self.provenance.clone(),
                completed: Vec::new(),
                failed: None,
            });
        status.completed.retain(|s| s != stage);
        match failure {
            None => {
                status.completed.push(stage.to_string());
                if status.failed.as_ref().is_some_and(|f| f.stage == stage) {
                    status.failed = None;
                }
            }
            Some(e) => {
                status.failed = Some(StageFailure {
                    stage: stage.to_string(),
                    error: e.to_string(),
                })
            }
        }
        fsio::write_json(&path, &status)
    }

    /// Runs one stage by name, recording the outcome in `status.json` and
    /// tagging any error with the stage.
    pub fn stage(&self, name: &str) -> Result<()> {
        let stage: &'static str = STAGES
            .iter()
            .find(|s| **s == name)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{name}`")))?;
        let out = match stage {
            "train-toy" => self.train_toy(),
            "extract" => self.extract(),
            "fit-stats" => self.fit_stats(),
            "fit-calibrator" => self.fit_calibrator(),
            "score" => self.score(),
            "conformal" => self.conformal(),
            "evaluate" => self.evaluate(),
            _ => self.ablate(),
        };
        self.update_status(stage, out.as_ref().err())?;
        out.map_err(|e| e.in_stage(stage))
    }

    pub fn run_all(&self) -> Result<()> {
        for s in STAGES {
            self.stage(s)?;
        }
        Ok(())
    }

    pub fn train_toy(&self) -> Result<()> {
        let cfg = &self.cfg;
        let table = FactTable::generate(&cfg.task, cfg.model.vocab, derive_seed(cfg.seed, "corpus"))?;
        let rows: Vec<CorpusRow> = table
            .facts
            .iter()
            .map(|f| CorpusRow {
                id: f.id.clone(),
                prompt: f.prompt.clone(),
                answer: f.answer.clone(),
                train: f.train,
                config_hash: self.hash(),
            })
            .collect();
        fsio::write_jsonl(&self.path("corpus.jsonl"), &rows)?;

        let ids: Vec<String> = rows.iter().map(|r| r.id.clone()).collect();
        let split = make_split(&ids, cfg.split.ratios, derive_seed(cfg.seed, "split"))?;
        fsio::write_json(
            &self.path("splits.json"),
            &SplitsFile {
                provenance: self.provenance.clone(),
                ratios: cfg.split.ratios,
                split,
            },
        )?;

        let pairs = table.training_pairs();
        let init = Weights::init(cfg.model_config())?;
        let (weights, report) = train(&pairs, init, &cfg.train_config())?;
        write_weights(&self.path("weights.bin"), &weights, Some(&self.provenance))?;
        fsio::write_json(
            &self.path("train.json"),
            &TrainFile {
                provenance: self.provenance.clone(),
                train_facts: pairs.len(),
                steps: report.steps,
                final_loss: report.final_loss,
                losses: report.losses,
            },
        )
    }

    fn load_weights(&self) -> Result<Weights> {
        let w = read_weights(&self.path("weights.bin"))?;
        let manifest: crate::microformer::WeightsManifest =
            fsio::read_json(&crate::microformer::sidecar_path(&self.path("weights.bin")))?;
        let found = manifest.provenance.map(|p| p.config_hash).unwrap_or_default();
        self.check_hash("weights.json", &found)?;
        Ok(w)
    }

    pub fn extract(&self) -> Result<()> {
        let weights = self.load_weights()?;
        let corpus: Vec<CorpusRow> = self.read_rows("corpus.jsonl", |r: &CorpusRow| &r.config_hash)?;
        let splits: SplitsFile = self.read_stamped("splits.json", |s: &SplitsFile| &s.provenance)?;
        let steps = self.cfg.task.answer_len;

        let decoded = corpus
            .par_iter()
            .map(|q| greedy_decode(&q.prompt, steps, &weights, true))
            .collect::<Result<Vec<_>>>()?;
        let located: Vec<SplitName> = corpus
            .iter()
            .map(|q| {
                splits
                    .split
                    .locate(&q.id)
                    .ok_or_else(|| Error::format("splits.json", format!("query {} is in no split", q.id)))
            })
            .collect::<Result<_>>()?;

        let mut predictions = Vec::with_capacity(corpus.len());
        for ((q, d), &split) in corpus.iter().zip(&decoded).zip(&located) {
            predictions.push(PredictionRow {
                id: q.id.clone(),
                split,
                trained: q.train,
                prompt: q.prompt.clone(),
                answer: q.answer.clone(),
                generated: d.tokens.clone(),
                probs: d.probs.clone(),
                j: u8::from(exact_match(&d.tokens, &q.answer)),
                u_raw: perplexity_score(&d.probs)?,
                config_hash: self.hash(),
            });
        }
        fsio::write_jsonl(&self.path("predictions.jsonl"), &predictions)?;

        let mc = &self.cfg.model;
        let mut acc = AnisotropyAccumulator::new(mc.layers, mc.width, self.cfg.geometry.mean_positions);
        for ((p, d), &split) in predictions.iter().zip(&decoded).zip(&located) {
            if split == SplitName::Reference {
                for tr in &d.traces {
                    acc.add(tr, p.j == 1);
                }
            }
        }
        let means = acc.finish();
        if !means.is_valid() {
            return Err(Error::insufficient(format!(
                "reference split has {} correct and {} incorrect decode steps; both populations are needed",
                means.in_count, means.out_count
            )));
        }
        fsio::write_json(
            &self.path("anisotropy.json"),
            &AnisotropyFile {
                provenance: self.provenance.clone(),
                means: means.clone(),
            },
        )?;

        let rows: Vec<Vec<FeatureRow>> = predictions
            .par_iter()
            .zip(&decoded)
            .map(|(p, d)| {
                d.traces
                    .iter()
                    .enumerate()
                    .map(|(step, tr)| {
                        let f = token_features(tr, &weights, &means)?;
                        Ok(FeatureRow {
                            id: p.id.clone(),
                            split: p.split,
                            step,
                            token: p.generated[step],
                            confidence: p.probs[step],
                            j: p.j,
                            features: f.to_vec(),
                            flags: f.flags,
                            config_hash: self.hash(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let rows: Vec<FeatureRow> = rows.into_iter().flatten().collect();
        fsio::write_jsonl(&self.path("features.jsonl"), &rows)
    }

    fn features(&self) -> Result<Vec<FeatureRow>> {
        self.read_rows("features.jsonl", |r: &FeatureRow| &r.config_hash)
    }

    pub fn fit_stats(&self) -> Result<()> {
        let rows = self.features()?;
        let pick = |j: u8| -> Vec<Vec<f64>> {
            rows.iter()
                .filter(|r| r.split == SplitName::Reference && r.j == j)
                .map(|r| r.features.clone())
                .collect()
        };
        let stats = fit_stats(&pick(1), &pick(0), self.cfg.stats.ridge)?;
        fsio::write_json(
            &self.path("stats.json"),
            &StatsFile {
                provenance: self.provenance.clone(),
                stats,
            },
        )
    }

    fn stats(&self) -> Result<DistributionStats> {
        Ok(self.read_stamped("stats.json", |s: &StatsFile| &s.provenance)?.stats)
    }

    pub fn fit_calibrator(&self) -> Result<()> {
        let rows = self.features()?;
        let scorer = self.stats()?.scorer()?;
        let include_raw = self.cfg.calibrator.include_raw_features;
        let train: Vec<&FeatureRow> = rows.iter().filter(|r| r.split == SplitName::Train).collect();
        let x = train
            .iter()
            .map(|r| calibrator_inputs(&scorer, &r.features, r.confidence, include_raw))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<u8> = train.iter().map(|r| r.j).collect();
        let model = fit_calibrator(&x, &labels, &self.cfg.calibrator)?;
        fsio::write_json(
            &self.path("calibrator.json"),
            &CalibratorJson {
                provenance: self.provenance.clone(),
                train_tokens: x.len(),
                calibrator: CalibratorFile::new(model, include_raw),
            },
        )
    }

    fn calibrator(&self) -> Result<CalibratorFile> {
        let c = self.read_stamped("calibrator.json", |c: &CalibratorJson| &c.provenance)?;
        c.calibrator.check()?;
        Ok(c.calibrator)
    }

    pub fn score(&self) -> Result<()> {
        let rows = self.features()?;
        let scorer = self.stats()?.scorer()?;
        let cal = self.calibrator()?;
        let token_rows: Vec<TokenRow> = rows.iter().map(FeatureRow::token_row).collect();
        let split_of: BTreeMap<&str, SplitName> = rows.iter().map(|r| (r.id.as_str(), r.split)).collect();
        let scores = score_responses(&cal.model, &scorer, &token_rows, cal.include_raw_features)?;
        let out: Vec<ScoreRow> = scores
            .into_iter()
            .map(|s| ScoreRow {
                split: split_of[s.id.as_str()],
                id: s.id,
                u: s.u,
                j: s.j,
                u_raw: s.u_raw,
                config_hash: self.hash(),
            })
            .collect();
        fsio::write_jsonl(&self.path("scores.jsonl"), &out)
    }

    fn scores(&self) -> Result<Vec<ScoreRow>> {
        self.read_rows("scores.jsonl", |r: &ScoreRow| &r.config_hash)
    }

    pub fn conformal(&self) -> Result<()> {
        let scores = self.scores()?;
        let pool: Vec<&ScoreRow> = scores
            .iter()
            .filter(|s| matches!(s.split, SplitName::Calibration | SplitName::Test))
            .collect();
        let records = |raw: bool| -> Vec<ScoredRecord> {
            pool.iter()
                .map(|s| ScoredRecord {
                    id: s.id.clone(),
                    u: if raw { s.u_raw } else { s.u },
                    j: s.j,
                })
                .collect()
        };
        let c = &self.cfg.conformal;
        let seed = derive_seed(self.cfg.seed, "conformal");
        let calibrated = participation_curve(&records(false), &c.alpha_grid, c.trials, c.calib_fraction, seed)?;
        let raw = participation_curve(&records(true), &c.alpha_grid, c.trials, c.calib_fraction, seed)?;
        let rows: Vec<String> = calibrated
            .iter()
            .map(|r| curve_csv_row("calibrated", r))
            .chain(raw.iter().map(|r| curve_csv_row("perplexity", r)))
            .collect();
        fsio::write_atomic(
            &self.path("curves.csv"),
            render_csv(&self.csv_comments(), CURVE_CSV_HEADER, &rows).as_bytes(),
        )?;
        fsio::write_json(
            &self.path("conformal.json"),
            &ConformalFile {
                provenance: self.provenance.clone(),
                pooled_records: pool.len(),
                calibrated,
                raw,
            },
        )
    }

    pub fn evaluate(&self) -> Result<()> {
        let scores = self.scores()?;
        let accuracy: Vec<SplitAccuracy> = SplitName::ALL
            .iter()
            .map(|&split| {
                let part: Vec<&ScoreRow> = scores.iter().filter(|s| s.split == split).collect();
                let correct = part.iter().filter(|s| s.j == 1).count();
                SplitAccuracy {
                    split,
                    responses: part.len(),
                    correct,
                    accuracy: if part.is_empty() {
                        0.0
                    } else {
                        correct as f64 / part.len() as f64
                    },
                }
            })
            .collect();
        let test: Vec<&ScoreRow> = scores.iter().filter(|s| s.split == SplitName::Test).collect();
        let labels = crate::metrics::detection_labels(test.iter().map(|s| s.j));
        let mut notes = Vec::new();
        let (calibrated, raw) = if labels.contains(&0) && labels.contains(&1) {
            let u: Vec<f64> = test.iter().map(|s| s.u).collect();
            let u_raw: Vec<f64> = test.iter().map(|s| s.u_raw).collect();
            (
                Some(evaluate_scores(&u, &labels)?),
                Some(evaluate_scores(&u_raw, &labels)?),
            )
        } else {
            notes.push("test split lacks correct or incorrect responses; ranking metrics undefined".into());
            (None, None)
        };
        let hypothesis = hypothesis_summary(&self.features()?, self.cfg.model.layers);
        if hypothesis.is_none() {
            notes.push("held-out splits lack correct or incorrect tokens; hypothesis summary undefined".into());
        }
        let mut rows = Vec::new();
        for (method, e) in [("calibrated", &calibrated), ("perplexity", &raw)] {
            if let Some(e) = e {
                rows.push(format!("{method},test,{},{}", e.auroc, e.auprc));
            }
        }
        fsio::write_atomic(
            &self.path("metrics.csv"),
            render_csv(&self.csv_comments(), METRICS_CSV_HEADER, &rows).as_bytes(),
        )?;
        fsio::write_json(
            &self.path("evaluation.json"),
            &EvaluationFile {
                provenance: self.provenance.clone(),
                accuracy,
                calibrated,
                raw,
                hypothesis,
                notes,
            },
        )?;
        self.write_report()
    }

    pub fn ablate(&self) -> Result<()> {
        let rows = self.features()?;
        let scorer = self.stats()?.scorer()?;
        let cal = self.calibrator()?;
        let test: Vec<TokenRow> = rows
            .iter()
            .filter(|r| r.split == SplitName::Test)
            .map(FeatureRow::token_row)
            .collect();
        let has_both = test.iter().any(|r| r.j == 1) && test.iter().any(|r| r.j == 0);
        let mut notes = Vec::new();
        let (baseline, results) = if has_both {
            let ctx = AblationContext {
                model: &cal.model,
                scorer: &scorer,
                rows: &test,
                layers: self.cfg.model.layers,
                include_raw: cal.include_raw_features,
            };
            let results = ablation_sweep(&ctx, derive_seed(self.cfg.seed, "ablation"), self.cfg.ablation.seeds)?;
            (Some(crate::metrics::baseline_eval(&ctx)?), results)
        } else {
            notes.push("test split lacks correct or incorrect responses; ablation skipped".into());
            (None, Vec::new())
        };
        let summary = summarize_ablation(&results);
        let csv_rows: Vec<String> = results.iter().map(ablation_csv_row).collect();
        fsio::write_atomic(
            &self.path("ablation.csv"),
            render_csv(&self.csv_comments(), ABLATION_CSV_HEADER, &csv_rows).as_bytes(),
        )?;
        fsio::write_json(
            &self.path("ablation.json"),
            &AblationFile {
                provenance: self.provenance.clone(),
                baseline,
                summary,
                results,
                notes,
            },
        )?;
        self.write_report()
    }

    /// Collects whatever stage outputs exist into `report.json`.
    pub fn write_report(&self) -> Result<()> {
        fn optional<T: DeserializeOwned>(run: &Run, file: &str, prov: impl Fn(&T) -> &Provenance) -> Option<T> {
            run.path(file)
                .exists()
                .then(|| run.read_stamped(file, prov).ok())
                .flatten()
        }
        let train: Option<TrainFile> = optional(self, "train.json", |t: &TrainFile| &t.provenance);
        let eval: Option<EvaluationFile> = optional(self, "evaluation.json", |t: &EvaluationFile| &t.provenance);
        let conf: Option<ConformalFile> = optional(self, "conformal.json", |t: &ConformalFile| &t.provenance);
        let abl: Option<AblationFile> = optional(self, "ablation.json", |t: &AblationFile| &t.provenance);
        let headline = |reports: &[GuaranteeReport]| {
            reports
                .iter()
                .find(|r| (r.alpha - self.cfg.conformal.alpha).abs() < 1e-12)
                .cloned()
        };
        let (calibrated, raw, hypothesis, accuracy) = match eval {
            Some(e) => (e.calibrated, e.raw, e.hypothesis, e.accuracy),
            None => (None, None, None, Vec::new()),
        };
        let mut files: Vec<String> = std::fs::read_dir(&self.dir)
            .map_err(|e| Error::io(&self.dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.') && n != "report.json")
            .collect();
        files.sort();
        let report = Report {
            provenance: self.provenance.clone(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.cfg.clone(),
            train_final_loss: train.map(|t| t.final_loss),
            accuracy,
            auroc_gain: calibrated.as_ref().zip(raw.as_ref()).map(|(c, r)| c.auroc - r.auroc),
            calibrated,
            raw,
            hypothesis,
            conformal_calibrated: conf.as_ref().and_then(|c| headline(&c.calibrated)),
            conformal_raw: conf.as_ref().and_then(|c| headline(&c.raw)),
            ablation: abl.map(|a| a.summary).unwrap_or_default(),
            files,
        };
        fsio::write_json(&self.path("report.json"), &report)
    }
}

/// Hypothesis summaries over every token outside the reference split.
pub fn hypothesis_summary(rows: &[FeatureRow], layers: usize) -> Option<HypothesisSummary> {
    let omega = SignalGroup::Omega.range(layers);
    let theta = SignalGroup::Theta.range(layers);
    let phi_in = SignalGroup::PhiIn.range(layers);
    let phi_out = SignalGroup::PhiOut.range(layers);
    let k = (2 * layers - 1) as f64;
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [0usize; 2];
    for r in rows.iter().filter(|r| r.split != SplitName::Reference) {
        let f = &r.features;
        let inter: f64 = f[omega.clone()]
            .iter()
            .zip(&f[theta.clone()])
            .map(|(o, t)| o * t)
            .sum::<f64>()
            / k;
        let ang: f64 = f[phi_in.clone()]
            .iter()
            .zip(&f[phi_out.clone()])
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / k;
        let c = usize::from(r.j == 1);
        sums[c][0] += inter;
        sums[c][1] += ang;
        counts[c] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return None;
    }
    let mean = |c: usize, i: usize| sums[c][i] / counts[c] as f64;
    Some(HypothesisSummary {
        tokens_correct: counts[1],
        tokens_incorrect: counts[0],
        interaction_correct: mean(1, 0),
        interaction_incorrect: mean(0, 0),
        angular_correct: mean(1, 1),
        angular_incorrect: mean(0, 1),
        interaction_holds: mean(1, 0) > mean(0, 0),
        angular_holds: mean(1, 1) < mean(0, 1),
    })
}

/// Mean drops per group label, in first-appearance order.
pub fn summarize_ablation(results: &[AblationResult]) -> Vec<GroupDrop> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for r in results {
        let label = group_label(&r.groups);
        if !acc.contains_key(&label) {
            order.push(label.clone());
        }
        let e = acc.entry(label).or_insert((0.0, 0.0, 0));
        e.0 += r.auroc_drop;
        e.1 += r.auprc_drop;
        e.2 += 1;
    }
    order
        .into_iter()
        .map(|g| {
            let (a, p, n) = acc[&g];
            GroupDrop {
                group: g,
                mean_auroc_drop: a / n as f64,
                mean_auprc_drop: p / n as f64,
                seeds: n,
            }
        })
        .collect()
}

/// Convenience for callers holding a path rather than a [`Run`].
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &Path) -> Result<Run> {
    let run = Run::new(cfg.clone(), dir)?;
    run.run_all()?;
    Ok(run)
}

/// Used by tests and the CLI to reload a fact table from `corpus.jsonl`.
pub fn corpus_facts(rows: &[CorpusRow]) -> Vec<QueryExample> {
    rows.iter()
        .map(|r| QueryExample {
            id: r.id.clone(),
            prompt: r.prompt.clone(),
            answer: r.answer.clone(),
            train: r.train,
        })
        .collect()
}

/// Conformal sweep over externally supplied records, written to `dir` as
/// `curves.csv` and `conformal.json` under the method name `external`.
pub fn external_conformal(cfg: &ExperimentConfig, records: &[ScoredRecord], dir: &Path) -> Result<ConformalFile> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let provenance = Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let c = &cfg.conformal;
    let reports = participation_curve(
        records,
        &c.alpha_grid,
        c.trials,
        c.calib_fraction,
        derive_seed(cfg.seed, "conformal"),
    )?;
    let comments = vec![
        format!("config_hash={}", provenance.config_hash),
        format!("seed={}", provenance.seed),
        POSITIVE_CLASS_NOTE.to_string(),
    ];
    let rows: Vec<String> = reports.iter().map(|r| curve_csv_row("external", r)).collect();
    fsio::write_atomic(
        &dir.join("curves.csv"),
        render_csv(&comments, CURVE_CSV_HEADER, &rows).as_bytes(),
    )?;
    let file = ConformalFile {
        provenance,
        pooled_records: records.len(),
        calibrated: reports,
        raw: Vec::new(),
    };
    fsio::write_json(&dir.join("conformal.json"), &file)?;
    Ok(file)
}
