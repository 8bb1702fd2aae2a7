#![allow(dead_code)]

use abstain_core::harness::ExperimentConfig;

/// Two layers, 50 facts, 10 Monte Carlo trials.
pub fn minimal_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for kv in [
        "model.layers=2",
        "model.width=32",
        "model.ff_width=64",
        "task.facts=50",
        "train.steps=400",
        "conformal.trials=10",
        "ablation.seeds=3",
    ] {
        c.set(kv).unwrap();
    }
    c
}

pub const MINIMAL_ARGS: [&str; 14] = [
    "--set",
    "model.layers=2",
    "--set",
    "model.width=32",
    "--set",
    "model.ff_width=64",
    "--set",
    "task.facts=50",
    "--set",
    "train.steps=400",
    "--set",
    "conformal.trials=10",
    "--set",
    "ablation.seeds=3",
];
