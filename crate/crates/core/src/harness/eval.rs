use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::Result;
use crate::model::{forward_full, ModelParams};
use crate::synth::{make_test_set, Regime, SampleRecord};

const EVAL_CHUNK: usize = 250;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeMetrics {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Fraction of logits on the correct side of zero, i.e. of
/// `sigmoid(logit) > 0.5` agreeing with the label.
pub fn accuracy(logits: &[f64], labels: &[bool]) -> f64 {
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &fake)| (z > 0.0) == fake)
        .count();
    correct as f64 / logits.len().max(1) as f64
}

pub fn evaluate_records(params: &ModelParams, records: &[SampleRecord]) -> Result<RegimeMetrics> {
    let mut correct = 0;
    for chunk in records.chunks(EVAL_CHUNK) {
        let out = forward_full(params, chunk.iter().map(|r| &r.image))?;
        correct += out
            .iter()
            .zip(chunk)
            .filter(|(o, r)| (o.logit_tf > 0.0) == r.fake)
            .count();
    }
    Ok(RegimeMetrics {
        accuracy: correct as f64 / records.len().max(1) as f64,
        correct,
        total: records.len(),
    })
}

/// Accuracy on a freshly generated test set for `regime`. Test image seeds
/// come from a seed domain disjoint from training.
pub fn evaluate(params: &ModelParams, regime: Regime, cfg: &TrainConfig) -> Result<RegimeMetrics> {
    let records = make_test_set(cfg.n_test, regime, cfg.train_q, cfg.seed)?;
    evaluate_records(params, &records)
}
