use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, Metrics, TrainConfig, Variant};
use crate::cgc::{apply_update, collect_gradients, encoder_direction};
use crate::error::{Error, Result};
use crate::losses::{compute_centers, loss_all, loss_bce, loss_pair, loss_unpair};
use crate::model::{images_tensor, ModelParams};
use crate::optim::{adam_step, AdamState};
use crate::synth::{build_dataset, stratified_batches, DatasetSplit, Regime, SampleRecord};
use crate::tape::{Tape, Var};

/// Loss values of one optimization step. Absent components were disabled or
/// skipped for that batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub epoch: usize,
    pub batch_size: usize,
    pub pairs: usize,
    pub l_tf: f64,
    pub l_unpair: Option<f64>,
    pub l_pair: Option<f64>,
    pub l_cmp: Option<f64>,
    /// Samples that fed the compression head.
    pub cmp_samples: usize,
    pub total: f64,
}

impl StepTrace {
    /// Number of loss components that were computed this step.
    pub fn components(&self) -> usize {
        1 + [self.l_unpair, self.l_pair, self.l_cmp]
            .iter()
            .filter(|c| c.is_some())
            .count()
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Metrics,
}

fn finite(name: &str, tape: &Tape, v: Var, step: usize) -> Result<f64> {
    let x = tape.value(v).item().expect("scalar loss");
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{name} = {x} at step {step}")))
    }
}

/// `(raw_row, compressed_row)` positions within a batch for every pair id
/// with both halves present.
fn batch_pairs(records: &[&SampleRecord]) -> Vec<(usize, usize)> {
    let mut by_id: BTreeMap<u32, (Option<usize>, Option<usize>)> = BTreeMap::new();
    for (row, r) in records.iter().enumerate() {
        if let Some(pid) = r.pair_id {
            let e = by_id.entry(pid).or_default();
            if r.compressed {
                e.1 = Some(row);
            } else {
                e.0 = Some(row);
            }
        }
    }
    by_id
        .into_values()
        .filter_map(|(a, b)| Some((a?, b?)))
        .collect()
}

/// One forward pass, the variant's losses, and one parameter update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
    records: &[&SampleRecord],
    step: usize,
    epoch: usize,
) -> Result<StepTrace> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(images_tensor(records.iter().map(|r| &r.image))?);
    let fwd = bound.forward(&mut tape, x, false)?;

    let y_tf: Vec<f64> = records.iter().map(|r| r.y_tf()).collect();
    let l_tf = loss_bce(&mut tape, fwd.logit_tf, &y_tf)?;
    let pairs = batch_pairs(records);

    let use_oda = cfg.variant != Variant::Baseline;
    let use_pair = use_oda || cfg.baseline_with_pair;

    let l_unpair = if use_oda {
        let groups: Vec<_> = records.iter().map(|r| r.group()).collect();
        let centers = compute_centers(&mut tape, fwd.h_h, &groups)?;
        Some(loss_unpair(&mut tape, &centers, cfg.separation_metric)?.value)
    } else {
        None
    };
    let l_pair = if use_pair {
        loss_pair(&mut tape, fwd.h_e, &pairs, cfg.hsic_kernel)?
    } else {
        None
    };

    let mut main = l_tf;
    if let Some(u) = l_unpair {
        main = tape.add(main, u)?;
    }
    if let Some(p) = l_pair {
        let weighted = tape.scale(p, cfg.alpha);
        main = tape.add(main, weighted)?;
    }

    // only paired records reach the compression head
    let (l_cmp, cmp_samples) = if cfg.variant == Variant::OdaCgc && !pairs.is_empty() {
        let rows: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let labels: Vec<f64> = rows.iter().map(|&i| records[i].y_cmp()).collect();
        let logits = tape.gather_rows(fwd.logit_cmp, &rows)?;
        (Some(loss_bce(&mut tape, logits, &labels)?), rows.len())
    } else {
        (None, 0)
    };

    let trace = {
        let l_tf = finite("L_tf", &tape, l_tf, step)?;
        let l_unpair = l_unpair.map(|v| finite("L_unpair", &tape, v, step)).transpose()?;
        let l_pair = l_pair.map(|v| finite("L_pair", &tape, v, step)).transpose()?;
        let l_cmp = l_cmp.map(|v| finite("L_cmp", &tape, v, step)).transpose()?;
        StepTrace {
            step,
            epoch,
            batch_size: records.len(),
            pairs: pairs.len(),
            l_tf,
            l_unpair,
            l_pair,
            l_cmp,
            cmp_samples,
            total: loss_all(
                l_unpair.unwrap_or(0.0),
                l_pair.unwrap_or(0.0),
                l_tf,
                l_cmp.unwrap_or(0.0),
                cfg.alpha,
            ),
        }
    };

    match cfg.variant {
        Variant::Baseline | Variant::Oda => {
            let grads = tape.backward(main)?.into_params();
            adam_step(params, &grads, state, cfg.lr)?;
        }
        Variant::OdaCgc => {
            let (bundle, heads) = collect_gradients(&tape, Some(main), l_cmp)?;
            let direction = encoder_direction(&bundle, true)?;
            if direction.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("encoder gradient at step {step}")));
            }
            apply_update(params, &direction, &heads, state, cfg.lr)?;
        }
    }
    Ok(trace)
}

/// Trains on an already-built split. Returns final parameters and the loss
/// traces; accuracies are left empty.
pub fn train_on(cfg: &TrainConfig, split: &DatasetSplit) -> Result<(ModelParams, Vec<StepTrace>)> {
    cfg.validate()?;
    let mut params = ModelParams::init(cfg.seed);
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ba7_c4e5);
    let mut traces = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = stratified_batches(split, cfg.batch_size, &mut rng)?;
        for batch in batches {
            let records: Vec<&SampleRecord> = batch.iter().map(|&i| &split.records[i]).collect();
            step += 1;
            let trace = train_step(&mut params, &mut state, cfg, &records, step, epoch)?;
            log::debug!(
                "step {step} epoch {epoch}: L_tf={:.4} total={:.4}",
                trace.l_tf,
                trace.total
            );
            traces.push(trace);
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok((params, traces))
}

/// Builds the dataset, trains, and evaluates both inference regimes.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = build_dataset(&cfg.dataset_params())?;
    let (params, traces) = train_on(cfg, &split)?;
    let mut accuracy = BTreeMap::new();
    for regime in [Regime::QualityAware, Regime::QualityAgnostic] {
        accuracy.insert(regime.name().to_string(), evaluate(&params, regime, cfg)?);
    }
    Ok(TrainOutcome {
        params,
        metrics: Metrics {
            config: cfg.clone(),
            steps: traces.len(),
            accuracy,
            traces,
        },
    })
}
