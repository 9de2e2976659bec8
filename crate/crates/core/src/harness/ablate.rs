use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::synth::Regime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub regime: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub regime: String,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
    /// Final-step loss trace of every run, keyed `"<variant>/<seed>"`.
    pub final_losses: BTreeMap<String, super::StepTrace>,
}

impl AblationReport {
    pub fn mean(&self, variant: Variant, regime: Regime) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.variant == variant && s.regime == regime.name())
            .map(|s| s.mean_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,regime,accuracy\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.variant, r.seed, r.regime, r.accuracy).expect("string write");
        }
        for m in &self.summary {
            writeln!(s, "{},mean,{},{}", m.variant, m.regime, m.mean_accuracy).expect("string write");
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Trains every variant on every seed with otherwise identical settings and
/// evaluates both regimes. `on_run` sees each finished run's metrics.
pub fn ablate(
    cfg: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(&super::Metrics),
) -> Result<AblationReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let regimes = [Regime::QualityAware, Regime::QualityAgnostic];
    let mut rows = Vec::new();
    let mut final_losses = BTreeMap::new();
    for variant in Variant::ALL {
        for &seed in seeds {
            let run_cfg = TrainConfig {
                seed,
                variant,
                ..cfg.clone()
            };
            let out = train(&run_cfg)?;
            log::info!(
                "{variant} seed {seed}: aware={:.4} agnostic={:.4}",
                out.metrics.accuracy_for(Regime::QualityAware).unwrap_or(f64::NAN),
                out.metrics.accuracy_for(Regime::QualityAgnostic).unwrap_or(f64::NAN)
            );
            on_run(&out.metrics);
            for regime in regimes {
                rows.push(AblationRow {
                    variant,
                    seed,
                    regime: regime.name().to_string(),
                    accuracy: out.metrics.accuracy_for(regime).expect("evaluated"),
                });
            }
            if let Some(last) = out.metrics.traces.last() {
                final_losses.insert(format!("{variant}/{seed}"), last.clone());
            }
        }
    }
    let mut summary = Vec::new();
    for variant in Variant::ALL {
        for regime in regimes {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant && r.regime == regime.name())
                .map(|r| r.accuracy)
                .collect();
            summary.push(AblationSummary {
                variant,
                regime: regime.name().to_string(),
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            });
        }
    }
    Ok(AblationReport {
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        rows,
        summary,
        final_losses,
    })
}
