//! Training, evaluation, ablation and feature export.

mod ablate;
mod eval;
mod export;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::QualityFactor;
use crate::error::{Error, Result};
use crate::losses::{HsicKernel, SeparationMetric, DEFAULT_ALPHA};
use crate::synth::DatasetParams;

pub use ablate::{ablate, AblationReport, AblationRow, AblationSummary};
pub use eval::{accuracy, evaluate, evaluate_records, RegimeMetrics};
pub use export::{export_features, write_features_csv};
pub use train::{train, train_on, train_step, StepTrace, TrainOutcome};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// True/fake cross-entropy only.
    Baseline,
    /// Adds the center-separation and HSIC pairing losses, plain summed
    /// gradients.
    Oda,
    /// Adds the compression head with reversed, conflict-projected encoder
    /// gradients.
    #[default]
    OdaCgc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Oda, Variant::OdaCgc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Oda => "oda",
            Variant::OdaCgc => "oda_cgc",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "oda" => Ok(Variant::Oda),
            "oda_cgc" => Ok(Variant::OdaCgc),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_train: usize,
    pub frac_paired: f64,
    pub train_q: QualityFactor,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub hsic_kernel: HsicKernel,
    pub separation_metric: SeparationMetric,
    /// Test images per regime.
    pub n_test: usize,
    /// See [`DatasetParams::unpaired_compressed_frac`].
    pub unpaired_compressed_frac: f64,
    /// Adds `α·L_pair` to the baseline objective.
    pub baseline_with_pair: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_train: 2000,
            frac_paired: 0.2,
            train_q: QualityFactor::new(40).expect("valid"),
            batch_size: 128,
            lr: 2e-4,
            alpha: DEFAULT_ALPHA,
            epochs: 10,
            seed: 1,
            variant: Variant::OdaCgc,
            hsic_kernel: HsicKernel::RbfMedian,
            separation_metric: SeparationMetric::L1,
            n_test: 1000,
            unpaired_compressed_frac: 0.0,
            baseline_with_pair: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.frac_paired > 0.0 && self.frac_paired < 1.0) {
            return fail(format!("frac_paired must lie in (0, 1), got {}", self.frac_paired));
        }
        if self.batch_size < 8 {
            return fail(format!("batch_size must be at least 8, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.n_test < 2 {
            return fail("n_test must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.unpaired_compressed_frac) {
            return fail("unpaired_compressed_frac must lie in [0, 1]".into());
        }
        let n_pairs = crate::synth::paired_count(self.n_train, self.frac_paired);
        if self.n_train < 4 || n_pairs < 2 || n_pairs >= self.n_train {
            return fail(format!(
                "n_train={} with frac_paired={} does not yield a usable split",
                self.n_train, self.frac_paired
            ));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn dataset_params(&self) -> DatasetParams {
        DatasetParams {
            n_total: self.n_train,
            frac_paired: self.frac_paired,
            train_q: self.train_q,
            seed: self.seed,
            unpaired_compressed_frac: self.unpaired_compressed_frac,
        }
    }
}

/// Output of one training run: config echo, per-step loss traces and final
/// accuracies per regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config: TrainConfig,
    pub steps: usize,
    pub accuracy: BTreeMap<String, RegimeMetrics>,
    pub traces: Vec<StepTrace>,
}

impl Metrics {
    pub fn accuracy_for(&self, regime: crate::synth::Regime) -> Option<f64> {
        self.accuracy.get(regime.name()).map(|m| m.accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
