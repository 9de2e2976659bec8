use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fakescope::codec::QualityFactor;
use fakescope::harness::{self, TrainConfig, Variant};
use fakescope::losses::{HsicKernel, SeparationMetric};
use fakescope::model::{CheckpointInfo, ModelParams};
use fakescope::synth::{self, DatasetParams, DatasetSplit, Regime};
use fakescope::{Error, Result};

#[derive(Parser)]
#[command(name = "fakescope", version, about = "Compression-robust fake image detection on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training split and the test sets.
    GenData {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.2)]
        frac_paired: f64,
        #[arg(long, default_value = "40", value_parser = parse_quality)]
        train_q: QualityFactor,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and evaluate it on both regimes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory for metrics.json and model.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one regime.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_regime)]
        regime: Regime,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train every variant for every seed and tabulate accuracies.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Write penultimate features of a split to CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding a saved split; regenerated from the checkpoint's
        /// config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

#[derive(clap::Args, Default)]
struct Overrides {
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    frac_paired: Option<f64>,
    #[arg(long, value_parser = parse_quality)]
    train_q: Option<QualityFactor>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_kernel)]
    hsic_kernel: Option<HsicKernel>,
    #[arg(long, value_parser = parse_metric)]
    separation_metric: Option<SeparationMetric>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    unpaired_compressed_frac: Option<f64>,
    #[arg(long)]
    baseline_with_pair: Option<bool>,
}

impl Overrides {
    fn apply(self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            n_train,
            frac_paired,
            train_q,
            batch_size,
            lr,
            alpha,
            epochs,
            seed,
            variant,
            hsic_kernel,
            separation_metric,
            n_test,
            unpaired_compressed_frac,
            baseline_with_pair
        );
    }
}

fn parse_quality(s: &str) -> std::result::Result<QualityFactor, String> {
    let q: u8 = s.parse().map_err(|e| format!("{e}"))?;
    QualityFactor::new(q).map_err(|e| e.to_string())
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kernel(s: &str) -> std::result::Result<HsicKernel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<SeparationMetric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>, overrides: Overrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn config_of(info: &CheckpointInfo) -> Result<TrainConfig> {
    if info.config.is_null() {
        return Ok(TrainConfig {
            seed: info.seed,
            ..TrainConfig::default()
        });
    }
    serde_json::from_value(info.config.clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            n,
            frac_paired,
            train_q,
            seed,
            n_test,
            out,
        } => {
            let split = synth::build_dataset(&DatasetParams::new(n, frac_paired, train_q, seed))?;
            split.save(&out, "train")?;
            for regime in [Regime::QualityAware, Regime::QualityAgnostic] {
                let records = synth::make_test_set(n_test, regime, train_q, seed)?;
                synth::save_test_set(&out, &format!("test_{}", regime.name()), regime, seed, &records)?;
            }
            let [rr, rc, fr, fc] = split.group_counts();
            println!(
                "wrote {} training records ({} pairs; real raw {rr}, real compressed {rc}, fake raw {fr}, fake compressed {fc}) to {}",
                split.len(),
                split.pairs().len(),
                out.display()
            );
        }
        Command::Train {
            config,
            overrides,
            out,
        } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.variant, cfg.seed)));
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let result = harness::train(&cfg)?;
            let info = CheckpointInfo {
                seed: cfg.seed,
                step: result.metrics.steps as u64,
                config: serde_json::to_value(&cfg)?,
            };
            result.params.save(&out.join("model.ckpt"), &info)?;
            write(&out.join("metrics.json"), &result.metrics.to_json()?)?;
            for (regime, m) in &result.metrics.accuracy {
                println!("{regime}: accuracy {:.4} ({}/{})", m.accuracy, m.correct, m.total);
            }
        }
        Command::Eval {
            checkpoint,
            regime,
            n_test,
        } => {
            let (params, info) = ModelParams::load(&checkpoint)?;
            let mut cfg = config_of(&info)?;
            if let Some(n) = n_test {
                cfg.n_test = n;
            }
            let m = harness::evaluate(&params, regime, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Ablate {
            config,
            seeds,
            overrides,
            out,
        } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let report = harness::ablate(&cfg, &seeds, |m| {
                eprintln!(
                    "{} seed {}: {:?}",
                    m.config.variant,
                    m.config.seed,
                    m.accuracy.iter().map(|(k, v)| (k.as_str(), v.accuracy)).collect::<Vec<_>>()
                );
            })?;
            report.save(&out)?;
            print!("{}", report.to_csv());
        }
        Command::ExportFeatures {
            checkpoint,
            out,
            data,
            split,
        } => {
            let (params, info) = ModelParams::load(&checkpoint)?;
            let records = match data {
                Some(dir) => DatasetSplit::load(&dir, &split)?.records,
                None => synth::build_dataset(&config_of(&info)?.dataset_params())?.records,
            };
            harness::export_features(&params, &records, &out)?;
            println!("wrote {} rows to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_numerical() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
