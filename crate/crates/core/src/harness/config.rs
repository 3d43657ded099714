//! Experiment configuration: one serializable document drives every command
//! and is echoed verbatim into every artifact it produces.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{
    synthesize_gauss, synthesize_grid, Binarization, Dataset, DatasetSource, GaussDataConfig,
    GridDataConfig,
};
use crate::ais::AisConfig;
use crate::diffnet::Activation;
use crate::error::{Error, Result};
use crate::localopt::{Family, LocalOptConfig};
use crate::model::Likelihood;

/// Schema version stamped into configs, checkpoints, and reports.
pub const CONFIG_VERSION: u32 = 1;

/// Which dataset a run trains and evaluates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// IDX image file, statically binarized on load.
    Idx { path: String, binarization: Binarization, limit: Option<usize> },
    /// Linear-Gaussian synthetic data with continuous pixels.
    Gauss(GaussDataConfig),
    /// Binary lattice images rendered by a random decoder.
    Grid { #[serde(flatten)] grid: GridDataConfig, limit: Option<usize> },
}

/// Network and posterior-family choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub likelihood: Likelihood,
    pub activation: Activation,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Variational family the encoder is trained with.
    pub family: Family,
    pub flow_steps: usize,
    pub flow_hidden: Vec<usize>,
}

/// Optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs over which the entropy weight ramps from 0 to 1; 0 keeps the
    /// full bound from the first step.
    pub warmup_epochs: usize,
    /// Fraction of the dataset tagged as validation data.
    pub val_fraction: f64,
    /// Fixed per-split subset size for the per-epoch bound estimates.
    pub eval_points: usize,
    /// Monte Carlo samples per point for the per-epoch bound estimates.
    pub eval_samples: usize,
    pub seed: u64,
}

/// Estimator budgets for gap evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Number of datapoints gaps are evaluated on.
    pub subset_size: usize,
    pub iwae_k: usize,
    pub ais: AisConfig,
    /// Families to locally optimize per datapoint.
    pub local_families: Vec<Family>,
    pub local_max_steps: usize,
    pub local_mc_samples: usize,
    pub local_final_samples: usize,
    pub seed: u64,
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Name of the preset this config started from, or "custom".
    pub preset: String,
    /// True when the full-size budgets were requested.
    pub paper_scale: bool,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub eval: EvalSpec,
}

/// Names accepted by `ExperimentConfig::preset`.
pub const PRESET_NAMES: &[&str] = &[
    "viz2d",
    "mnist-ffg",
    "mnist-af",
    "large-encoder",
    "no-warmup",
    "retrained-linear",
    "small-1000",
];

fn image_preset(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        preset: name.to_string(),
        paper_scale: false,
        data: DataSpec::Grid {
            grid: GridDataConfig {
                side: 24,
                data_dim: 784,
                hidden: vec![64],
                span: 2.0,
                logit_gain: 4.0,
                seed: 11,
            },
            limit: None,
        },
        model: ModelSpec {
            latent_dim: 50,
            likelihood: Likelihood::BernoulliLogits,
            activation: Activation::Elu,
            encoder_hidden: vec![200, 200],
            decoder_hidden: vec![200, 200],
            family: Family::Ffg,
            flow_steps: 2,
            flow_hidden: vec![100, 100],
        },
        train: TrainSpec {
            epochs: 80,
            batch_size: 100,
            learning_rate: 1e-3,
            warmup_epochs: 16,
            val_fraction: 0.1,
            eval_points: 8,
            eval_samples: 200,
            seed: 1,
        },
        eval: EvalSpec {
            subset_size: 20,
            iwae_k: 5000,
            ais: AisConfig::desk(),
            local_families: vec![Family::Ffg, Family::AuxFlow],
            local_max_steps: 50_000,
            local_mc_samples: 100,
            local_final_samples: 5000,
            seed: 2,
        },
    }
}

/// Switches a desk-scale preset to the full-size budgets: the real dataset
/// file, full epoch counts, and the large annealing schedule.
fn apply_paper_scale(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.paper_scale = true;
    cfg.eval.ais = AisConfig::paper_scale();
    cfg.eval.subset_size = 1000;
    let limit = match &cfg.data {
        DataSpec::Idx { limit, .. } => *limit,
        DataSpec::Grid { limit, .. } => *limit,
        DataSpec::Gauss(_) => None,
    };
    cfg.data = DataSpec::Idx {
        path: "data/train-images-idx3-ubyte.gz".into(),
        binarization: Binarization::BernoulliOnce { seed: 42 },
        limit,
    };
    match cfg.preset.as_str() {
        "viz2d" => {
            cfg.train.epochs = 3000;
        }
        _ => {
            cfg.train.epochs = 3280;
            if cfg.train.warmup_epochs > 0 {
                cfg.train.warmup_epochs = 400;
            }
            cfg.train.eval_points = 100;
        }
    }
    cfg
}

impl ExperimentConfig {
    /// Builds a named preset at desk scale, or at full scale when asked.
    pub fn preset(name: &str, paper_scale: bool) -> Result<Self> {
        let mut cfg = match name {
            "viz2d" => {
                let mut cfg = image_preset(name);
                cfg.data = DataSpec::Grid {
                    grid: GridDataConfig {
                        side: 16,
                        data_dim: 784,
                        hidden: vec![64],
                        span: 2.0,
                        logit_gain: 4.0,
                        seed: 11,
                    },
                    limit: None,
                };
                cfg.model.latent_dim = 2;
                cfg.model.activation = Activation::Tanh;
                cfg.model.encoder_hidden = vec![100];
                cfg.model.decoder_hidden = vec![100];
                cfg.model.flow_hidden = vec![50];
                cfg.train.epochs = 120;
                cfg.train.batch_size = 50;
                cfg.train.learning_rate = 1e-4;
                cfg.train.warmup_epochs = 0;
                cfg.eval.local_families = vec![Family::Ffg, Family::Flow];
                cfg
            }
            "mnist-ffg" => image_preset(name),
            "mnist-af" => {
                let mut cfg = image_preset(name);
                cfg.model.family = Family::AuxFlow;
                cfg
            }
            "large-encoder" => {
                let mut cfg = image_preset(name);
                cfg.model.encoder_hidden = vec![500, 500];
                cfg
            }
            "no-warmup" => {
                let mut cfg = image_preset(name);
                cfg.train.warmup_epochs = 0;
                cfg
            }
            "retrained-linear" => {
                let mut cfg = image_preset(name);
                cfg.model.encoder_hidden = vec![];
                cfg.model.flow_hidden = vec![50, 50];
                cfg
            }
            "small-1000" => {
                let mut cfg = image_preset(name);
                cfg.data = DataSpec::Grid {
                    grid: GridDataConfig {
                        side: 32,
                        data_dim: 784,
                        hidden: vec![64],
                        span: 2.0,
                        logit_gain: 4.0,
                        seed: 11,
                    },
                    limit: Some(1000),
                };
                cfg.train.epochs = 60;
                cfg
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}'; expected one of {PRESET_NAMES:?}"
                )))
            }
        };
        if paper_scale {
            cfg = apply_paper_scale(cfg);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks internal consistency before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let m = &self.model;
        if m.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        let needs_flow = |f: Family| f != Family::Ffg;
        let any_flow = needs_flow(m.family) || self.eval.local_families.iter().copied().any(needs_flow);
        if any_flow && m.flow_steps == 0 {
            return Err(Error::Config("flow families need flow_steps >= 1".into()));
        }
        let split_latent = m.family == Family::Flow
            || self.eval.local_families.contains(&Family::Flow);
        if split_latent && m.latent_dim % 2 != 0 {
            return Err(Error::Config(
                "the split-latent flow needs an even latent dimension".into(),
            ));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.eval_samples == 0 {
            return Err(Error::Config("batch_size and eval_samples must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} must lie in [0, 1)",
                t.val_fraction
            )));
        }
        let e = &self.eval;
        if e.subset_size == 0 || e.iwae_k == 0 || e.local_mc_samples == 0 || e.local_final_samples == 0
        {
            return Err(Error::Config("evaluation budgets must be positive".into()));
        }
        if e.ais.n_intermediate < 2 || e.ais.n_chains == 0 || e.ais.n_leapfrog == 0 {
            return Err(Error::Config("annealing budgets must be positive".into()));
        }
        match &self.data {
            DataSpec::Idx { limit: Some(0), .. } | DataSpec::Grid { limit: Some(0), .. } => {
                Err(Error::Config("data limit must be positive when given".into()))
            }
            _ => Ok(()),
        }
    }

    /// Per-datapoint optimizer settings for one family, with this config's
    /// budgets applied.
    pub fn local_opt_config(&self, family: Family) -> LocalOptConfig {
        let mut cfg = LocalOptConfig::new(family);
        cfg.n_flow_steps = self.model.flow_steps;
        cfg.flow_hidden = self.model.flow_hidden.clone();
        cfg.mc_samples = self.eval.local_mc_samples;
        cfg.final_samples = self.eval.local_final_samples;
        cfg.max_steps = self.eval.local_max_steps;
        cfg
    }

    /// Materializes the configured dataset with split tags assigned.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut dataset = match &self.data {
            DataSpec::Idx { path, binarization, limit } => {
                let images = super::dataset::load_idx(Path::new(path))?;
                let source = DatasetSource::IdxFile { path: path.clone() };
                let mut ds = super::dataset::binarize(&images, *binarization, source)?;
                if let Some(n) = limit {
                    ds.truncate(*n)?;
                }
                ds
            }
            DataSpec::Gauss(cfg) => synthesize_gauss(cfg)?.0,
            DataSpec::Grid { grid, limit } => {
                let mut ds = synthesize_grid(grid)?;
                if let Some(n) = limit {
                    ds.truncate(*n)?;
                }
                ds
            }
        };
        let n_val = ((dataset.n() as f64) * self.train.val_fraction).round() as usize;
        let n_train = dataset.n().saturating_sub(n_val).max(1);
        dataset.assign_split(n_train);
        Ok(dataset)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
