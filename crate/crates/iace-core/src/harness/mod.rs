//! Orchestration: data generation, training, evaluation, the ablation grid,
//! gradient checking, and report emission. The CLI is a thin wrapper over
//! this module.

mod ablate;
mod eval;
mod gencheck;
mod gendata;
mod report;
mod train;

pub use ablate::{ablation_direction, ablation_grid, run_ablation, RunSpec};
pub use eval::{evaluate, EpisodeOutcome, EvalReport};
pub use gencheck::{gradcheck_all, synthetic_observation, VariantGradCheck, GRADCHECK_KL_WEIGHT};
pub use gendata::cmd_gen_data;
pub use report::{grid_csv, loss_curve_svg, parse_train_log, success_chart_svg, write_reports};
pub use train::{load_dataset, train, LoadedDataset, TrainLogEntry, TrainOutcome};

use std::path::Path;
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::policy::{PolicyError, PolicyVariant};
use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss {value} at epoch {epoch}, step {step}; aborting")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        value: f64,
    },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Rate the policy consumes data at; demonstrations are collected at the
/// simulator rate and decimated down to this.
pub const TRAIN_RATE_HZ: u32 = 25;

/// Every knob of a training/evaluation run. Each field is settable from the
/// config file and overridable by a CLI flag of the same name.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Default mirrors the optimizer coefficient reading; desk-scale runs
    /// typically override this (see README).
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub chunk_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_depth: usize,
    pub iace_depth: usize,
    pub dec_depth: usize,
    pub cvae_depth: usize,
    pub z_dim: usize,
    pub seed: u64,
    pub variant: PolicyVariant,
    pub learned_pos: bool,
    pub ensemble_decay: f64,
    pub ensemble_stride: usize,
    /// Write an intermediate checkpoint every this many epochs (0 disables;
    /// the final checkpoint is always written).
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            epochs: 300,
            steps_per_epoch: 20,
            batch_size: 8,
            kl_weight: 10.0,
            chunk_len: 20,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            enc_depth: 2,
            iace_depth: 2,
            dec_depth: 3,
            cvae_depth: 2,
            z_dim: 16,
            seed: 0,
            variant: PolicyVariant::SPLIT_IACE,
            learned_pos: false,
            ensemble_decay: 0.01,
            ensemble_stride: 1,
            checkpoint_every: 100,
            eval_episodes: 25,
        }
    }
}

impl TrainConfig {
    /// Apply one `key=value` setting.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let bad = |k: &str, v: &str| HarnessError::Config(format!("bad value '{v}' for {k}"));
        macro_rules! parse {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "learning_rate" => parse!(self.learning_rate),
            "weight_decay" => parse!(self.weight_decay),
            "epochs" => parse!(self.epochs),
            "steps_per_epoch" => parse!(self.steps_per_epoch),
            "batch_size" => parse!(self.batch_size),
            "kl_weight" => parse!(self.kl_weight),
            "chunk_len" => parse!(self.chunk_len),
            "d_model" => parse!(self.d_model),
            "heads" => parse!(self.heads),
            "ffn_dim" => parse!(self.ffn_dim),
            "enc_depth" => parse!(self.enc_depth),
            "iace_depth" => parse!(self.iace_depth),
            "dec_depth" => parse!(self.dec_depth),
            "cvae_depth" => parse!(self.cvae_depth),
            "z_dim" => parse!(self.z_dim),
            "seed" => parse!(self.seed),
            "variant" => {
                self.variant = PolicyVariant::parse(value).map_err(|_| bad(key, value))?
            }
            "learned_pos" => {
                self.learned_pos = match value {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(bad(key, value)),
                }
            }
            "ensemble_decay" => parse!(self.ensemble_decay),
            "ensemble_stride" => parse!(self.ensemble_stride),
            "checkpoint_every" => parse!(self.checkpoint_every),
            "eval_episodes" => parse!(self.eval_episodes),
            _ => return Err(HarnessError::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Line-oriented `key=value` config file; blank lines and `#` comments
    /// are skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<(), HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("config line is not key=value: {line}"))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(HarnessError::Config(
                "epochs, steps_per_epoch and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.kl_weight < 0.0 {
            return Err(HarnessError::Config(
                "learning_rate must be positive; weight_decay and kl_weight non-negative".into(),
            ));
        }
        if self.ensemble_stride == 0 || self.ensemble_stride > self.chunk_len {
            return Err(HarnessError::Config(format!(
                "ensemble_stride must be in [1, chunk_len={}]",
                self.chunk_len
            )));
        }
        if self.ensemble_decay < 0.0 {
            return Err(HarnessError::Config("ensemble_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_policy_config(
        &self,
        joints_per_arm: usize,
        img: (usize, usize, usize),
    ) -> crate::policy::PolicyConfig {
        crate::policy::PolicyConfig {
            d_model: self.d_model,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            enc_depth: self.enc_depth,
            iace_depth: self.iace_depth,
            dec_depth: self.dec_depth,
            cvae_depth: self.cvae_depth,
            chunk_len: self.chunk_len,
            z_dim: self.z_dim,
            joints_per_arm,
            img_height: img.0,
            img_width: img.1,
            img_channels: img.2,
            variant: self.variant,
            learned_pos: self.learned_pos,
        }
    }
}
