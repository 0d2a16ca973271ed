// SPDX-License-Identifier: Apache-2.0

//! Pipeline settings: defaults, overridden by a TOML config file, overridden
//! by command-line flags. See `docs/config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdnc_core::factorizer::Ranks;
use tdnc_core::finetune::TrainConfig;
use tdnc_core::fxsim::FxFormat;

use crate::pipeline::RankChoice;

/// One layer of settings (config file or flags); every field optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub target_error: Option<f64>,
    pub ranks: Option<[usize; 3]>,
    pub calibration_images: Option<usize>,
    #[serde(default)]
    pub format: FormatSettings,
    #[serde(default)]
    pub train: TrainSettings,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatSettings {
    pub n: Option<u32>,
    pub m: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub l2: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0} sets both target_error and ranks; keep one")]
    Conflict(&'static str),
    #[error("{0}")]
    Invalid(String),
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.message().to_string(),
        })
    }
}

/// Fully resolved settings, recorded verbatim in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub out_dir: PathBuf,
    pub target_error: Option<f64>,
    pub ranks: Option<[usize; 3]>,
    /// Training images used to pick power-of-two rescaling; 0 disables it.
    pub calibration_images: usize,
    pub format: ResolvedFormat,
    pub train: ResolvedTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolvedFormat {
    pub n: u32,
    pub m: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolvedTrain {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = FxFormat::default();
        Self {
            seed: 0,
            data: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("out"),
            target_error: None,
            ranks: None,
            calibration_images: 1000,
            format: ResolvedFormat { n: f.n, m: f.m },
            train: ResolvedTrain {
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                epochs: t.epochs,
                l2: t.l2,
            },
        }
    }
}

impl PipelineConfig {
    /// Resolves `layers`, highest precedence first, over the defaults.
    pub fn resolve(layers: &[(&'static str, &Settings)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (name, s) in layers {
            if s.target_error.is_some() && s.ranks.is_some() {
                return Err(ConfigError::Conflict(name));
            }
        }
        // The highest-precedence layer naming either target_error or ranks decides.
        if let Some((_, s)) = layers
            .iter()
            .find(|(_, s)| s.target_error.is_some() || s.ranks.is_some())
        {
            cfg.target_error = s.target_error;
            cfg.ranks = s.ranks;
        }
        macro_rules! pick {
            ($($field:tt).+) => {
                if let Some(v) = layers.iter().find_map(|(_, s)| s.$($field).+.clone()) {
                    cfg.$($field).+ = v;
                }
            };
        }
        pick!(seed);
        pick!(data);
        pick!(out_dir);
        pick!(calibration_images);
        pick!(format.n);
        pick!(format.m);
        pick!(train.learning_rate);
        pick!(train.batch_size);
        pick!(train.epochs);
        pick!(train.l2);
        cfg.fx_format()?;
        cfg.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(t) = cfg.target_error {
            if !(0.0..=1.0).contains(&t) {
                return Err(ConfigError::Invalid(format!(
                    "target_error {t} must be a fraction in [0, 1]"
                )));
            }
        }
        Ok(cfg)
    }

    pub fn fx_format(&self) -> Result<FxFormat, ConfigError> {
        FxFormat::new(self.format.n, self.format.m).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.seed,
            l2: self.train.l2,
        }
    }

    pub fn rank_choice(&self) -> Option<RankChoice> {
        match (self.target_error, self.ranks) {
            (Some(t), _) => Some(RankChoice::TargetError(t)),
            (None, Some([rc, rv, rf])) => Some(RankChoice::Ranks(Ranks::new(rc, rv, rf))),
            (None, None) => None,
        }
    }
}
