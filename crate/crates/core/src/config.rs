//! Run configuration documents (TOML) and shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{AdvectionConfig, SolverConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Chaotic Kolmogorov flow from the pseudo-spectral solver.
    Ckf,
    /// Integer-pixel periodic advection.
    Advection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    pub advection: AdvectionConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Ckf,
            train_trajectories: 64,
            test_trajectories: 8,
            advection: AdvectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            run_dir: "run".into(),
        }
    }
}

/// Everything one pipeline run needs. Missing keys take the desk-scale
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Seed of the model initialization.
    pub model_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

pub const PRESETS: [&str; 3] = ["desk", "reference", "smoke"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Replaces every seed in the document.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model_seed = seed;
        self.train.seed = seed;
        self.solver.seed = seed;
        self.data.advection.seed = seed;
        self
    }

    /// Grid side and state channels of the configured data source.
    pub fn data_grid(&self) -> (usize, usize) {
        match self.data.source {
            DataSource::Ckf => (self.solver.n, 1),
            DataSource::Advection => (self.data.advection.n, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Ckf {
            self.solver.validate()?;
        }
        let (n, c) = self.data_grid();
        let m = &self.model;
        if m.height != n || m.width != n || m.out_channels != c || m.in_channels != c + 2 {
            return Err(Error::config(format!(
                "model expects {}×{} with {} in / {} out channels, data is {n}×{n} with {c} state + 2 coordinate channels",
                m.height, m.width, m.in_channels, m.out_channels
            )));
        }
        if self.data.train_trajectories == 0 || self.data.test_trajectories == 0 {
            return Err(Error::config(
                "need at least one training and one test trajectory",
            ));
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::default()),
            "reference" => Ok(RunConfig {
                model: ModelConfig {
                    widths: vec![64, 128, 256, 512],
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    batch_size: 100,
                    iterations: 100_000,
                    checkpoint_every: 5000,
                    ..TrainConfig::default()
                },
                solver: SolverConfig {
                    spin_up: 0.0,
                    ..SolverConfig::default()
                },
                data: DataConfig {
                    train_trajectories: 4000,
                    test_trajectories: 100,
                    ..DataConfig::default()
                },
                ..RunConfig::default()
            }),
            "smoke" => Ok(RunConfig {
                model: ModelConfig {
                    height: 16,
                    width: 16,
                    widths: vec![8, 16],
                    window: 2,
                    heads: 2,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    batch_size: 2,
                    iterations: 20,
                    checkpoint_every: 10,
                    ..TrainConfig::default()
                },
                solver: SolverConfig {
                    n: 16,
                    horizon: 5,
                    spin_up: 0.5,
                    ..SolverConfig::default()
                },
                data: DataConfig {
                    train_trajectories: 2,
                    test_trajectories: 1,
                    ..DataConfig::default()
                },
                ..RunConfig::default()
            }),
            _ => Err(Error::config(format!(
                "unknown preset {name:?}; expected one of {PRESETS:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
        let r = RunConfig::preset("reference").unwrap();
        assert_eq!(r.model.widths, [64, 128, 256, 512]);
        assert_eq!(r.model.scales(), 4);
        assert_eq!(r.train.batch_size, 100);
        assert_eq!(r.train.iterations, 100_000);
        assert_eq!(r.solver.re, 500.0);
        assert_eq!(r.solver.horizon, 65);
        assert_eq!(r.solver.n, 64);
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let c = RunConfig::from_toml("model_seed = 3\n[train]\niterations = 10\n").unwrap();
        assert_eq!(c.model_seed, 3);
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.data.train_trajectories, 64);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[solver]\nreynolds = 500\n").is_err());
    }

    #[test]
    fn inconsistent_model_rejected() {
        let err = RunConfig::from_toml("[solver]\nn = 32\n").unwrap_err();
        assert!(err.to_string().contains("model expects"), "{err}");
    }

    #[test]
    fn seed_override() {
        let c = RunConfig::default().with_seed(42);
        assert_eq!(
            (
                c.model_seed,
                c.train.seed,
                c.solver.seed,
                c.data.advection.seed
            ),
            (42, 42, 42, 42)
        );
    }
}
