//! TOML run configuration.

use std::path::{Path, PathBuf};

use helios_core::dataset::SequenceConfig;
use helios_core::metrics::Period;
use helios_core::models::{ChannelSpecs, CnnLstmSpec, ForestSpec, TrainConfig, TreeSpec};
use helios_core::nowcast::SolarHours;
use helios_core::svr::SvrSpec;
use helios_core::synth::SceneSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Site-cube directories (one per site) plus `dataset/`.
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            model_dir: "models".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    /// History length T.
    pub steps: usize,
    /// Window edge w; cubes with larger windows are cropped around the site.
    pub window: usize,
    pub interval_seconds: u32,
    pub folds: usize,
    /// Satellite daytime hours, local `[start, end)`.
    pub satellite_hours: [u32; 2],
    /// Solar hours for power samples, local `[start, end)`.
    pub solar_hours: [u32; 2],
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            steps: 4,
            window: 10,
            interval_seconds: 900,
            folds: 5,
            satellite_hours: [9, 17],
            solar_hours: [9, 15],
        }
    }
}

impl DatasetParams {
    pub fn sequence_config(&self) -> SequenceConfig {
        SequenceConfig {
            steps: self.steps,
            interval_seconds: self.interval_seconds,
            day_start_hour: self.satellite_hours[0],
            day_end_hour: self.satellite_hours[1],
        }
    }

    pub fn solar(&self) -> SolarHours {
        SolarHours {
            start_hour: self.solar_hours[0],
            end_hour: self.solar_hours[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationParams {
    /// Absolute channel-1 tolerances.
    pub channel_deltas: Vec<f64>,
    /// Percent power tolerances.
    pub power_deltas: Vec<f64>,
    pub period: Period,
    /// Channel model whose forecasts feed the power regressor.
    pub forecast_model: String,
    /// Power regressor family.
    pub power_model: String,
}

impl Default for EvaluationParams {
    fn default() -> Self {
        Self {
            channel_deltas: vec![0.0, 0.01, 0.02, 0.05, 0.1],
            power_deltas: vec![0.0, 1.0, 2.0, 5.0, 10.0],
            period: Period::Full,
            forecast_model: "cnnlstm".into(),
            power_model: "svr".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed: scene generation, day split, model initialization.
    pub seed: u64,
    pub paths: Paths,
    pub scene: SceneSpec,
    pub dataset: DatasetParams,
    pub cnnlstm: CnnLstmSpec,
    pub train: TrainConfig,
    pub tree: TreeSpec,
    pub forest: ForestSpec,
    pub svr: SvrSpec,
    pub evaluation: EvaluationParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            scene: SceneSpec::default(),
            dataset: DatasetParams::default(),
            cnnlstm: CnnLstmSpec::default(),
            train: TrainConfig::default(),
            tree: TreeSpec::default(),
            forest: ForestSpec::default(),
            svr: SvrSpec::default(),
            evaluation: EvaluationParams::default(),
        }
    }
}

fn config_err(m: impl Into<String>) -> CliError {
    CliError::Config(m.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Push the root seed and dataset shape into the sections that carry their own copies.
    pub fn resolve(mut self) -> Self {
        self.scene.seed = self.seed;
        self.forest.seed = self.seed;
        self.cnnlstm.steps = self.dataset.steps;
        self.cnnlstm.window = self.dataset.window;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.steps == 0 || d.window == 0 || d.interval_seconds == 0 {
            return Err(config_err("dataset.steps, window and interval_seconds must be positive"));
        }
        if d.folds < 2 {
            return Err(config_err("dataset.folds must be at least 2"));
        }
        for (name, h) in [("satellite_hours", d.satellite_hours), ("solar_hours", d.solar_hours)] {
            if h[0] >= h[1] || h[1] > 24 {
                return Err(config_err(format!("dataset.{name} must satisfy start < end <= 24")));
            }
        }
        if self.cnnlstm.steps != d.steps || self.cnnlstm.window != d.window {
            return Err(config_err("cnnlstm.steps and cnnlstm.window must match the dataset section"));
        }
        if self.forest.seed != self.seed || self.scene.seed != self.seed {
            return Err(config_err("scene.seed and forest.seed must equal the root seed"));
        }
        let e = &self.evaluation;
        if e.channel_deltas.is_empty() || e.power_deltas.is_empty() {
            return Err(config_err("evaluation delta lists must be non-empty"));
        }
        if e.channel_deltas.iter().chain(&e.power_deltas).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(config_err("evaluation deltas must be finite and non-negative"));
        }
        self.scene.validate()?;
        self.cnnlstm.validate()?;
        self.train.validate()?;
        self.tree.validate()?;
        self.forest.validate()?;
        self.svr.validate()?;
        Ok(())
    }

    pub fn channel_specs(&self) -> ChannelSpecs {
        ChannelSpecs {
            tree: self.tree,
            forest: self.forest,
            cnnlstm: self.cnnlstm.clone(),
            train: self.train.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
