use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub helios: &'static str,
    pub model_format: u8,
    pub sitecube_format: u32,
}

/// `run.json`, written beside a command's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub versions: Versions,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, wall_time_seconds: f64, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            threads: rayon::current_num_threads(),
            versions: Versions {
                helios: env!("CARGO_PKG_VERSION"),
                model_format: helios_core::models::MODEL_FORMAT_VERSION,
                sitecube_format: helios_core::sitecube::FORMAT_VERSION,
            },
            wall_time_seconds,
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let p = dir.join("run.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&p, json + "\n").map_err(CliError::io(&p))
    }
}
