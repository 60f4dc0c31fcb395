//! TOML run configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::simulation::{PolicyKind, SimConfig, SweepGrid};
use crate::weights::McConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub policies: Vec<PolicyKind>,
    pub r_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub n_reps: usize,
    pub grid: SweepGrid,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            policies: vec![PolicyKind::Simple, PolicyKind::Complex],
            r_values: vec![5, 10, 15, 20],
            k_values: (2..=7).collect(),
            n_reps: 100,
            grid: SweepGrid::Axes,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSettings {
    pub panel: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub fit: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulation: SimConfig,
    pub estimator: EstimatorConfig,
    pub mc: McConfig,
    pub sweep: SweepSettings,
    pub paths: PathSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// An input path must name an existing file.
pub fn check_input(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

/// An output path must live in an existing directory.
pub fn check_output(path: &Path, what: &str) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(Error::Config(format!(
            "{what} path {}: directory {} does not exist",
            path.display(),
            parent.display()
        )));
    }
    if path.is_dir() {
        return Err(Error::Config(format!("{what} path {} is a directory", path.display())));
    }
    Ok(())
}
