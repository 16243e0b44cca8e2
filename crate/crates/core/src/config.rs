//! Run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::CurriculumConfig;
use crate::metrics::{EditCosts, EvalOptions};
use crate::plan::ToolLibrary;
use crate::scdpo::ScdpoConfig;
use crate::synth::{default_templates, load_templates, ScenarioTemplate};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{0} does not exist")]
    Missing(PathBuf),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    /// Tool library JSON; the built-in library when absent.
    pub library: Option<PathBuf>,
    /// Scenario templates JSON; the built-in set when absent.
    pub templates: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            library: None,
            templates: None,
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub curriculum: CurriculumConfig,
    pub scdpo: ScdpoConfig,
    pub costs: EditCosts,
    pub seed: u64,
    pub strict_acc: bool,
    pub length_normalized: bool,
}

impl RunConfig {
    /// Reads a JSON config. Relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for dir in [&mut p.data, &mut p.checkpoints, &mut p.reports] {
            *dir = base.join(&*dir);
        }
        for file in [&mut p.library, &mut p.templates].into_iter().flatten() {
            *file = base.join(&*file);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for file in [&self.paths.library, &self.paths.templates]
            .into_iter()
            .flatten()
        {
            if !file.is_file() {
                return Err(ConfigError::Missing(file.clone()));
            }
        }
        self.curriculum
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scdpo
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.costs.is_valid() {
            return Err(ConfigError::Invalid("edit costs must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn library(&self) -> Result<ToolLibrary, ConfigError> {
        match &self.paths.library {
            None => Ok(ToolLibrary::default_library()),
            Some(path) => ToolLibrary::from_json(&read(path)?).map_err(|e| ConfigError::Parse {
                path: path.clone(),
                reason: e.to_string(),
            }),
        }
    }

    pub fn templates(&self) -> Result<Vec<ScenarioTemplate>, ConfigError> {
        match &self.paths.templates {
            None => Ok(default_templates()),
            Some(path) => load_templates(&read(path)?).map_err(|e| ConfigError::Parse {
                path: path.clone(),
                reason: e.to_string(),
            }),
        }
    }

    /// The alignment config with the run-level length-normalization flag applied.
    pub fn scdpo_config(&self) -> ScdpoConfig {
        ScdpoConfig {
            length_normalized: self.scdpo.length_normalized || self.length_normalized,
            ..self.scdpo
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            costs: self.costs,
            strict_acc: self.strict_acc,
            ..EvalOptions::default()
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}
