//! Run configuration file (TOML). Precedence is CLI flag > environment >
//! file > built-in default; the CLI applies its overrides after loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::LoadConfig;
use crate::error::{Error, Result};
use crate::evaluation::{DEFAULT_NS, DEFAULT_PHI};
use crate::training::TrainConfig;

pub const CACHE_ENV: &str = "FEVPR_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory holding one sub-directory per traverse.
    pub root: PathBuf,
    pub database: String,
    pub query: String,
    pub validation: Option<String>,
    /// Query traverses scored by `evaluate` and `ablate`.
    pub tests: Vec<String>,
    pub cache_dir: PathBuf,
    pub load: LoadConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            database: "database".into(),
            query: "train_query".into(),
            validation: Some("validation".into()),
            tests: vec!["heldout".into(), "glare".into(), "no_events".into()],
            cache_dir: PathBuf::from(".fevpr-cache"),
            load: LoadConfig::default(),
        }
    }
}

impl DataConfig {
    /// A bare name resolves under `root`; anything that exists as given is used as is.
    pub fn traverse_path(&self, name: &str) -> PathBuf {
        let p = Path::new(name);
        if p.is_absolute() || p.exists() {
            p.to_path_buf()
        } else {
            self.root.join(name)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub phi: f64,
    pub recall_ns: Vec<usize>,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            phi: DEFAULT_PHI,
            recall_ns: DEFAULT_NS.to_vec(),
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.message().to_string(),
            }
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Environment overrides, applied between file and CLI.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            self.data.cache_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.eval.phi > 0.0) {
            return Err(Error::Config(format!("eval.phi must be positive, got {}", self.eval.phi)));
        }
        if self.eval.recall_ns.is_empty() || self.eval.recall_ns.contains(&0) {
            return Err(Error::Config("eval.recall_ns must be non-empty and positive".into()));
        }
        if self.data.load.frame_channels != self.train.model.frame_channels {
            return Err(Error::Config(format!(
                "data.load.frame_channels ({}) differs from train.model.frame_channels ({})",
                self.data.load.frame_channels, self.train.model.frame_channels
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml(
            "[train]\nseed = 7\nlearning_rate = 0.001\n[train.model]\nclusters = 8\n[train.model.ablation]\nmodality = \"frameonly\"\n",
        );
        // Unknown enum spellings are rejected rather than silently defaulted.
        assert!(c.is_err());
        let c = RunConfig::from_toml("[train]\nseed = 7\n[train.model]\nclusters = 8\n").unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.model.clusters, 8);
        assert_eq!(c.train.model.width, 64);
        assert_eq!(c.eval.phi, 75.0);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nseed = 1\nmargin = \"wide\"\n").unwrap();
        match RunConfig::load(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = RunConfig::default();
        c.eval.recall_ns = vec![0];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.data.load.frame_channels = 3;
        assert!(c.validate().is_err());
    }
}
