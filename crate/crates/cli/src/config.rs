//! Run configuration: one TOML file with a section per command.

use std::path::{Path, PathBuf};

use cq_core::geometry::Connectivity;
use cq_core::imaging::dataset::PhantomSetConfig;
use cq_core::train::{Strategy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "CQ_SEED";
pub const SNAPSHOT: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub folds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantifySection {
    /// Measure the stored masks instead of running a checkpoint's G.
    pub identity: bool,
    pub connectivity: Connectivity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub eps: f64,
    pub max_coords: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { eps: cq_tensor::gradcheck::DEFAULT_EPS, max_coords: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Where outputs go; the snapshot written there leaves it out.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub phantom: PhantomSetConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub quantify: QuantifySection,
    pub gradcheck: GradcheckSection,
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub folds: Option<usize>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("E_IO", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::new("E_CONFIG", format!("{}: {}", path.display(), e.message())))
    }

    /// Seed precedence: flag, then `CQ_SEED`, then the file.
    pub fn resolve(mut self, o: Overrides, env_seed: Option<String>) -> Result<Self, CliError> {
        if let Some(s) = o.seed {
            self.seed = s;
        } else if let Some(v) = env_seed {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::new("E_CONFIG", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        if let Some(s) = o.strategy {
            self.train.strategy = s;
        }
        if let Some(k) = o.folds {
            self.eval.folds = k;
        }
        self.out = o.out.or(self.out);
        self.dataset = o.dataset.or(self.dataset);
        self.checkpoint = o.checkpoint.or(self.checkpoint);
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::new("E_CONFIG", "no output directory (pass --out)"))
    }

    pub fn dataset_dir(&self) -> Result<&Path, CliError> {
        self.dataset.as_deref().ok_or_else(|| CliError::new("E_CONFIG", "no dataset directory (pass --data)"))
    }

    pub fn checkpoint_path(&self) -> Result<&Path, CliError> {
        self.checkpoint.as_deref().ok_or_else(|| CliError::new("E_CONFIG", "no checkpoint (pass --checkpoint)"))
    }
}
