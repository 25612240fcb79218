//! JSON run configuration. Every section and key is optional; unknown keys
//! are rejected with their path.

use std::fs;
use std::path::{Path, PathBuf};

use hooknet_core::training::TrainPlan;
use hooknet_core::{HookNetConfig, WorldSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesSection {
    pub input_size: usize,
    pub depth: usize,
    pub target_resolution: f64,
    pub context_resolution: f64,
    /// Search range of `shapes enumerate`.
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for ShapesSection {
    fn default() -> Self {
        Self {
            input_size: 284,
            depth: 4,
            target_resolution: 0.5,
            context_resolution: 8.0,
            min_size: 1,
            max_size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Pyramid directories used for training.
    pub train: Vec<PathBuf>,
    /// Pyramid directories for validation; the training set when empty.
    pub validation: Vec<PathBuf>,
    /// Spacing of the candidate-center grid, level-0 pixels.
    pub candidate_stride: usize,
    pub validation_patches: usize,
    pub validation_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: Vec::new(),
            validation: Vec::new(),
            candidate_stride: 8,
            validation_patches: 32,
            validation_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub plan: TrainPlan,
    pub precision: Precision,
    /// Run directory for logs and checkpoints.
    pub out: Option<PathBuf>,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    /// `[x, y, width, height]` in level-0 pixels; the whole image when unset.
    pub region: Option<[i64; 4]>,
    pub workers: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            region: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Skip pixels whose prediction came from padded input.
    pub exclude_padded: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            exclude_padded: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub world: WorldSpec,
    /// Share of annotated blocks kept in the written mask.
    pub keep_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            keep_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub shapes: ShapesSection,
    pub data: DataSection,
    pub model: HookNetConfig,
    pub train: TrainSection,
    pub infer: InferSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

/// A configuration problem, located by its dotted key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            key: ".".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration into `dir` as `config.json`.
    pub fn echo_into(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), self.to_json() + "\n")
    }
}
