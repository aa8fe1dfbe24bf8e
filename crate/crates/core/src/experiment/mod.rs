//! Experiment configuration, single runs, the source-only baseline and the
//! ablation ladder.
//!
//! Configs are JSON. Any key may be omitted and takes its default; keys the
//! schema does not know are rejected with their full dotted path.

mod ablation;
mod runner;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use ablation::{run_ablation, AblationRow, AblationSummary, Rung, ABLATION_CSV_HEADER};
pub use runner::{
    obtain_dataset, run_experiment, run_source_only, write_comparison, Comparison, RunSummary,
};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Enabled ladder steps, in ladder order.
    pub rungs: Vec<Rung>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            rungs: Rung::LADDER.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run_id: String,
    pub output_dir: PathBuf,
    /// Dataset cache: loaded when it holds a dataset, written otherwise.
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            run_id: "default".into(),
            output_dir: PathBuf::from("out"),
            data_dir: None,
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Sets the dataset and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Checks every section; returns warnings for settings that will be
    /// ignored.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if self.run_id.is_empty()
            || self.run_id.contains(['/', '\\'])
            || self.run_id == "."
            || self.run_id == ".."
        {
            return Err(Error::Config(format!(
                "run_id: must be a plain directory name, got {:?}",
                self.run_id
            )));
        }
        self.dataset
            .validate()
            .map_err(|e| Error::Config(format!("dataset: {e}")))?;
        self.train.validate()?;
        if !self.eval.threshold.is_finite() {
            return Err(Error::Config("eval.threshold: must be finite".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds: must not be empty".into()));
        }
        ablation::check_ladder(&self.ablation.rungs)?;

        let mut warnings = Vec::new();
        if !self.train.two_stage {
            warnings.push("train.stage2 is ignored because train.two_stage is false".to_string());
        }
        Ok(warnings)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Parses config text: defaults are filled in, unknown keys rejected by path.
/// The result is validated.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let user: Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
    if !user.is_object() {
        return Err(Error::Config("top level must be a JSON object".into()));
    }
    let mut merged = serde_json::to_value(ExperimentConfig::default())?;
    merge(&mut merged, user, "")?;
    let cfg: ExperimentConfig =
        serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(base), Value::Object(user)) => {
            for (key, value) in user {
                let child = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value, &child)?,
                    None => return Err(Error::Config(format!("{child}: unknown field"))),
                }
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value;
            Ok(())
        }
    }
}
