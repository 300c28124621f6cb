//! Experiment files: one JSON document carrying a scenario plus the extra
//! settings individual subcommands need.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trackalloc::sim::{PatternVariant, ScenarioConfig};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub schema_version: u32,
    /// Free-form documentation; ignored by every command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
    pub scenario: ScenarioConfig,
    /// Seeds `scenario.seed, scenario.seed + 1, …` used by simulate and
    /// sweep-lambda.
    #[serde(default = "one")]
    pub replicates: usize,
    /// Channel probabilities for sweep-lambda, applied to every target.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambdas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<PatternStudy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternStudy {
    pub alpha: f64,
    #[serde(default = "default_pattern_replicates")]
    pub replicates: usize,
    #[serde(default = "all_variants")]
    pub variants: Vec<PatternVariant>,
}

fn default_pattern_replicates() -> usize {
    100
}

fn all_variants() -> Vec<PatternVariant> {
    PatternVariant::ALL.to_vec()
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let exp: Experiment = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        exp.check()?;
        Ok(exp)
    }

    pub fn check(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.replicates == 0 {
            return Err(CliError::Config("replicates must be at least 1".into()));
        }
        self.scenario.validate().map_err(CliError::from)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|s| self.scenario.seed.wrapping_add(s)).collect()
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.scenario.seed = s;
        }
        self
    }
}
