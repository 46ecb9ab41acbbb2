//! Layered run configuration: built-in defaults, then a TOML file, then
//! command-line flags.

use std::fmt;
use std::path::Path;

use kdas::harness::{Experiment, SplitSpec};
use kdas::models::ModelConfig;
use kdas::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// A malformed command line or configuration. Maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Schema of `--config` files. Every section is optional; missing keys keep
/// their defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: SplitSpec,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_train: TrainConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Experiment::default().into()
    }
}

impl From<Experiment> for RunConfig {
    fn from(e: Experiment) -> Self {
        Self {
            data: e.data,
            teacher: e.teacher,
            student: e.student,
            teacher_train: e.teacher_train,
            train: e.train,
            seeds: e.seeds,
        }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> Experiment {
        Experiment {
            data: self.data.clone(),
            teacher: self.teacher.clone(),
            student: self.student.clone(),
            teacher_train: self.teacher_train.clone(),
            train: self.train.clone(),
            seeds: self.seeds.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// One `section.key = value` override coming from a flag.
pub type Override = (Vec<&'static str>, Value);

/// Resolves defaults < file < overrides.
pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> Result<RunConfig, UsageError> {
    let mut table = Table::try_from(RunConfig::default()).expect("defaults serialize to a table");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let user: Table = text.parse().map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        merge(&mut table, user);
    }
    for (path, value) in overrides {
        set(&mut table, path, value.clone());
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {}", e.message())))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set(table: &mut Table, path: &[&str], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("override path runs through tables");
    }
    t.insert(last.to_string(), value);
}
