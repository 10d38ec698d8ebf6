//! Flat `key = value` experiment configuration.
//!
//! One TOML table holds the keys of [`RunConfig`], [`TrainConfig`] and
//! [`ScenarioSpec`] side by side. Keys present in more than one of them
//! (`num_classes`, `seed`) are shared.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::synth::ScenarioSpec;
use crate::trainer::TrainConfig;
use crate::types::RunConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub train: TrainConfig,
    pub scenario: ScenarioSpec,
}

fn table_of<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("config structs serialize to tables")
}

fn section<T: DeserializeOwned>(table: Table) -> Result<T> {
    T::deserialize(Value::Table(table)).map_err(|e| Error::InvalidConfig(e.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let mut cfg = Self::default();
        cfg.merge(table)?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Overwrites the keys in `table`, leaving the others as they are.
    pub fn merge(&mut self, table: Table) -> Result<()> {
        let mut run = table_of(&self.run);
        let mut train = table_of(&self.train);
        let mut scenario = table_of(&self.scenario);
        for (key, value) in table {
            let mut known = false;
            for t in [&mut run, &mut train, &mut scenario] {
                if t.contains_key(&key) {
                    t.insert(key.clone(), value.clone());
                    known = true;
                }
            }
            if !known {
                return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
            }
        }
        self.run = section(run)?;
        self.train = section(train)?;
        self.scenario = section(scenario)?;
        Ok(())
    }

    /// Applies one `key=value` override. The value is read as a TOML value,
    /// or as a bare string when it does not parse as one.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{assignment}`")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = match format!("v = {raw}").parse::<Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => Value::String(raw.to_string()),
        };
        let mut table = Table::new();
        table.insert(key.to_string(), value);
        self.merge(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.train.validate()?;
        self.scenario.validate()
    }

    /// The flat table, every key once.
    pub fn to_table(&self) -> Table {
        let mut out = Table::new();
        for t in [table_of(&self.run), table_of(&self.train), table_of(&self.scenario)] {
            out.extend(t);
        }
        out
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_table()).expect("flat table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TargetAnnotation;
    use crate::trainer::SelfTrainWeight;

    #[test]
    fn shared_keys_reach_every_section() {
        let cfg = ExperimentConfig::from_toml_str("num_classes = 3\nseed = 9\niterations = 7").unwrap();
        assert_eq!(cfg.run.num_classes, 3);
        assert_eq!(cfg.scenario.num_classes, 3);
        assert_eq!((cfg.run.seed, cfg.scenario.seed), (9, 9));
        assert_eq!(cfg.train.iterations, 7);
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        assert!(ExperimentConfig::from_toml_str("colour = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("iterations = \"many\"").is_err());
        assert!(ExperimentConfig::from_toml_str("iterations = ").is_err());
    }

    #[test]
    fn overrides_accept_bare_words() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("target_annotation=point").unwrap();
        cfg.set("target_weighting = alpha").unwrap();
        cfg.set("target_prior=[0.5,0.5]").unwrap();
        cfg.set("learning_rate=0.2").unwrap();
        assert_eq!(cfg.scenario.target_annotation, TargetAnnotation::Point);
        assert_eq!(cfg.train.target_weighting, SelfTrainWeight::Alpha);
        assert_eq!(cfg.scenario.target_prior, vec![0.5, 0.5]);
        assert_eq!(cfg.train.learning_rate, 0.2);
        assert!(cfg.set("no_equals_sign").is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("components=5").unwrap();
        cfg.set("noise_rate=0.3").unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
