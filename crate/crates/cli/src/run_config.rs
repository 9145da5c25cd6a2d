//! Training run configuration: model keys, training keys and `precision`
//! in one flat namespace.

use std::collections::BTreeSet;
use std::fmt::Write;

use lamo::arch::ModelConfig;
use lamo::config::{parse_pairs, ConfigError};
use lamo::data::Dataset;
use lamo::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" | "f32" => Some(Precision::Single),
            "double" | "f64" => Some(Precision::Double),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::Single,
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn valid_keys() -> Vec<&'static str> {
        let mut keys: Vec<&str> = ModelConfig::KEYS.iter().chain(TrainConfig::KEYS.iter()).copied().collect();
        keys.push("precision");
        keys
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if key == "precision" {
            self.precision = Precision::parse(value).ok_or_else(|| ConfigError::Value {
                key: key.into(),
                value: value.into(),
                msg: "expected single or double".into(),
            })?;
        } else if ModelConfig::KEYS.contains(&key) {
            self.model.set(key, value)?;
        } else if TrainConfig::KEYS.contains(&key) {
            self.train.set(key, value)?;
        } else {
            return Err(ConfigError::UnknownKey {
                key: key.into(),
                valid: Self::valid_keys().into_iter().map(String::from).collect(),
            });
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Config file text followed by `key=value` overrides; later values win.
    pub fn from_sources(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        if let Some(text) = text {
            for (k, v) in parse_pairs(text)? {
                c.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Fills shape fields the user left unset from the dataset.
    pub fn fit_to(&mut self, ds: &Dataset) {
        let m = &mut self.model;
        let given = |k: &str| self.explicit.contains(k);
        if !given("grid") {
            m.grid = ds.grid();
        }
        if !given("in_channels") {
            m.in_channels = ds.in_channels();
        }
        if !given("out_channels") {
            m.out_channels = ds.out_channels();
        }
        if !given("coord_channels") {
            m.coord_channels = ds.coord_channels();
        }
        if !given("fixed_points") {
            m.fixed_points = if m.grid.is_some() { 0 } else { ds.points() };
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# model");
        s += &self.model.to_text();
        let _ = writeln!(s, "# training");
        s += &self.train.to_text();
        let _ = writeln!(s, "precision = {}", self.precision.name());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_text_round_trips() {
        let c = RunConfig::from_sources(
            Some("epochs = 3\nembed_dim = 16 # width\n"),
            &[("epochs".into(), "5".into()), ("precision".into(), "double".into())],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.model.embed_dim, 16);
        assert_eq!(c.precision, Precision::Double);
        let back = RunConfig::from_sources(Some(&c.to_text()), &[]).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.train, c.train);
    }

    #[test]
    fn unknown_key_lists_every_valid_key() {
        let msg = RunConfig::from_sources(Some("epoch = 3"), &[]).unwrap_err().to_string();
        for k in RunConfig::valid_keys() {
            assert!(msg.contains(k), "{k} missing from {msg}");
        }
    }
}
