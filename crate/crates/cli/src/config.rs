//! Experiment config files: `{"schema_version": 1, "<section>": {...}, ...}`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spectral_adapter::io::{parse_config, CONFIG_SCHEMA_VERSION};
use spectral_adapter::train::{rank_recovery_default_train, ToyNetConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub seed: u64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self { n: 8, m: 12, r: 2, seed: 0 }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if 2 * self.r > self.n {
            errs.push(format!("r = {} needs 2r <= n = {}", self.r, self.n));
        }
        if self.n > self.m {
            errs.push(format!("n = {} must not exceed m = {}", self.n, self.m));
        }
        errs
    }
}

fn read_object(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err(CliError::Data(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Data(format!("{}: {e}", path.display()))),
    }
}

/// Overlays the user's keys on `default`. Keys that fail on their own are
/// reported under `name.` and left at their defaults, so later semantic
/// checks still see the valid ones.
fn section<T: Serialize + DeserializeOwned>(obj: &Map<String, Value>, name: &str, default: T, errs: &mut Vec<String>) -> T {
    let Some(user) = obj.get(name) else {
        return default;
    };
    let Value::Object(user) = user else {
        errs.push(format!("{name}: must be an object"));
        return default;
    };
    let Ok(Value::Object(mut merged)) = serde_json::to_value(&default) else {
        unreachable!("config sections serialize to objects")
    };
    for (k, v) in user {
        let mut single = Map::new();
        single.insert(k.clone(), v.clone());
        match parse_config::<T>(&Value::Object(single)) {
            Ok(_) => {
                if k != "schema_version" {
                    merged.insert(k.clone(), v.clone());
                }
            }
            Err(e) => errs.extend(e.into_iter().map(|s| format!("{name}.{s}"))),
        }
    }
    match serde_json::from_value(Value::Object(merged)) {
        Ok(t) => t,
        Err(e) => {
            errs.push(format!("{name}: {e}"));
            default
        }
    }
}

fn check_top_level(obj: &Map<String, Value>, sections: &[&str], errs: &mut Vec<String>) {
    for (k, v) in obj {
        if k == "schema_version" {
            if v.as_u64() != Some(CONFIG_SCHEMA_VERSION as u64) {
                errs.push(format!("schema_version: expected {CONFIG_SCHEMA_VERSION}, found {v}"));
            }
        } else if !sections.contains(&k.as_str()) {
            errs.push(format!("unknown section '{k}', expected one of {sections:?}"));
        }
    }
}

fn finish<T>(path: Option<&Path>, errs: Vec<String>, value: T) -> CliResult<T> {
    if errs.is_empty() {
        return Ok(value);
    }
    let origin = path.map_or("config".to_string(), |p| p.display().to_string());
    Err(CliError::Data(format!("{origin}:\n  {}", errs.join("\n  "))))
}

fn train_errors(train: &TrainConfig, errs: &mut Vec<String>) {
    errs.extend(train.validate().into_iter().map(|e| format!("train.{e}")));
    if train.adapter.is_some() {
        errs.push("train.adapter: experiments choose their own adapters".into());
    }
}

pub fn subspace(path: Option<&Path>) -> CliResult<(ToyNetConfig, TrainConfig)> {
    let obj = read_object(path)?;
    let mut errs = Vec::new();
    check_top_level(&obj, &["toynet", "train"], &mut errs);
    let toynet = section(&obj, "toynet", ToyNetConfig::default(), &mut errs);
    let train = section(&obj, "train", ToyNetConfig::default_train(), &mut errs);
    errs.extend(toynet.validate().into_iter().map(|e| format!("toynet.{e}")));
    train_errors(&train, &mut errs);
    finish(path, errs, (toynet, train))
}

pub fn problem(path: Option<&Path>) -> CliResult<(ProblemConfig, TrainConfig)> {
    let obj = read_object(path)?;
    let mut errs = Vec::new();
    check_top_level(&obj, &["problem", "train"], &mut errs);
    let problem = section(&obj, "problem", ProblemConfig::default(), &mut errs);
    let train = section(&obj, "train", rank_recovery_default_train(), &mut errs);
    errs.extend(problem.validate().into_iter().map(|e| format!("problem.{e}")));
    train_errors(&train, &mut errs);
    finish(path, errs, (problem, train))
}

/// Train config for `spadapt train`; the adapter is allowed here.
pub fn train(path: Option<&Path>) -> CliResult<TrainConfig> {
    let obj = read_object(path)?;
    let mut errs = Vec::new();
    let cfg = match parse_config::<TrainConfig>(&Value::Object(obj)) {
        Ok(c) => c,
        Err(e) => {
            errs.extend(e);
            TrainConfig::default()
        }
    };
    if errs.is_empty() {
        errs.extend(cfg.validate());
    }
    finish(path, errs, cfg)
}
