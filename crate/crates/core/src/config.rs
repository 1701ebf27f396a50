//! `key=value` configuration files and value parsers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::streaming::{DEFAULT_GROUP_SIZE, DEFAULT_WINDOW};
use crate::training::TrainConfig;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got `{line}`",
                n + 1
            )));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

pub fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

pub fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::Config(format!("{key}: expected a finite number, got `{v}`"))),
    }
}

pub fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got `{v}`"))),
    }
}

pub fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Data-side settings of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub holdout_fraction: f64,
    pub new_user_fraction: f64,
    pub max_group_size: usize,
    pub stream_window: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            holdout_fraction: 0.025,
            new_user_fraction: 0.2,
            max_group_size: DEFAULT_GROUP_SIZE,
            stream_window: DEFAULT_WINDOW,
        }
    }
}

/// Model, training and data settings merged into one key space.
/// Precedence is defaults, then the config file, then explicit overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        match key {
            "holdout_fraction" => d.holdout_fraction = parse_f64(key, value)?,
            "new_user_fraction" => d.new_user_fraction = parse_f64(key, value)?,
            "max_group_size" => d.max_group_size = parse_usize(key, value)?,
            "stream_window" => d.stream_window = parse_usize(key, value)?,
            _ => {
                if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Defaults overlaid with an optional file and then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        for (name, f) in [
            ("holdout_fraction", d.holdout_fraction),
            ("new_user_fraction", d.new_user_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {f}")));
            }
        }
        if d.max_group_size == 0 || d.stream_window == 0 {
            return Err(Error::Config("max_group_size and stream_window must be >= 1".into()));
        }
        Ok(())
    }

    /// Every effective value, one `key=value` per line.
    pub fn render(&self) -> String {
        format!(
            "# model\n{}# training\n{}# data\nholdout_fraction={}\nnew_user_fraction={}\nmax_group_size={}\nstream_window={}\n",
            self.model.canonical(),
            self.train.canonical(),
            self.data.holdout_fraction,
            self.data.new_user_fraction,
            self.data.max_group_size,
            self.data.stream_window
        )
    }
}
