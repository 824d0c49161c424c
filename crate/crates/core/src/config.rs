//! Model/training configuration and its text formats.
//!
//! Two encodings are accepted: flat `key = value` lines (`#` starts a
//! comment; lists are comma separated) and a JSON object with the same keys.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Published MobileNetV3-Small backbone at 224x224.
    Full,
    /// Width/depth-reduced backbone for tests and desk-scale experiments.
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub input_size: usize,
    pub scales: usize,
    pub sigmas: Vec<f64>,
    pub d_f: usize,
    pub d_g: usize,
    pub d_e: usize,
    pub proj_hidden: usize,
    pub mu: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub margin: f64,
    pub delta: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// When false the backbone runs with identity gates and the guidance
    /// module is skipped.
    pub guidance: bool,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            mode: Mode::Full,
            input_size: 224,
            scales: 3,
            sigmas: vec![1.0, 2.0, 4.0],
            d_f: 8,
            d_g: 16,
            d_e: 64,
            proj_hidden: 128,
            mu: 0.99,
            lambda_c: 0.5,
            lambda_d: 0.1,
            margin: 0.8,
            delta: 0.01,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            guidance: true,
        }
    }

    pub fn micro() -> Self {
        Self {
            mode: Mode::Micro,
            input_size: 32,
            proj_hidden: 64,
            ..Self::full()
        }
    }

    pub fn defaults_for(mode: Mode) -> Self {
        match mode {
            Mode::Full => Self::full(),
            Mode::Micro => Self::micro(),
        }
    }

    /// Side of the spatial guidance map (resolution of the first
    /// conditioning stage).
    pub fn guidance_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.to_string(),
                reason,
            })
        };
        let positive = [
            ("input_size", self.input_size),
            ("scales", self.scales),
            ("d_f", self.d_f),
            ("d_g", self.d_g),
            ("d_e", self.d_e),
            ("proj_hidden", self.proj_hidden),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(k, "must be positive".into());
            }
        }
        let divisor = match self.mode {
            Mode::Full => 32,
            Mode::Micro => 16,
        };
        if self.input_size % divisor != 0 {
            return bad(
                "input_size",
                format!("{} is not a multiple of {divisor}", self.input_size),
            );
        }
        if self.mode == Mode::Full && self.d_e != 64 {
            return bad("d_e", format!("full mode fixes the embedding at 64, got {}", self.d_e));
        }
        if self.sigmas.len() != self.scales {
            return bad(
                "sigmas",
                format!("{} values for {} scales", self.sigmas.len(), self.scales),
            );
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return bad("sigmas", format!("{s} is not positive"));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad("mu", format!("{} not in (0, 1)", self.mu));
        }
        for (k, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_d", self.lambda_d),
            ("delta", self.delta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(k, format!("{v} must be a finite non-negative number"));
            }
        }
        if !(self.margin > 0.0) {
            return bad("margin", format!("{} must be positive", self.margin));
        }
        if !(self.lr > 0.0) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(k, format!("{v} not in [0, 1)"));
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key {
            "mode" => self.mode = parse_mode(raw)?,
            "input_size" => self.input_size = parse(key, raw)?,
            "scales" => self.scales = parse(key, raw)?,
            "sigmas" => {
                self.sigmas = raw
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "d_f" => self.d_f = parse(key, raw)?,
            "d_g" => self.d_g = parse(key, raw)?,
            "d_e" => self.d_e = parse(key, raw)?,
            "proj_hidden" => self.proj_hidden = parse(key, raw)?,
            "mu" => self.mu = parse(key, raw)?,
            "lambda_c" => self.lambda_c = parse(key, raw)?,
            "lambda_d" => self.lambda_d = parse(key, raw)?,
            "margin" | "margin_m" => self.margin = parse(key, raw)?,
            "delta" => self.delta = parse(key, raw)?,
            "lr" => self.lr = parse(key, raw)?,
            "beta1" => self.beta1 = parse(key, raw)?,
            "beta2" => self.beta2 = parse(key, raw)?,
            "weight_decay" => self.weight_decay = parse(key, raw)?,
            "batch_size" => self.batch_size = parse(key, raw)?,
            "epochs" => self.epochs = parse(key, raw)?,
            "seed" => self.seed = parse(key, raw)?,
            "guidance" => self.guidance = parse(key, raw)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    reason: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parses either encoding; missing keys take the defaults of the given
    /// (or default full) mode.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mode = match pairs.iter().find(|(k, _)| k == "mode") {
            Some((_, v)) => parse_mode(v)?,
            None => Mode::Full,
        };
        let mut cfg = Self::defaults_for(mode);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            Mode::Full => "full",
            Mode::Micro => "micro",
        };
        let sigmas: Vec<String> = self.sigmas.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "mode = {mode}");
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "scales = {}", self.scales);
        let _ = writeln!(s, "sigmas = {}", sigmas.join(","));
        for (k, v) in [
            ("d_f", self.d_f),
            ("d_g", self.d_g),
            ("d_e", self.d_e),
            ("proj_hidden", self.proj_hidden),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in [
            ("mu", self.mu),
            ("lambda_c", self.lambda_c),
            ("lambda_d", self.lambda_d),
            ("margin", self.margin),
            ("delta", self.delta),
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("weight_decay", self.weight_decay),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "guidance = {}", self.guidance);
        s
    }
}

fn parse_mode(raw: &str) -> Result<Mode> {
    match raw.trim().trim_matches('"') {
        "full" => Ok(Mode::Full),
        "micro" => Ok(Mode::Micro),
        other => Err(Error::Config {
            key: "mode".into(),
            reason: format!("`{other}` is not one of full, micro"),
        }),
    }
}

fn parse<V: std::str::FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    raw.trim().trim_matches('"').parse().map_err(|e: V::Err| Error::Config {
        key: key.to_string(),
        reason: format!("cannot parse `{raw}`: {e}"),
    })
}

/// Splits a config document into ordered `(key, raw value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let map: BTreeMap<String, serde_json::Value> = serde_json::from_str(trimmed)?;
        return Ok(map
            .into_iter()
            .map(|(k, v)| {
                let raw = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                    other => other.to_string(),
                };
                (k, raw)
            })
            .collect());
    }
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                key: line.to_string(),
                reason: format!("line {}: expected `key = value`", lineno + 1),
            });
        };
        let k = k.trim();
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(Error::Config {
                key: k.to_string(),
                reason: format!("line {}: duplicate key", lineno + 1),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn key_value_round_trip() {
        let mut cfg = ModelConfig::micro();
        cfg.sigmas = vec![0.5, 1.5, 3.0];
        cfg.lambda_c = 0.25;
        cfg.guidance = false;
        let text = cfg.to_key_value();
        assert_eq!(ModelConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn json_is_accepted() {
        let cfg = ModelConfig::parse(r#"{"mode": "micro", "sigmas": [1, 2, 4], "epochs": 3}"#).unwrap();
        assert_eq!(cfg.mode, Mode::Micro);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.sigmas, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        let err = ModelConfig::parse("mode = micro\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        let err = ModelConfig::parse("mode = full\nd_e = 32\n").unwrap_err();
        assert!(err.to_string().contains("d_e"));
        assert!(ModelConfig::parse("sigmas = 1,2\n").is_err());
        assert!(ModelConfig::parse("mu = 1.5\n").is_err());
        assert!(ModelConfig::parse("epochs = many\n").is_err());
    }
}
