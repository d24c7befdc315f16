//! Flat `key=value` configuration.
//!
//! One key per line, `#` starts a comment. Layers are merged with later
//! layers taking precedence; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable that supplies a seed below the config file.
pub const SEED_ENV: &str = "WHISMM_SEED";

/// Every key understood anywhere in the pipeline, with its default.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "17"),
    ("model.d_model", "128"),
    ("model.n_heads", "4"),
    ("model.n_layers_audio", "4"),
    ("model.n_layers_text", "4"),
    ("model.n_layers_mm", "2"),
    ("model.ffn_mult", "4"),
    ("model.conv_width", "16"),
    ("model.conv2_stride", "10"),
    ("model.n_mels", "80"),
    ("model.vocab_size", "8192"),
    ("model.max_text_len", "64"),
    ("model.max_audio_patches", "128"),
    ("mask.text_ratio", "0.15"),
    ("mask.audio_ratio", "0.08"),
    ("mask.audio_span", "5"),
    ("loss.weights.mlm", "1.0"),
    ("loss.weights.mam", "1.0"),
    ("loss.weights.mmc", "1.0"),
    ("loss.weights.mmm", "1.0"),
    ("loss.weights.atm", "1.0"),
    ("loss.tau_init", "0.07"),
    ("loss.kappa", "0.1"),
    ("train.epochs", "5"),
    ("train.learning_rate", "0.1"),
    ("train.momentum", "0.0"),
    ("train.batch_size", "16"),
    ("train.clip_norm", "1.0"),
    ("train.warmup_steps", "0"),
    ("train.checkpoint_interval", "1000"),
    ("train.deterministic", "true"),
    ("tokenizer.vocab_size", "8192"),
    ("segment.max_text_len", "64"),
    ("segment.max_audio_seconds", "10.0"),
];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn is_known(key: &str) -> bool {
    KNOWN_KEYS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    /// Defaults for every known key.
    pub fn defaults() -> Self {
        RunConfig {
            values: KNOWN_KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Parses `key=value` lines without checking keys.
    pub fn parse_lines(text: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{raw}`", n + 1)))?;
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !is_known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies `key=value` pairs on top of the current values.
    pub fn merge<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a String, &'a String)>,
    {
        for (k, v) in pairs {
            self.set(k, v.clone())?;
        }
        Ok(())
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let parsed = RunConfig::parse_lines(text)?;
        self.merge(&parsed)
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text)
    }

    /// Applies a single `key=value` override.
    pub fn merge_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Resolves defaults, then `WHISMM_SEED`, then the config file, then
    /// command-line overrides.
    pub fn resolve(env_seed: Option<&str>, file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::defaults();
        if let Some(s) = env_seed {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            cfg.set("seed", s.trim())?;
        }
        if let Some(t) = file_text {
            cfg.merge_text(t)?;
        }
        for o in overrides {
            cfg.merge_override(o)?;
        }
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse::<T>()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
    }

    /// The frozen form written into run directories.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layer_precedence() {
        let file = "seed = 5\ntrain.learning_rate=0.5 # file\nmodel.d_model=64\n";
        let cfg = RunConfig::resolve(Some("99"), Some(file), &["train.learning_rate=0.25".into()]).unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 5);
        assert_eq!(cfg.get::<f64>("train.learning_rate").unwrap(), 0.25);
        assert_eq!(cfg.get::<usize>("model.d_model").unwrap(), 64);
        assert_eq!(cfg.get::<usize>("model.n_heads").unwrap(), 4);

        let env_only = RunConfig::resolve(Some("99"), Some("model.d_model=64"), &[]).unwrap();
        assert_eq!(env_only.get::<u64>("seed").unwrap(), 99);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(None, Some("nope=1"), &[]).is_err());
        assert!(RunConfig::resolve(None, None, &["model.bogus=1".into()]).is_err());
        assert!(RunConfig::resolve(None, Some("just text"), &[]).is_err());
        assert!(RunConfig::resolve(Some("abc"), None, &[]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::defaults();
        cfg.set("mask.audio_span", "3").unwrap();
        let again = RunConfig::resolve(None, Some(&cfg.to_text()), &[]).unwrap();
        assert_eq!(again, cfg);
    }
}
