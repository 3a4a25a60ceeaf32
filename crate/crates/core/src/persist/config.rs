//! Flat `key = value` run configuration.
//!
//! Every accepted key is listed in [`KEYS`] with its default; unknown keys
//! are rejected. Values are stored in canonical form, so serializing and
//! re-parsing gives back the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Str,
    /// One of a fixed set of words.
    Choice(&'static [&'static str]),
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, kind, default, doc }
}

pub const EXPERIMENTS: &[&str] =
    &["exp1_uncond_full", "exp2_uncond_subset", "exp3_cond_machine", "exp4_cond_oracle", "exp5_cond_degenerate"];

pub const KEYS: &[KeySpec] = &[
    key("seed", Kind::Str, "", "master seed (u64); required by every training command"),
    key("experiment", Kind::Choice(EXPERIMENTS), "exp4_cond_oracle", "experiment run by run-experiment"),
    // Dataset.
    key("n", Kind::Usize, "3000", "scenes in the experiment dataset"),
    key("full_n", Kind::Usize, "6000", "scenes in the full set used by exp1_uncond_full"),
    key("train_fraction", Kind::F64, "0.6666666666666666", "fraction of ids placed in the train split"),
    key("diversity", Kind::F64, "1", "probability that a caption is a detailed template caption"),
    key("captions_per_image", Kind::Usize, "5", "captions per scene"),
    key("resolution", Kind::Usize, "64", "stored image resolution"),
    key("data_dir", Kind::Str, "", "existing dataset directory used by train and caption commands"),
    // Text.
    key("max_vocab", Kind::Usize, "1000", "vocabulary size including the four reserved tokens"),
    key("max_caption_len", Kind::Usize, "16", "longest caption in tokens, excluding BOS/EOS"),
    key("word_dim", Kind::Usize, "64", "word embedding width"),
    key("embed_dim", Kind::Usize, "128", "sentence embedding width"),
    // Captioner.
    key("feature_dim", Kind::Usize, "128", "image feature width"),
    key("lstm_hidden", Kind::Usize, "256", "decoder LSTM width"),
    key("batch_size", Kind::Usize, "16", "minibatch size for every model"),
    key("captioner_train_n", Kind::Usize, "1000", "captioner training scenes"),
    key("captioner_val_n", Kind::Usize, "250", "captioner validation scenes"),
    key("captioner_test_n", Kind::Usize, "250", "captioner held-out scenes"),
    key("xe_epochs", Kind::Usize, "10", "cross-entropy epochs"),
    key("scst_epochs", Kind::Usize, "10", "self-critical epochs"),
    key("xe_lr", Kind::F64, "0.0005", "Adam learning rate, cross-entropy phase"),
    key("xe_beta1", Kind::F64, "0.9", "Adam beta1 for the captioner"),
    key("scst_lr", Kind::F64, "0.00005", "Adam learning rate, self-critical phase"),
    key("scst_temperature", Kind::F64, "1", "sampling temperature during self-critical training"),
    key("encoder_loss_weight", Kind::F64, "1", "weight of the sentence-encoder alignment loss"),
    key("captioner_checkpoint", Kind::Str, "", "trained captioner (needed by captioning and conditional runs)"),
    // GAN.
    key("gan_epochs", Kind::Usize, "30", "GAN epochs"),
    key("gan_lr", Kind::F64, "0.0002", "Adam learning rate for generator and discriminators"),
    key("gan_beta1", Kind::F64, "0.5", "Adam beta1 for the GAN"),
    key("z_dim", Kind::Usize, "100", "noise width"),
    key("branches", Kind::Usize, "3", "generator branches (scales)"),
    key("base_resolution", Kind::Usize, "16", "resolution of the lowest scale"),
    key("noise_mode", Kind::Choice(&["separate_z", "embedding_only"]), "separate_z", "generator input"),
    key("captions_source", Kind::Str, "manifest", "train-gan conditioning: none, manifest, or a caption JSONL path"),
    key("gan_checkpoint", Kind::Str, "", "trained GAN used by generate and evaluate"),
    key("grid", Kind::Usize, "8", "side of the per-epoch sample montage"),
    // Captioning of the GAN corpus.
    key("caption_mode", Kind::Choice(&["greedy", "sample"]), "greedy", "machine captioning mode"),
    key("caption_k", Kind::Usize, "5", "machine captions per image"),
    // Probe and evaluation.
    key("probe_train_n", Kind::Usize, "1000", "scenes used to train the attribute probe"),
    key("probe_test_n", Kind::Usize, "500", "held-out scenes for the probe quality gate"),
    key("probe_epochs", Kind::Usize, "8", "probe epochs"),
    key("probe_lr", Kind::F64, "0.002", "probe Adam learning rate"),
    key("probe_checkpoint", Kind::Str, "", "reuse a trained probe instead of training one"),
    key("fidelity_n", Kind::Usize, "500", "generated samples scored by the probe"),
];

pub fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

fn canonical(spec: &KeySpec, raw: &str) -> std::result::Result<String, String> {
    let raw = raw.trim();
    match spec.kind {
        Kind::Usize => raw.parse::<usize>().map(|v| v.to_string()).map_err(|e| e.to_string()),
        Kind::U64 => raw.parse::<u64>().map(|v| v.to_string()).map_err(|e| e.to_string()),
        Kind::F64 => match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v.to_string()),
            Ok(v) => Err(format!("{v} is not finite")),
            Err(e) => Err(e.to_string()),
        },
        Kind::Bool => match raw {
            "true" | "1" | "yes" => Ok("true".into()),
            "false" | "0" | "no" => Ok("false".into()),
            _ => Err("expected true or false".into()),
        },
        Kind::Str => Ok(raw.to_string()),
        Kind::Choice(options) => {
            if options.contains(&raw) {
                Ok(raw.to_string())
            } else {
                Err(format!("expected one of {options:?}"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS.iter().map(|k| (k.key, canonical(k, k.default).expect("valid default"))).collect();
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k:?} set twice", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec(key).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        if key == "seed" && !value.trim().is_empty() {
            value.trim().parse::<u64>().map_err(|e| Error::Config(format!("seed: {e}")))?;
        }
        let v = canonical(spec, value).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        self.values.insert(spec.key, v);
        Ok(())
    }

    /// Every key in table order, one `key = value` line each.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{} = {}", k.key, self.values[k.key]).expect("string write");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(io_err(path))
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("undeclared config key {key:?}"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().expect("validated on parse")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated on parse")
    }

    pub fn str(&self, key: &str) -> &str {
        self.raw(key)
    }

    /// Empty string keys read as `None`.
    pub fn path(&self, key: &str) -> Option<std::path::PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| v.into())
    }

    pub fn seed(&self) -> Option<u64> {
        let v = self.raw("seed");
        (!v.is_empty()).then(|| v.parse().expect("validated on set"))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed().ok_or_else(|| Error::Config("a seed is required (config key `seed` or --seed)".into()))
    }

    /// `(key, value)` pairs in table order, for run manifests.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|k| (k.key, self.values[k.key].clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_equals_defaults() {
        let full = RunConfig::default().serialize();
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::parse(&full).unwrap());
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("n = 3\nn = 4").is_err());
        assert!(RunConfig::parse("n = -3").is_err());
        assert!(RunConfig::parse("noise_mode = both").is_err());
    }

    #[test]
    fn batch_default() {
        assert_eq!(RunConfig::default().usize("batch_size"), 16);
    }
}
