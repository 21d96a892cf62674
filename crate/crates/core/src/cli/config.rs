//! `key = value` run configuration validated against a fixed key registry.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub struct KeySpec {
    pub name: &'static str,
    /// `None` marks a key that is unset unless given.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: Some(default),
        help,
    }
}

const fn unset(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: None,
        help,
    }
}

pub const REGISTRY: &[KeySpec] = &[
    key("seed", "0", "seed for initialization, batches and sampling chains"),
    key("out", "run", "output directory"),
    key("schedule", "linear_scaled", "noise schedule: linear, linear_scaled, cosine"),
    key("timesteps", "100", "diffusion steps T"),
    key("variance_mode", "fixed_beta", "reverse variance: fixed_beta, posterior_beta_tilde"),
    unset("dataset", "training data: procedural or mixture2d (required by train)"),
    key("dataset_size", "512", "number of training items"),
    key("data_seed", "0", "seed of the dataset and of reference draws"),
    key("image_size", "16", "side of procedural images"),
    key("model", "auto", "architecture: tiny, mlp, auto (tiny for images, mlp for vectors)"),
    key("features", "16", "tiny: feature channels"),
    key("heads", "4", "tiny: attention heads"),
    key("attn_layers", "1", "tiny: stacked attention layers"),
    key("time_dim", "16", "timestep embedding width"),
    key("hidden", "64", "mlp: hidden width"),
    key("num_classes", "2", "class embeddings (0 = unconditional)"),
    key("train_steps", "2000", "SGD steps"),
    key("learning_rate", "0.05", "SGD step size"),
    key("batch_size", "16", "examples per step"),
    key("class_drop_prob", "0.1", "probability of training with the null class"),
    unset("checkpoint", "checkpoint directory written by train"),
    key("oracle", "false", "sample with the closed-form 2-D mixture denoiser"),
    key("n", "16", "number of sampling chains"),
    key("guidance", "none", "none, cg, cfg, blur, sag, sag_cfg"),
    key("scale", "0.1", "guidance scale for cg, cfg, blur, sag"),
    key("scale_cfg", "1.0", "class scale in sag_cfg"),
    key("scale_sag", "0.1", "self-attention scale in sag_cfg"),
    key("sigma", "1.0", "blur sigma"),
    key("psi", "1.0", "attention mask threshold"),
    key("layer", "attn0", "attention layer used for masking"),
    key("strategy", "self_attention", "mask: global, random, square, high_frequency, self_attention"),
    key("mask_fraction", "0.4", "masked fraction for strategies that ignore attention"),
    key("gap_axis", "key", "attention pooling axis: key, query"),
    unset("class", "class label for cg, cfg, sag_cfg"),
    key("compare_baseline", "false", "also sample unguided chains with the same seed"),
    key("reference_size", "10000", "reference draws for oracle runs"),
    key("grid_cols", "8", "columns of the sample grid image"),
    unset("sweep", "ablation axis and values, e.g. scale=-0.1,0,0.1"),
    unset("run_dir", "sample run analyzed by analyze"),
    key("patch_size", "8", "analyze: patch side (8, 16, 32)"),
    key("analyze_psi", "1.0,1.3", "analyze: thresholds"),
    key("probe_images", "500", "analyze: dataset images probed for IoU"),
];

pub fn spec(name: &str) -> Option<&'static KeySpec> {
    REGISTRY.iter().find(|k| k.name == name)
}

/// Registry rendered for `--help`.
pub fn help_table() -> String {
    let mut out = String::from("Config keys (`key = value` in --config, or --set key=value):\n");
    for k in REGISTRY {
        let d = k.default.unwrap_or("unset");
        out.push_str(&format!("  {:<18} {:<16} {}\n", k.name, d, k.help));
    }
    out
}

/// Explicitly given settings; everything else falls back to the registry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if cfg.values.contains_key(k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            if v.is_empty() {
                // snapshots list unset keys with an empty value
                if spec(k).is_none() {
                    return Err(Error::Config(format!("unknown key `{k}`")));
                }
                continue;
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if spec(key).is_none() {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `other`'s explicit values for keys not set here.
    pub fn fill_from(&mut self, other: &RunConfig) {
        for (k, v) in &other.values {
            self.values.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| spec(key).and_then(|k| k.default))
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.require(key)?;
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{s}`")))
            })
            .collect()
    }

    /// Every registry key with its resolved value, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for k in REGISTRY {
            out.push_str(&format!("{} = {}\n", k.name, self.raw(k.name).unwrap_or("")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_errors() {
        let c = RunConfig::parse("# comment\nseed = 7  # trailing\n\nguidance = sag\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 7);
        assert_eq!(c.get::<f64>("psi").unwrap(), 1.0);
        assert_eq!(c.raw("dataset"), None);
        assert!(matches!(c.require("dataset"), Err(Error::Config(m)) if m.contains("dataset")));
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(m)) if m.contains("bogus")));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed = x").unwrap().get::<u64>("seed").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.set("scale", -0.25).unwrap();
        c.set("dataset", "procedural").unwrap();
        let back = RunConfig::parse(&c.snapshot()).unwrap();
        assert_eq!(back.snapshot(), c.snapshot());
        assert_eq!(back.get::<f64>("scale").unwrap(), -0.25);
        assert_eq!(back.raw("checkpoint"), None);
        assert_eq!(c.get_list::<f64>("analyze_psi").unwrap(), vec![1.0, 1.3]);
    }
}
