//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! an error so that typos do not silently fall back to defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::NoiseScope;
use crate::trainer::HyperParams;

#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(KeyValues {
            entries,
            used: BTreeSet::new(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        KeyValues::parse(&std::fs::read_to_string(path)?)
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.entries.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn get_bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.raw(key)
            .map(|v| match v.as_str() {
                "on" | "true" | "1" | "yes" => Ok(true),
                "off" | "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("`{key}`: expected on/off, got `{v}`"))),
            })
            .transpose()
    }

    pub fn get_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails on any key that no reader asked for.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

/// Hyperparameters plus data preparation settings for a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub split: (f64, f64, f64),
    pub top_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hp: HyperParams::default(),
            split: (0.7, 0.1, 0.2),
            top_k: None,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let hp = &mut cfg.hp;
        kv.set("tau_domain", &mut hp.tau_domain)?;
        kv.set("tau_category", &mut hp.tau_category)?;
        kv.set("epsilon", &mut hp.epsilon)?;
        kv.set("lambda", &mut hp.lambda)?;
        kv.set("alpha", &mut hp.alpha)?;
        kv.set("learning_rate", &mut hp.learning_rate)?;
        kv.set("dropout", &mut hp.dropout)?;
        kv.set("batch_size", &mut hp.batch_size)?;
        kv.set("positives_per_cell", &mut hp.positives_per_cell)?;
        kv.set("epochs", &mut hp.epochs)?;
        kv.set("seed", &mut hp.seed)?;
        kv.set("repr_dim", &mut hp.repr_dim)?;
        if let Some(v) = kv.get_bool("dscl")? {
            hp.ablation.dscl = v;
        }
        if let Some(v) = kv.get_bool("cscl")? {
            hp.ablation.cscl = v;
        }
        if let Some(v) = kv.get_bool("al")? {
            hp.ablation.al = v;
        }
        if let Some(v) = kv.get_bool("detach_domain")? {
            hp.detach_domain = v;
        }
        if let Some(v) = kv.get_list("hidden_dims")? {
            hp.hidden_dims = v;
        }
        if let Some(scope) = kv.raw("noise_scope") {
            hp.noise_scope = match scope.as_str() {
                "per_example" => NoiseScope::PerExample,
                "per_batch" => NoiseScope::PerBatch,
                other => {
                    return Err(Error::Config(format!(
                        "`noise_scope`: expected per_example or per_batch, got `{other}`"
                    )))
                }
            };
        }
        if let Some(r) = kv.get_list::<f64>("split")? {
            match r.as_slice() {
                [a, b, c] => cfg.split = (*a, *b, *c),
                _ => return Err(Error::Config("`split` needs three ratios".into())),
            }
        }
        cfg.top_k = kv.get("top_k")?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = TrainConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }
}

impl SynthConfig {
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut c = SynthConfig::default();
        kv.set("num_domains", &mut c.num_domains)?;
        kv.set("num_classes", &mut c.num_classes)?;
        kv.set("per_cell_count", &mut c.per_cell_count)?;
        kv.set("feature_dim", &mut c.feature_dim)?;
        kv.set("class_separation", &mut c.class_separation)?;
        kv.set("domain_shift", &mut c.domain_shift)?;
        kv.set("noise_std", &mut c.noise_std)?;
        kv.set("seed", &mut c.seed)?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = SynthConfig::from_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        SynthConfig::parse(&std::fs::read_to_string(path)?)
    }
}
