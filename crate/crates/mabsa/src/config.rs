//! Run configuration: a JSON file of flat dotted keys (`"train.learning_rate"`),
//! overridden by `key=value` flags, resolved against preset defaults and
//! persisted next to every run's artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use mabsa_core::corpus::SyntheticConfig;
use mabsa_core::model::ModelConfig;
use mabsa_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{usage, AppError, Result};
use crate::io::write_with;

/// Base defaults that user keys are applied over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small model and short schedules that run on one CPU core in minutes.
    Desk,
    /// The full-size architecture (d=768, 6+6 layers) and long schedule.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Train/dev/test fractions used by `synth`.
    pub split: [f64; 3],
    /// Tokens rarer than this in the training text map to `<unk>`.
    pub vocab_min_freq: usize,
    /// Fine-tune on a seeded random subset of this many training examples.
    pub train_size: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { split: [0.7, 0.15, 0.15], vocab_min_freq: 1, train_size: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Drives corpus synthesis, splitting, initialization and training.
    pub seed: u64,
    pub synth: SyntheticConfig,
    pub data: DataConfig,
    /// `vocab_size`, `regions`, `classes` and `feature_dim` left at 0 are
    /// taken from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Keys owned by the top-level `seed`.
const DERIVED: [&str; 2] = ["synth.seed", "train.seed"];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Desk => (
                ModelConfig::desk(0, 0, 0, 0),
                TrainConfig {
                    learning_rate: 1e-3,
                    pretrain_epochs: 6,
                    finetune_epochs: 20,
                    pretrain_batch: 16,
                    finetune_batch: 8,
                    ..TrainConfig::default()
                },
            ),
            Preset::Full => (
                ModelConfig { vocab_size: 0, regions: 0, classes: 0, feature_dim: 0, ..ModelConfig::default() },
                TrainConfig::default(),
            ),
        };
        let synth = SyntheticConfig { seed: 0, ..SyntheticConfig::default() };
        Self { preset, seed: 0, synth, data: DataConfig::default(), model, train: TrainConfig { seed: 0, ..train } }
    }

    /// Applies `file` (if any), then `overrides` of the form `key=value`
    /// where the value is JSON or a bare string.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| AppError::format(path, format!("invalid JSON: {e}")))?;
            if !v.is_object() {
                return Err(AppError::format(path, "config must be a JSON object"));
            }
            flatten("", &v, &mut user);
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("override {o:?} is not key=value")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            user.insert(k.trim().to_string(), v);
        }
        Self::from_flat(user)
    }

    pub fn from_flat(mut user: BTreeMap<String, Value>) -> Result<Self> {
        let preset = match user.remove("preset") {
            None => Preset::Desk,
            Some(v) => serde_json::from_value(v).map_err(|_| usage("preset must be \"desk\" or \"full\""))?,
        };
        let mut flat = Self::preset(preset).to_flat();
        if let Some(seed) = user.get("seed") {
            if seed.as_u64().is_none() {
                return Err(usage("config key `seed` expects a non-negative integer"));
            }
        }
        for (k, v) in user {
            if DERIVED.contains(&k.as_str()) {
                return Err(usage(format!("config key `{k}` is set through `seed`")));
            }
            let Some(default) = flat.get(&k) else {
                return Err(usage(format!("unknown config key `{k}`")));
            };
            check_kind(&k, default, &v)?;
            flat.insert(k, v);
        }
        let seed = flat["seed"].clone();
        for k in DERIVED {
            flat.insert(k.to_string(), seed.clone());
        }
        let cfg: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| usage(format!("config does not deserialize: {e}")))?;
        cfg.train.validate()?;
        cfg.synth.check()?;
        Ok(cfg)
    }

    /// Flat dotted keys; the derived per-section seeds are omitted.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        for k in DERIVED {
            out.remove(k);
        }
        out
    }

    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.to_flat().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes")
    }

    /// Writes the resolved config as `dir/config.json`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        let json = self.to_json();
        write_with(&dir.join("config.json"), |w| {
            use std::io::Write;
            writeln!(w, "{json}")
        })
    }

    /// The model config with every data-shaped field still at 0 filled in.
    pub fn model_for(&self, vocab_size: usize, regions: usize, classes: usize, feature_dim: usize) -> ModelConfig {
        let mut m = self.model.clone();
        for (field, v) in [
            (&mut m.vocab_size, vocab_size),
            (&mut m.regions, regions),
            (&mut m.classes, classes),
            (&mut m.feature_dim, feature_dim),
        ] {
            if *field == 0 {
                *field = v;
            }
        }
        m
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let mut parts: Vec<&str> = k.split('.').collect();
        let last = parts.pop().expect("nonempty key");
        let mut node = &mut root;
        for p in parts {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("keys nest consistently");
        }
        node.insert(last.to_string(), v.clone());
    }
    Value::Object(root)
}

fn check_kind(key: &str, default: &Value, v: &Value) -> Result<()> {
    let ok = match default {
        Value::Null => true,
        Value::Bool(_) => v.is_boolean(),
        Value::Number(n) if n.is_u64() => v.is_u64(),
        Value::Number(_) => v.is_number(),
        Value::String(_) => v.is_string(),
        Value::Array(_) => v.is_array(),
        Value::Object(_) => v.is_object(),
    };
    if ok {
        Ok(())
    } else {
        let want = match default {
            Value::Bool(_) => "a boolean",
            Value::Number(n) if n.is_u64() => "a non-negative integer",
            Value::Number(_) => "a number",
            Value::String(_) => "a string",
            _ => "an array",
        };
        Err(usage(format!("config key `{key}` expects {want}, got {v}")))
    }
}
