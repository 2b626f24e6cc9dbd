//! Plain-text `key = value` configuration for models and training runs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys mirror the fields of
//! [`ModelConfig`] and [`TrainConfig`]:
//!
//! | key | example |
//! |-----|---------|
//! | `input_size` | `128` |
//! | `num_classes` | `3` |
//! | `backbone_channels` | `16,32,32,32` |
//! | `rf_channels` | `32` |
//! | `s_min` | `12.8` or `auto` |
//! | `detect_layers` | `4,5,6,7` (layer names) |
//! | `objectness` | `true` |
//! | `init_std` | `0.01` |
//! | `trunk_init` | `he` or `gaussian` |
//! | `batch_size` | `16` |
//! | `base_lr` | `0.05` |
//! | `lr_schedule` | `1500:0.005` (comma separated `iter:lr`) |
//! | `momentum` | `0.9` |
//! | `weight_decay` | `0.0005` |
//! | `total_iters` | `2000` |
//! | `o_p` | `0.03` |
//! | `seed` | `0` |
//! | `checkpoint_every` | `500` |
//! | `train_sizes` | `128,192` |
//! | `loss_alpha`, `loss_beta` | `0.333333` |

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{ModelConfig, TrunkInit, NUM_LAYERS};
use crate::trainer::TrainConfig;

/// Model and training settings of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Splits text into `(line number, key, value)` entries.
pub fn parse_pairs(text: &str, name: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            source_name: name.to_string(),
            location: format!("line {}", i + 1),
            message: format!("expected key = value, found {line:?}"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, found {value:?}"))),
    }
}

fn detect_layers(value: &str) -> Result<Vec<usize>> {
    let mut layers = Vec::new();
    for l in list::<usize>("detect_layers", value)? {
        if !(4..4 + NUM_LAYERS).contains(&l) {
            return Err(Error::config(format!("detect_layers: layer {l} is not one of 4, 5, 6, 7")));
        }
        layers.push(l - 4);
    }
    layers.sort_unstable();
    layers.dedup();
    Ok(layers)
}

/// Applies one model key; `Ok(false)` when the key is not a model key.
pub fn apply_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "input_size" => cfg.input_size = num(key, value)?,
        "num_classes" => cfg.num_classes = num(key, value)?,
        "backbone_channels" => {
            let v: Vec<usize> = list(key, value)?;
            cfg.backbone_channels = v
                .try_into()
                .map_err(|_| Error::config(format!("{key}: expected {NUM_LAYERS} values")))?;
        }
        "rf_channels" => cfg.rf_channels = num(key, value)?,
        "s_min" => cfg.s_min = if value == "auto" { None } else { Some(num(key, value)?) },
        "detect_layers" => cfg.detect_layers = detect_layers(value)?,
        "objectness" => cfg.objectness = boolean(key, value)?,
        "init_std" => cfg.init_std = num(key, value)?,
        "trunk_init" => {
            cfg.trunk_init = TrunkInit::parse(value)
                .ok_or_else(|| Error::config(format!("{key}: expected he or gaussian, found {value:?}")))?
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Applies one training key; `Ok(false)` when the key is not a training key.
pub fn apply_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "batch_size" => cfg.batch_size = num(key, value)?,
        "base_lr" => cfg.base_lr = num(key, value)?,
        "lr_schedule" => {
            cfg.lr_schedule = value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|item| {
                    let (it, lr) = item
                        .split_once(':')
                        .ok_or_else(|| Error::config(format!("{key}: expected iter:lr, found {item:?}")))?;
                    Ok((num(key, it.trim())?, num(key, lr.trim())?))
                })
                .collect::<Result<_>>()?
        }
        "momentum" => cfg.momentum = num(key, value)?,
        "weight_decay" => cfg.weight_decay = num(key, value)?,
        "total_iters" => cfg.total_iters = num(key, value)?,
        "o_p" => cfg.o_p = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = num(key, value)?,
        "train_sizes" => cfg.train_sizes = list(key, value)?,
        "loss_alpha" => cfg.loss_weights.alpha = num(key, value)?,
        "loss_beta" => cfg.loss_weights.beta = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Applies one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if apply_model_key(&mut self.model, key, value)? || apply_train_key(&mut self.train, key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown key {key:?}")))
        }
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, k, v) in parse_pairs(text, name)? {
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                source_name: name.to_string(),
                location: format!("line {line}"),
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let schedule: Vec<String> = t.lr_schedule.iter().map(|(i, lr)| format!("{i}:{lr}")).collect();
        let sizes: Vec<String> = t.train_sizes.iter().map(usize::to_string).collect();
        format!(
            "{}batch_size = {}\nbase_lr = {}\nlr_schedule = {}\nmomentum = {}\nweight_decay = {}\ntotal_iters = {}\no_p = {}\nseed = {}\ncheckpoint_every = {}\ntrain_sizes = {}\nloss_alpha = {}\nloss_beta = {}\n",
            model_config_to_text(&self.model),
            t.batch_size,
            t.base_lr,
            schedule.join(","),
            t.momentum,
            t.weight_decay,
            t.total_iters,
            t.o_p,
            t.seed,
            t.checkpoint_every,
            sizes.join(","),
            t.loss_weights.alpha,
            t.loss_weights.beta,
        )
    }
}

/// Model keys only; floats use shortest round-trip formatting.
pub fn model_config_to_text(cfg: &ModelConfig) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let layers: Vec<usize> = cfg.detect_layers.iter().map(|l| l + 4).collect();
    format!(
        "input_size = {}\nnum_classes = {}\nbackbone_channels = {}\nrf_channels = {}\ns_min = {}\ndetect_layers = {}\nobjectness = {}\ninit_std = {}\ntrunk_init = {}\n",
        cfg.input_size,
        cfg.num_classes,
        join(&cfg.backbone_channels),
        cfg.rf_channels,
        cfg.s_min.map_or("auto".to_string(), |s| s.to_string()),
        join(&layers),
        cfg.objectness,
        cfg.init_std,
        cfg.trunk_init.name(),
    )
}

/// Parses model keys only; anything else is an error.
pub fn model_config_from_text(text: &str, name: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (line, k, v) in parse_pairs(text, name)? {
        let known = apply_model_key(&mut cfg, &k, &v).map_err(|e| Error::Parse {
            source_name: name.to_string(),
            location: format!("line {line}"),
            message: e.to_string(),
        })?;
        if !known {
            return Err(Error::Parse {
                source_name: name.to_string(),
                location: format!("line {line}"),
                message: format!("unknown model key {k:?}"),
            });
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
