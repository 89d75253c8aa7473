//! Flat INI-style configuration: `[section]` headers, `key = value` lines,
//! `#` comments. Human-diffable, no parser dependency. Every key is typed
//! and validated here; unknown sections or keys are errors so typos surface
//! instead of silently falling back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::SyntheticSpec;
use crate::encoder::{FeatureLayer, RnnCell};
use crate::metrics::Protocol;
use crate::trainer::{EvalConfig, ModelConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config: unknown key `{section}.{key}`")]
    UnknownKey { section: String, key: String },
    #[error("config: `{section}.{key}`: bad value `{value}`: {msg}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        msg: String,
    },
    #[error("override `{0}` must look like section.key=value")]
    BadOverride(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw parsed sections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = ConfigMap::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Parse {
                    line: i + 1,
                    msg: "unterminated section header".into(),
                })?;
                current = name.trim().to_string();
                map.sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            if current.is_empty() {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    msg: "key outside any [section]".into(),
                });
            }
            map.sections
                .get_mut(&current)
                .expect("section inserted above")
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(map)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|s| s.as_str())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    /// Applies a `section.key=value` override; the key must already be a
    /// known configuration key.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        if !known_key(section, key) {
            return Err(ConfigError::UnknownKey {
                section: section.to_string(),
                key: key.to_string(),
            });
        }
        self.set(section, key, value.trim());
        Ok(())
    }

    pub fn validate_known_keys(&self) -> Result<(), ConfigError> {
        for (section, keys) in &self.sections {
            for key in keys.keys() {
                if !known_key(section, key) {
                    return Err(ConfigError::UnknownKey {
                        section: section.clone(),
                        key: key.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

const KNOWN: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "train_identities",
            "test_identities",
            "images_per_identity",
            "height",
            "width",
            "texture_variants",
            "brightness_jitter",
            "max_shift",
            "noise_sigma",
        ],
    ),
    (
        "encoder",
        &[
            "input_h",
            "input_w",
            "scale",
            "blocks_per_stage",
            "rnn_hidden_1",
            "rnn_hidden_2",
            "rnn_cell",
        ],
    ),
    (
        "decoder",
        &["layers", "heads", "d_model", "ffn_dim", "max_len", "beam_width"],
    ),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "learning_rate",
            "decay",
            "lambda",
            "seed",
            "warm_start",
        ],
    ),
    (
        "eval",
        &["beam_width", "feature_layer", "exclude_same_camera"],
    ),
];

fn known_key(section: &str, key: &str) -> bool {
    KNOWN
        .iter()
        .any(|(s, keys)| *s == section && keys.contains(&key))
}

/// The fully resolved configuration of a run.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn bad(section: &str, key: &str, value: &str, msg: &str) -> ConfigError {
    ConfigError::BadValue {
        section: section.into(),
        key: key.into(),
        value: value.into(),
        msg: msg.into(),
    }
}

macro_rules! read_key {
    ($map:expr, $out:expr, $section:literal, $key:literal, $ty:ty) => {
        if let Some(v) = $map.get($section, $key) {
            $out = v
                .parse::<$ty>()
                .map_err(|e| bad($section, $key, v, &e.to_string()))?;
        }
    };
}

impl AppConfig {
    /// Desk defaults overridden by whatever the map provides.
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        map.validate_known_keys()?;
        let mut cfg = AppConfig::default();

        read_key!(map, cfg.data.train_identities, "data", "train_identities", usize);
        read_key!(map, cfg.data.test_identities, "data", "test_identities", usize);
        read_key!(map, cfg.data.images_per_identity, "data", "images_per_identity", usize);
        read_key!(map, cfg.data.height, "data", "height", usize);
        read_key!(map, cfg.data.width, "data", "width", usize);
        read_key!(map, cfg.data.texture_variants, "data", "texture_variants", usize);
        read_key!(map, cfg.data.brightness_jitter, "data", "brightness_jitter", i32);
        read_key!(map, cfg.data.max_shift, "data", "max_shift", i32);
        read_key!(map, cfg.data.noise_sigma, "data", "noise_sigma", f64);

        read_key!(map, cfg.model.encoder.input_h, "encoder", "input_h", usize);
        read_key!(map, cfg.model.encoder.input_w, "encoder", "input_w", usize);
        read_key!(map, cfg.model.encoder.scale, "encoder", "scale", usize);
        if let Some(v) = map.get("encoder", "blocks_per_stage") {
            let parts: Vec<&str> = v.split(',').map(|p| p.trim()).collect();
            if parts.len() != 4 {
                return Err(bad("encoder", "blocks_per_stage", v, "need 4 comma-separated counts"));
            }
            for (i, p) in parts.iter().enumerate() {
                cfg.model.encoder.blocks_per_stage[i] = p
                    .parse()
                    .map_err(|_| bad("encoder", "blocks_per_stage", v, "bad count"))?;
            }
        }
        read_key!(map, cfg.model.encoder.rnn_hidden_1, "encoder", "rnn_hidden_1", usize);
        read_key!(map, cfg.model.encoder.rnn_hidden_2, "encoder", "rnn_hidden_2", usize);
        if let Some(v) = map.get("encoder", "rnn_cell") {
            cfg.model.encoder.rnn_cell =
                RnnCell::parse(v).map_err(|e| bad("encoder", "rnn_cell", v, &e.to_string()))?;
        }

        read_key!(map, cfg.model.decoder.layers, "decoder", "layers", usize);
        read_key!(map, cfg.model.decoder.heads, "decoder", "heads", usize);
        read_key!(map, cfg.model.decoder.d_model, "decoder", "d_model", usize);
        read_key!(map, cfg.model.decoder.ffn_dim, "decoder", "ffn_dim", usize);
        read_key!(map, cfg.model.decoder.max_len, "decoder", "max_len", usize);
        read_key!(map, cfg.model.decoder.beam_width, "decoder", "beam_width", usize);

        read_key!(map, cfg.train.epochs, "train", "epochs", usize);
        read_key!(map, cfg.train.batch_size, "train", "batch_size", usize);
        read_key!(map, cfg.train.learning_rate, "train", "learning_rate", f64);
        read_key!(map, cfg.train.decay, "train", "decay", f64);
        read_key!(map, cfg.train.lambda, "train", "lambda", f64);
        read_key!(map, cfg.train.seed, "train", "seed", u64);
        if let Some(v) = map.get("train", "warm_start") {
            if !v.is_empty() {
                cfg.train.warm_start = Some(PathBuf::from(v));
            }
        }

        cfg.eval.beam_width = cfg.model.decoder.beam_width;
        read_key!(map, cfg.eval.beam_width, "eval", "beam_width", usize);
        if let Some(v) = map.get("eval", "feature_layer") {
            cfg.eval.feature_layer =
                FeatureLayer::parse(v).map_err(|e| bad("eval", "feature_layer", v, &e.to_string()))?;
        }
        if let Some(v) = map.get("eval", "exclude_same_camera") {
            cfg.eval.protocol = Protocol {
                exclude_same_camera: v
                    .parse()
                    .map_err(|_| bad("eval", "exclude_same_camera", v, "expected true/false"))?,
            };
        }

        // data seed follows the training seed
        cfg.data.seed = cfg.train.seed;
        Ok(cfg)
    }

    /// Renders the effective configuration with every key explicit, suitable
    /// for provenance records and rerunning.
    pub fn to_ini(&self) -> String {
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let t = &self.train;
        let ev = &self.eval;
        let s = &self.data;
        format!(
            "[data]\n\
             train_identities = {}\n\
             test_identities = {}\n\
             images_per_identity = {}\n\
             height = {}\n\
             width = {}\n\
             texture_variants = {}\n\
             brightness_jitter = {}\n\
             max_shift = {}\n\
             noise_sigma = {}\n\
             \n[encoder]\n\
             input_h = {}\n\
             input_w = {}\n\
             scale = {}\n\
             blocks_per_stage = {},{},{},{}\n\
             rnn_hidden_1 = {}\n\
             rnn_hidden_2 = {}\n\
             rnn_cell = {}\n\
             \n[decoder]\n\
             layers = {}\n\
             heads = {}\n\
             d_model = {}\n\
             ffn_dim = {}\n\
             max_len = {}\n\
             beam_width = {}\n\
             \n[train]\n\
             epochs = {}\n\
             batch_size = {}\n\
             learning_rate = {}\n\
             decay = {}\n\
             lambda = {}\n\
             seed = {}\n\
             warm_start = {}\n\
             \n[eval]\n\
             beam_width = {}\n\
             feature_layer = {}\n\
             exclude_same_camera = {}\n",
            s.train_identities,
            s.test_identities,
            s.images_per_identity,
            s.height,
            s.width,
            s.texture_variants,
            s.brightness_jitter,
            s.max_shift,
            s.noise_sigma,
            e.input_h,
            e.input_w,
            e.scale,
            e.blocks_per_stage[0],
            e.blocks_per_stage[1],
            e.blocks_per_stage[2],
            e.blocks_per_stage[3],
            e.rnn_hidden_1,
            e.rnn_hidden_2,
            e.rnn_cell.name(),
            d.layers,
            d.heads,
            d.d_model,
            d.ffn_dim,
            d.max_len,
            d.beam_width,
            t.epochs,
            t.batch_size,
            t.learning_rate,
            t.decay,
            t.lambda,
            t.seed,
            t.warm_start
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            ev.beam_width,
            match ev.feature_layer {
                FeatureLayer::Conv => "conv",
                FeatureLayer::Fc0 => "fc0",
            },
            ev.protocol.exclude_same_camera,
        )
    }
}
