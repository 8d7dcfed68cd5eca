//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gating::BinarizationMode;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub seed: u64,
    pub clean_dir: Option<PathBuf>,
    pub noisy_dir: Option<PathBuf>,
    /// Synthetic corpus used when no directories are given.
    pub synthetic_pairs: usize,
    pub synthetic_seconds: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            seed: 0,
            clean_dir: None,
            noisy_dir: None,
            synthetic_pairs: 200,
            synthetic_seconds: 4.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// Applies one model key; returns `false` when `key` is not a model key.
pub(crate) fn apply_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "c_res" => cfg.c_res = parse(key, value)?,
        "c_conv" => cfg.c_conv = parse(key, value)?,
        "c_gate" => cfg.c_gate = parse(key, value)?,
        "kernel_size" => cfg.kernel_size = parse(key, value)?,
        "blocks_per_stack" => cfg.blocks_per_stack = parse(key, value)?,
        "stacks" => cfg.stacks = parse(key, value)?,
        "freq_bins" => cfg.freq_bins = parse(key, value)?,
        "causal" => cfg.causal = parse_bool(key, value)?,
        "gating" => cfg.gating_enabled = parse_bool(key, value)?,
        "pool_frames" => {
            cfg.pool_frames = match value {
                "auto" | "rf" => None,
                v => Some(parse(key, v)?),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

pub(crate) fn model_entries(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("c_res", cfg.c_res.to_string()),
        ("c_conv", cfg.c_conv.to_string()),
        ("c_gate", cfg.c_gate.to_string()),
        ("kernel_size", cfg.kernel_size.to_string()),
        ("blocks_per_stack", cfg.blocks_per_stack.to_string()),
        ("stacks", cfg.stacks.to_string()),
        ("freq_bins", cfg.freq_bins.to_string()),
        ("causal", cfg.causal.to_string()),
        ("gating", cfg.gating_enabled.to_string()),
        ("pool_frames", cfg.pool_frames.map_or("auto".into(), |v| v.to_string())),
    ]
}

/// Splits text into ordered `(key, value)` pairs; rejects duplicates.
pub(crate) fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), n + 1).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn binarization_name(mode: BinarizationMode) -> (&'static str, Option<f64>) {
    match mode {
        BinarizationMode::Heaviside => ("heaviside", None),
        BinarizationMode::SigmoidSurrogate { tau } => ("sigmoid", Some(tau)),
        BinarizationMode::SuperSpike { nu } => ("superspike", Some(nu)),
        BinarizationMode::BinaryConcrete { lambda } => ("concrete", Some(lambda)),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut binarization: Option<String> = None;
        let mut temperature: Option<f64> = None;
        for (k, v) in parse_pairs(text)? {
            let key = k.as_str();
            let value = v.as_str();
            if apply_model_key(&mut cfg.train.model, key, value)? {
                continue;
            }
            let t = &mut cfg.train;
            match key {
                "alpha" => t.loss.alpha = parse(key, value)?,
                "compression" => t.loss.compression = parse(key, value)?,
                "target_ratio" => t.loss.target_ratio = parse(key, value)?,
                "lambda_dcp" => t.loss.lambda_dcp = parse(key, value)?,
                "learning_rate" => t.optim.learning_rate = parse(key, value)?,
                "weight_decay" => t.optim.weight_decay = parse(key, value)?,
                "batch_size" => t.optim.batch_size = parse(key, value)?,
                "beta1" => t.optim.beta1 = parse(key, value)?,
                "beta2" => t.optim.beta2 = parse(key, value)?,
                "epsilon" => t.optim.epsilon = parse(key, value)?,
                "max_epochs" => t.optim.max_epochs = parse(key, value)?,
                "patience" => t.optim.patience = parse(key, value)?,
                "lr_decay" => t.optim.lr_decay = parse(key, value)?,
                "lr_patience" => t.optim.lr_patience = parse(key, value)?,
                "validation_every" => t.optim.validation_every = parse(key, value)?,
                "window_length" => t.stft.window_length = parse(key, value)?,
                "hop" => t.stft.hop = parse(key, value)?,
                "segment_seconds" => t.segment_seconds = parse(key, value)?,
                "validation_fraction" => t.validation_fraction = parse(key, value)?,
                "binarization" => binarization = Some(value.to_string()),
                "temperature" => temperature = Some(parse(key, value)?),
                "seed" => cfg.seed = parse(key, value)?,
                "clean_dir" => cfg.clean_dir = Some(PathBuf::from(value)),
                "noisy_dir" => cfg.noisy_dir = Some(PathBuf::from(value)),
                "synthetic_pairs" => cfg.synthetic_pairs = parse(key, value)?,
                "synthetic_seconds" => cfg.synthetic_seconds = parse(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        let name = binarization.unwrap_or_else(|| binarization_name(cfg.train.binarization).0.to_string());
        cfg.train.binarization = match name.as_str() {
            "heaviside" => BinarizationMode::Heaviside,
            "sigmoid" => BinarizationMode::SigmoidSurrogate { tau: temperature.unwrap_or(1.0) },
            "superspike" => BinarizationMode::SuperSpike { nu: temperature.unwrap_or(1.0) },
            "concrete" => BinarizationMode::BinaryConcrete {
                lambda: temperature.unwrap_or(2.0 / 3.0),
            },
            other => return Err(Error::Config(format!("unknown binarization {other:?}"))),
        };
        if cfg.train.model.freq_bins != cfg.train.stft.bins() {
            return Err(Error::Config(format!(
                "freq_bins {} does not match window_length {}",
                cfg.train.model.freq_bins, cfg.train.stft.window_length
            )));
        }
        cfg.train.validate()?;
        if cfg.clean_dir.is_some() != cfg.noisy_dir.is_some() {
            return Err(Error::Config("clean_dir and noisy_dir must be given together".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut lines: Vec<(&str, String)> = model_entries(&t.model);
        let (bname, temp) = binarization_name(t.binarization);
        lines.extend([
            ("alpha", t.loss.alpha.to_string()),
            ("compression", t.loss.compression.to_string()),
            ("target_ratio", t.loss.target_ratio.to_string()),
            ("lambda_dcp", t.loss.lambda_dcp.to_string()),
            ("learning_rate", t.optim.learning_rate.to_string()),
            ("weight_decay", t.optim.weight_decay.to_string()),
            ("batch_size", t.optim.batch_size.to_string()),
            ("beta1", t.optim.beta1.to_string()),
            ("beta2", t.optim.beta2.to_string()),
            ("epsilon", t.optim.epsilon.to_string()),
            ("max_epochs", t.optim.max_epochs.to_string()),
            ("patience", t.optim.patience.to_string()),
            ("lr_decay", t.optim.lr_decay.to_string()),
            ("lr_patience", t.optim.lr_patience.to_string()),
            ("validation_every", t.optim.validation_every.to_string()),
            ("window_length", t.stft.window_length.to_string()),
            ("hop", t.stft.hop.to_string()),
            ("segment_seconds", t.segment_seconds.to_string()),
            ("validation_fraction", t.validation_fraction.to_string()),
            ("binarization", bname.to_string()),
            ("seed", self.seed.to_string()),
            ("synthetic_pairs", self.synthetic_pairs.to_string()),
            ("synthetic_seconds", self.synthetic_seconds.to_string()),
        ]);
        if let Some(v) = temp {
            lines.push(("temperature", v.to_string()));
        }
        if let (Some(c), Some(n)) = (&self.clean_dir, &self.noisy_dir) {
            lines.push(("clean_dir", c.display().to_string()));
            lines.push(("noisy_dir", n.display().to_string()));
        }
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
