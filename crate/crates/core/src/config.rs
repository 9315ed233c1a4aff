//! Flat `key = value` training configuration files.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are field paths
//! of [`TrainConfig`]; missing keys keep their defaults.

use std::path::Path;

use crate::error::{HcaError, Result};
use crate::mlka::{LkaScaleSpec, MlkaConfig};
use crate::trainer::TrainConfig;

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "checkpoint_every",
    "seed",
    "heatmap_sigma",
    "model.stacks",
    "model.channels",
    "model.hourglass_depth",
    "model.num_discs",
    "model.input_size",
    "model.mlka.scales",
    "model.seed",
    "loss.lambda_sk",
    "loss.beta",
    "loss.alpha",
    "loss.samples",
    "loss.prototype_mode",
    "loss.learnable_alpha",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HcaError::Config(format!("invalid value {value:?} for {key}")))
}

/// `HxW`, e.g. `64x64`.
fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| HcaError::Config(format!("{key} must look like 64x64, got {value:?}")))?;
    Ok((parse(key, h.trim())?, parse(key, w.trim())?))
}

/// `kernel:dilation` pairs separated by commas, e.g. `9:3,15:3,21:3`.
fn parse_scales(key: &str, value: &str) -> Result<Vec<LkaScaleSpec>> {
    value
        .split(',')
        .map(|pair| {
            let (k, d) = pair.trim().split_once(':').ok_or_else(|| {
                HcaError::Config(format!("{key} entries must look like 9:3, got {pair:?}"))
            })?;
            LkaScaleSpec::new(parse(key, k.trim())?, parse(key, d.trim())?)
        })
        .collect()
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut scales = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| HcaError::Config(format!("line {}: expected key = value", n + 1)))?;
        match key {
            "epochs" => cfg.epochs = parse(key, value)?,
            "batch_size" => cfg.batch_size = parse(key, value)?,
            "learning_rate" => cfg.learning_rate = parse(key, value)?,
            "optimizer" => cfg.optimizer = value.parse()?,
            "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
            "seed" => cfg.seed = parse(key, value)?,
            "heatmap_sigma" => cfg.heatmap_sigma = parse(key, value)?,
            "model.stacks" => cfg.model.stacks = parse(key, value)?,
            "model.channels" => cfg.model.channels = parse(key, value)?,
            "model.hourglass_depth" => cfg.model.hourglass_depth = parse(key, value)?,
            "model.num_discs" => cfg.model.num_discs = parse(key, value)?,
            "model.input_size" => cfg.model.input_size = parse_size(key, value)?,
            "model.mlka.scales" => scales = Some(parse_scales(key, value)?),
            "model.seed" => cfg.model.seed = parse(key, value)?,
            "loss.lambda_sk" => cfg.loss.lambda_sk = parse(key, value)?,
            "loss.beta" => cfg.loss.beta = parse(key, value)?,
            "loss.alpha" => cfg.loss.alpha = parse(key, value)?,
            "loss.samples" => cfg.loss.samples = parse(key, value)?,
            "loss.prototype_mode" => cfg.loss.prototype_mode = value.parse()?,
            "loss.learnable_alpha" => cfg.loss.learnable_alpha = parse(key, value)?,
            other => {
                return Err(HcaError::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
    }
    cfg.model.mlka = MlkaConfig {
        channels: cfg.model.channels,
        scales: scales.unwrap_or_else(MlkaConfig::default_scales),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HcaError::io(path, e))?;
    parse_config(&text)
}

/// Serialises `cfg` in the same format; `parse_config` inverts it.
pub fn render_config(cfg: &TrainConfig) -> String {
    let scales: Vec<String> = cfg
        .model
        .mlka
        .scales
        .iter()
        .map(|s| format!("{}:{}", s.kernel(), s.dilation()))
        .collect();
    let m = &cfg.model;
    let l = &cfg.loss;
    let rows = [
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("learning_rate", cfg.learning_rate.to_string()),
        ("optimizer", "rmsprop".to_string()),
        ("checkpoint_every", cfg.checkpoint_every.to_string()),
        ("seed", cfg.seed.to_string()),
        ("heatmap_sigma", cfg.heatmap_sigma.to_string()),
        ("model.stacks", m.stacks.to_string()),
        ("model.channels", m.channels.to_string()),
        ("model.hourglass_depth", m.hourglass_depth.to_string()),
        ("model.num_discs", m.num_discs.to_string()),
        ("model.input_size", format!("{}x{}", m.input_size.0, m.input_size.1)),
        ("model.mlka.scales", scales.join(",")),
        ("model.seed", m.seed.to_string()),
        ("loss.lambda_sk", l.lambda_sk.to_string()),
        ("loss.beta", l.beta.to_string()),
        ("loss.alpha", l.alpha.to_string()),
        ("loss.samples", l.samples.to_string()),
        ("loss.prototype_mode", l.prototype_mode.to_string()),
        ("loss.learnable_alpha", l.learnable_alpha.to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
