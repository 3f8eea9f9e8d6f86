//! Run configuration: a preset, then an optional `key = value` file, then
//! command-line overrides, each layer replacing keys set by the one before.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset = desk
//! k = 2
//! mstep.learning_rate = 0.1
//! filter.top_k.3 = 40
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use wseg_core::em::EmConfig;
use wseg_core::fusion::Combiner;
use wseg_core::losses::{LossConfig, Normalization};
use wseg_core::segmenter::OptConfig;
use wseg_core::synth::FilterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Hyperparameters sized for the 64 px synthetic benchmark.
    Desk,
    /// Reference learning rate, epochs, IoU weight and filter caps for large images.
    Reference,
}

impl FromStr for Preset {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "reference" => Ok(Preset::Reference),
            other => bail!("unknown preset `{other}` (expected desk or reference)"),
        }
    }
}

impl Preset {
    pub fn config(self) -> EmConfig {
        match self {
            Preset::Desk => EmConfig::default(),
            Preset::Reference => {
                let opt = OptConfig {
                    epochs: 30,
                    ..OptConfig::default()
                };
                EmConfig {
                    init_opt: opt,
                    mstep_opt: opt,
                    loss: LossConfig::default(),
                    filter: FilterConfig::reference(),
                    ..EmConfig::default()
                }
            }
        }
    }
}

/// Parses `key = value` lines; later duplicates win.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_kv(&text).with_context(|| format!("in config {}", path.display()))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse `{v}`: {e}"))
}

fn set_opt(opt: &mut OptConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "learning_rate" => opt.learning_rate = num(key, v)?,
        "epochs" => opt.epochs = num(key, v)?,
        "momentum" => opt.momentum = num(key, v)?,
        "weight_decay" => opt.weight_decay = num(key, v)?,
        "accumulation" => opt.accumulation = num(key, v)?,
        "lr_decay_factor" => opt.lr_decay_factor = num(key, v)?,
        "lr_decay_every" => opt.lr_decay_every = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Applies one key. Optimizer keys without an `init.`/`mstep.` prefix set both stages.
pub fn apply(cfg: &mut EmConfig, key: &str, v: &str) -> Result<()> {
    let known = match key {
        "preset" => true,
        "k" => {
            cfg.k = num(key, v)?;
            true
        }
        "eta" => {
            cfg.heuristic.eta = num(key, v)?;
            true
        }
        "seed" => {
            cfg.seed = num(key, v)?;
            true
        }
        "iou_weight" => {
            cfg.loss.iou_weight = num(key, v)?;
            true
        }
        "div_eps" => {
            cfg.loss.div_eps = num(key, v)?;
            true
        }
        "normalization" => {
            cfg.loss.normalization = match v {
                "sum" => Normalization::Sum,
                "mean" => Normalization::Mean,
                _ => bail!("{key}: expected sum or mean, got `{v}`"),
            };
            true
        }
        "combiner" => {
            cfg.fusion.combiner = v.parse::<Combiner>().map_err(|e| anyhow!("{key}: {e}"))?;
            true
        }
        "filter.min_side" => {
            cfg.filter.min_side = num(key, v)?;
            true
        }
        "filter.max_side" => {
            cfg.filter.max_side = num(key, v)?;
            true
        }
        "filter.min_attention_prob" => {
            cfg.filter.min_attention_prob = num(key, v)?;
            true
        }
        "filter.saliency_threshold" => {
            cfg.filter.saliency_threshold = num(key, v)?;
            true
        }
        "filter.top_k_per_class" => {
            cfg.filter.top_k_per_class = num(key, v)?;
            true
        }
        "filter.fg_ratio_min" => {
            cfg.filter.fg_ratio_min = num(key, v)?;
            true
        }
        "filter.m_step_top_n" => {
            cfg.filter.m_step_top_n = num(key, v)?;
            true
        }
        _ => {
            if let Some(class) = key.strip_prefix("filter.top_k.") {
                let class = num(key, class)?;
                cfg.filter.top_k_overrides.insert(class, num(key, v)?);
                true
            } else if let Some(field) = key.strip_prefix("init.") {
                set_opt(&mut cfg.init_opt, field, key, v)?
            } else if let Some(field) = key.strip_prefix("mstep.") {
                set_opt(&mut cfg.mstep_opt, field, key, v)?
            } else {
                let a = set_opt(&mut cfg.init_opt, key, key, v)?;
                a && set_opt(&mut cfg.mstep_opt, key, key, v)?
            }
        }
    };
    if !known {
        bail!("unknown config key `{key}`");
    }
    Ok(())
}

/// Layers: preset (flag, else file, else desk) < file keys < `overrides`.
pub fn resolve(
    preset_flag: Option<Preset>,
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<EmConfig> {
    let file_kv = match file {
        Some(p) => read_kv_file(p)?,
        None => Vec::new(),
    };
    let file_preset = file_kv
        .iter()
        .rev()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| v.parse::<Preset>())
        .transpose()?;
    let mut cfg = preset_flag.or(file_preset).unwrap_or(Preset::Desk).config();
    for (k, v) in file_kv.iter().chain(overrides) {
        apply(&mut cfg, k, v)?;
    }
    cfg.validate().map_err(|e| anyhow!("invalid configuration: {e}"))?;
    Ok(cfg)
}
