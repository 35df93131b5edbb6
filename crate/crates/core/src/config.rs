//! `key = value` configuration files for reconstruction runs.
//!
//! Settings are layered: defaults, then a config file, then command-line
//! flags. Every layer goes through [`apply_setting`], so the file and the
//! flags accept the same keys and value syntax.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optimize::ReconstructionConfig;

/// Keys accepted by [`apply_setting`].
pub const KEYS: &[&str] = &[
    "resolution",
    "steps",
    "lr_position",
    "lr_normal",
    "lr_k",
    "lr_m",
    "lr_feature",
    "alpha0",
    "lambda_lap",
    "mc_samples",
    "anneal_fraction",
    "seed",
    "dim_corrected",
    "supervision_samples",
    "loss",
    "kernel",
    "background_sdf",
    "reset_moments_after_anneal",
];

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a key may appear only once per file.
pub fn parse_config_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut entries: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let location = format!("line {}", i + 1);
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(path, location, "expected `key = value`"));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::parse(path, location, "expected `key = value`"));
        }
        if entries.iter().any(|(k, _)| k == key) {
            return Err(Error::parse(path, location, format!("duplicate key `{key}`")));
        }
        entries.push((key.to_string(), value.to_string()));
    }
    Ok(entries)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    parse_config_text(&text, path)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidConfigValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidConfigValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

/// Overwrites one field of `cfg`. `background_sdf = auto` restores the
/// resolution-dependent default.
pub fn apply_setting(cfg: &mut ReconstructionConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "resolution" => cfg.resolution = parse_value(key, value)?,
        "steps" => cfg.steps = parse_value(key, value)?,
        "lr_position" => cfg.lr.position = parse_value(key, value)?,
        "lr_normal" => cfg.lr.normal = parse_value(key, value)?,
        "lr_k" => cfg.lr.k = parse_value(key, value)?,
        "lr_m" => cfg.lr.m = parse_value(key, value)?,
        "lr_feature" => cfg.lr.feature = parse_value(key, value)?,
        "alpha0" => cfg.filter.alpha = parse_value(key, value)?,
        "lambda_lap" => cfg.filter.lambda_lap = parse_value(key, value)?,
        "mc_samples" => cfg.filter.mc_samples = parse_value(key, value)?,
        "anneal_fraction" => cfg.filter.anneal_fraction = parse_value(key, value)?,
        "seed" => cfg.filter.seed = parse_value(key, value)?,
        "dim_corrected" => cfg.filter.dim_corrected = parse_bool(key, value)?,
        "supervision_samples" => cfg.supervision_samples = parse_value(key, value)?,
        "loss" => cfg.loss = parse_value(key, value)?,
        "kernel" => cfg.kernel = parse_value(key, value)?,
        "background_sdf" => {
            cfg.background_sdf = if value.eq_ignore_ascii_case("auto") {
                None
            } else {
                Some(parse_value(key, value)?)
            }
        }
        "reset_moments_after_anneal" => cfg.reset_moments_after_anneal = parse_bool(key, value)?,
        _ => return Err(Error::UnknownConfigKey(key.to_string())),
    }
    Ok(())
}

/// Applies `file` and then `flags` on top of `base` and validates the result.
pub fn layered_config(
    base: ReconstructionConfig,
    file: &[(String, String)],
    flags: &[(String, String)],
) -> Result<ReconstructionConfig> {
    let mut cfg = base;
    for (k, v) in file.iter().chain(flags) {
        apply_setting(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
