//! Flat `key = value` config files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use aseg_core::phantom::PhantomConfig;
use aseg_core::train::TrainConfig;

use crate::CliError;

/// Parses `key = value` lines. `#` starts a comment; later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = vec![];
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(CliError::usage(format!("config line {}: empty key", n + 1)));
        }
        out.retain(|(old, _)| *old != k);
        out.push((k, v));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_kv(&text)
}

/// `--set key=value` arguments.
pub fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>, CliError> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {s:?}")))
        })
        .collect()
}

/// Keys of `aseg gen` config files.
pub const GEN_KEYS: [&str; 8] =
    ["n", "height", "width", "num_classes", "contrast", "noise_std", "symmetric_pair", "seed"];

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n: usize,
    pub phantom: PhantomConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n: 200, phantom: PhantomConfig::default() }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::usage(format!("bad value {v:?} for key {key}")))
}

fn flag(key: &str, v: &str) -> Result<bool, CliError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::usage(format!("bad value {v:?} for key {key}: expected true or false"))),
    }
}

impl GenConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let p = &mut self.phantom;
        match key {
            "n" => self.n = num(key, v)?,
            "height" => p.height = num(key, v)?,
            "width" => p.width = num(key, v)?,
            "num_classes" => p.num_classes = num(key, v)?,
            "contrast" => p.contrast = num(key, v)?,
            "noise_std" => p.noise_std = num(key, v)?,
            "symmetric_pair" => p.symmetric_pair = flag(key, v)?,
            "seed" => p.seed = num(key, v)?,
            _ => {
                return Err(CliError::usage(format!(
                    "unknown config key {key:?} (valid keys: {})",
                    GEN_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let p = &self.phantom;
        [
            ("n", self.n.to_string()),
            ("height", p.height.to_string()),
            ("width", p.width.to_string()),
            ("num_classes", p.num_classes.to_string()),
            ("contrast", p.contrast.to_string()),
            ("noise_std", p.noise_std.to_string()),
            ("symmetric_pair", p.symmetric_pair.to_string()),
            ("seed", p.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Training config plus the split fraction used to carve the held-out set.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), train_frac: 0.8 }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        if key == "train_frac" {
            self.train_frac = num(key, v)?;
            return Ok(());
        }
        self.train.set(key, v).map_err(CliError::from)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m: BTreeMap<String, String> =
            self.train.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        m.insert("train_frac".into(), self.train_frac.to_string());
        m
    }
}

/// Applies a config file then `--set` overrides through `set`.
pub fn resolve<C>(
    mut cfg: C,
    file: Option<&Path>,
    sets: &[String],
    mut set: impl FnMut(&mut C, &str, &str) -> Result<(), CliError>,
) -> Result<C, CliError> {
    let mut pairs = match file {
        Some(p) => read_kv(p)?,
        None => vec![],
    };
    pairs.extend(parse_sets(sets)?);
    for (k, v) in pairs {
        set(&mut cfg, &k, &v)?;
    }
    Ok(cfg)
}
