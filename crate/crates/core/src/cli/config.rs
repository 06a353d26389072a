//! Flat `key = value` configuration files and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AttentionMode, ModelConfig};
use crate::operators::GroupConfig;
use crate::trainer::TrainConfig;

/// Keys under this prefix describe a run and are ignored when a manifest is
/// read back as a config file.
pub const META_PREFIX: &str = "meta.";

/// Parsed `key = value` lines. `#` starts a comment; blank lines are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("config line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("config line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_input(path)?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::Config(format!("config file {} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get_raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("config key {key}: cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    /// Rejects keys outside `known` (meta keys excepted).
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self
            .entries
            .keys()
            .find(|k| !k.starts_with(META_PREFIX) && !known.contains(&k.as_str()))
        {
            Some(k) => Err(Error::Config(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}

/// Reads an input file. A path that does not exist is a usage error, not an
/// I/O failure.
pub(crate) fn read_input(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Config(format!("input file {} does not exist", path.display())));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Fully resolved settings of one inpainting run.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintSettings {
    pub cube: PathBuf,
    pub mask: PathBuf,
    pub reference: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const INPAINT_KEYS: &[&str] = &[
    "cube",
    "mask",
    "reference",
    "out_dir",
    "alpha",
    "lr",
    "iterations",
    "seed",
    "model_seed",
    "group_size",
    "log_every",
    "data_consistency",
    "base_channels",
    "depth",
    "attention_rank",
    "attention_mode",
];

/// Values given on the command line; `None` falls through to the config file.
#[derive(Debug, Clone, Default)]
pub struct InpaintOverrides {
    pub cube: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub lr: Option<f64>,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub model_seed: Option<u64>,
    pub group_size: Option<usize>,
    pub log_every: Option<usize>,
    pub data_consistency: Option<bool>,
    pub base_channels: Option<usize>,
    pub depth: Option<usize>,
    pub attention_rank: Option<usize>,
    pub attention_mode: Option<AttentionMode>,
}

impl InpaintSettings {
    /// Flags over config file over defaults. `in_bands` comes from the cube.
    pub fn resolve(flags: &InpaintOverrides, file: &KvConfig, in_bands: impl FnOnce(&Path) -> Result<usize>) -> Result<Self> {
        file.check_keys(INPAINT_KEYS)?;
        macro_rules! pick {
            ($field:ident) => {
                match flags.$field.clone() {
                    Some(v) => Some(v),
                    None => file.get(stringify!($field))?,
                }
            };
        }
        let required = |v: Option<PathBuf>, key: &str| {
            v.ok_or_else(|| Error::Config(format!("missing required setting {key} (flag or config key)")))
        };
        let cube: PathBuf = required(pick!(cube), "cube")?;
        let mask: PathBuf = required(pick!(mask), "mask")?;
        let out_dir: PathBuf = required(pick!(out_dir), "out_dir")?;
        let reference: Option<PathBuf> = pick!(reference);

        let dt = TrainConfig::default();
        let seed: u64 = pick!(seed).unwrap_or(dt.seed);
        let train = TrainConfig {
            alpha: pick!(alpha).unwrap_or(dt.alpha),
            group: GroupConfig::shift(pick!(group_size).unwrap_or(dt.group.size)),
            lr: pick!(lr).unwrap_or(dt.lr),
            iterations: pick!(iterations).unwrap_or(dt.iterations),
            seed,
            log_every: pick!(log_every).unwrap_or(dt.log_every),
            data_consistency_output: pick!(data_consistency).unwrap_or(dt.data_consistency_output),
        };
        train.validate()?;
        let dm = ModelConfig::new(in_bands(&cube)?);
        let model = ModelConfig {
            base_channels: pick!(base_channels).unwrap_or(dm.base_channels),
            depth: pick!(depth).unwrap_or(dm.depth),
            attention_rank: pick!(attention_rank).unwrap_or(dm.attention_rank),
            attention_mode: pick!(attention_mode).unwrap_or(dm.attention_mode),
            seed: pick!(model_seed).unwrap_or(seed),
            ..dm
        };
        model.validate()?;
        Ok(Self {
            cube,
            mask,
            reference,
            out_dir,
            model,
            train,
        })
    }

    /// `key = value` text covering every setting plus `meta.*` lines.
    pub fn to_manifest(&self, meta: &[(&str, String)]) -> String {
        let mut out = String::from("# hyperei run manifest; reusable with `inpaint --config`\n");
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("cube", &self.cube.display());
        kv("mask", &self.mask.display());
        if let Some(r) = &self.reference {
            kv("reference", &r.display());
        }
        kv("out_dir", &self.out_dir.display());
        kv("alpha", &self.train.alpha);
        kv("lr", &self.train.lr);
        kv("iterations", &self.train.iterations);
        kv("seed", &self.train.seed);
        kv("model_seed", &self.model.seed);
        kv("group_size", &self.train.group.size);
        kv("log_every", &self.train.log_every);
        kv("data_consistency", &self.train.data_consistency_output);
        kv("base_channels", &self.model.base_channels);
        kv("depth", &self.model.depth);
        kv("attention_rank", &self.model.attention_rank);
        kv("attention_mode", &self.model.attention_mode);
        for (k, v) in meta {
            kv(&format!("{META_PREFIX}{k}"), v);
        }
        out
    }
}
