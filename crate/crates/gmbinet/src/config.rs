//! Run configuration: defaults, named profiles, `key=value` or JSON files and
//! flag overrides, all through one typed `set`.

use std::fs;
use std::path::{Path, PathBuf};

use gmbinet_core::gmbi::{ExtractionMode, GmbiConfig, Interaction};
use gmbinet_core::loss::LossWeights;
use gmbinet_core::network::{NetConfig, Skip};
use gmbinet_core::train::{Adam, Schedule, SideLoss, StepConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    /// Dataset root with `images/` and `masks/`; ignored when `synthetic > 0`.
    pub data: Option<PathBuf>,
    pub train_split: Option<String>,
    pub val_split: Option<String>,
    /// Number of generated training samples; 0 means use `data`.
    pub synthetic: usize,
    /// Held-out generated samples for evaluation during synthetic runs.
    pub synthetic_val: usize,
    pub noise: f64,
    pub size: usize,
    pub batch: usize,
    pub iters: u64,
    pub lr: f64,
    pub lr_floor: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub ckpt_every: u64,
    pub augment: bool,
    /// Deep-supervision weights, one per side output; empty means all 1.
    pub alphas: Vec<f64>,
    pub side_loss: String,
    pub threshold: f64,
    pub scale_dim: usize,
    pub kernel: usize,
    pub interaction: String,
    pub forward_guidance: bool,
    pub backward_enhancement: bool,
    pub mode: String,
    pub skip: String,
    pub width: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        RunConfig {
            profile: "default".into(),
            data: None,
            train_split: None,
            val_split: None,
            synthetic: 0,
            synthetic_val: 4,
            noise: 0.05,
            size: net.input_hw.0,
            batch: 32,
            iters: 50_000,
            lr: 4e-3,
            lr_floor: 0.0,
            seed: 0,
            eval_every: 1000,
            ckpt_every: 1000,
            augment: true,
            alphas: Vec::new(),
            side_loss: "upsample".into(),
            threshold: 0.5,
            scale_dim: net.block.scale_dim,
            kernel: net.block.kernel,
            interaction: net.block.interaction.name().into(),
            forward_guidance: true,
            backward_enhancement: true,
            mode: net.block.mode.name().into(),
            skip: net.skip.name().into(),
            width: 1.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "profile",
    "data",
    "train_split",
    "val_split",
    "synthetic",
    "synthetic_val",
    "noise",
    "size",
    "batch",
    "iters",
    "lr",
    "lr_floor",
    "seed",
    "eval_every",
    "ckpt_every",
    "augment",
    "alphas",
    "side_loss",
    "threshold",
    "scale_dim",
    "kernel",
    "interaction",
    "forward_guidance",
    "backward_enhancement",
    "mode",
    "skip",
    "width",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::InvalidValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidValue { key: key.into(), value: value.into(), reason: "expected true or false".into() }),
    }
}

fn optional(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty() && v != "none" && v != "null").then(|| v.to_string())
}

impl RunConfig {
    /// Small, CPU-friendly settings: 64x64 inputs, batch 4, no augmentation,
    /// side losses against downsampled labels. At this size the finest side
    /// map is 32x32 and most defect pixels lie on a boundary.
    pub fn desk() -> Self {
        RunConfig { profile: "desk".into(), size: 64, batch: 4, augment: false, side_loss: "downsample".into(), ..Self::default() }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::InvalidValue { key: "profile".into(), value: name.into(), reason: "expected default or desk".into() }),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "profile" => {
                Self::profile(value.trim())?;
                self.profile = value.trim().into();
            }
            "data" => self.data = optional(value).map(PathBuf::from),
            "train_split" => self.train_split = optional(value),
            "val_split" => self.val_split = optional(value),
            "synthetic" => self.synthetic = parse(key, value)?,
            "synthetic_val" => self.synthetic_val = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "size" => self.size = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_floor" => self.lr_floor = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "ckpt_every" => self.ckpt_every = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "alphas" => {
                self.alphas = value
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "side_loss" => self.side_loss = value.trim().into(),
            "threshold" => self.threshold = parse(key, value)?,
            "scale_dim" => self.scale_dim = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "interaction" => self.interaction = value.trim().into(),
            "forward_guidance" => self.forward_guidance = parse_bool(key, value)?,
            "backward_enhancement" => self.backward_enhancement = parse_bool(key, value)?,
            "mode" => self.mode = value.trim().into(),
            "skip" => self.skip = value.trim().into(),
            "width" => self.width = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies entries in order, except that a `profile` entry first resets
    /// everything to that profile's values.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some((_, p)) = entries.iter().rev().find(|(k, _)| k == "profile") {
            cfg = Self::profile(p.trim())?;
        }
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, value: String, reason: &str| Err(Error::InvalidValue { key: key.into(), value, reason: reason.into() });
        if self.batch == 0 {
            return bad("batch", "0".into(), "must be at least 1");
        }
        if self.iters == 0 {
            return bad("iters", "0".into(), "must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr", self.lr.to_string(), "must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise", self.noise.to_string(), "must lie in [0, 1]");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", self.threshold.to_string(), "must lie in (0, 1)");
        }
        self.schedule().validate()?;
        self.side_loss_kind()?;
        let net = self.net()?;
        gmbinet_core::network::build_gmbinet(&net)?;
        let m = net.size_multiple();
        if self.size == 0 || self.size % m != 0 {
            return bad("size", self.size.to_string(), &format!("must be a positive multiple of {m}"));
        }
        if !self.alphas.is_empty() && self.alphas.len() != net.stages() {
            return bad("alphas", format!("{:?}", self.alphas), &format!("need {} weights", net.stages()));
        }
        Ok(())
    }

    pub fn net(&self) -> Result<NetConfig> {
        let invalid = |key: &str, value: &str, options: &str| Error::InvalidValue { key: key.into(), value: value.into(), reason: format!("expected one of {options}") };
        let mut block = GmbiConfig::new(16).scale_dim(self.scale_dim).kernel(self.kernel);
        block = block
            .interaction(Interaction::parse(&self.interaction).ok_or_else(|| invalid("interaction", &self.interaction, "ewms, sum, mul, concat, none"))?)
            .directions(self.forward_guidance, self.backward_enhancement)
            .mode(ExtractionMode::parse(&self.mode).ok_or_else(|| invalid("mode", &self.mode, "group, branch, single"))?);
        let mut net = NetConfig::default().block(block).skip(Skip::parse(&self.skip).ok_or_else(|| invalid("skip", &self.skip, "sum, concat, none"))?);
        net.width_multiplier = self.width;
        net.input_hw = (self.size, self.size);
        Ok(net)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { base: self.lr, floor: self.lr_floor, iterations: self.iters }
    }

    pub fn side_loss_kind(&self) -> Result<SideLoss> {
        match self.side_loss.as_str() {
            "upsample" => Ok(SideLoss::UpsampleSides),
            "downsample" => Ok(SideLoss::DownsampleLabels),
            v => Err(Error::InvalidValue { key: "side_loss".into(), value: v.into(), reason: "expected upsample or downsample".into() }),
        }
    }

    pub fn step_config(&self) -> Result<StepConfig> {
        let stages = self.net()?.stages();
        let weights = if self.alphas.is_empty() { LossWeights::uniform(stages) } else { LossWeights::new(self.alphas.clone())? };
        Ok(StepConfig { schedule: self.schedule(), adam: Adam::default(), weights, side_loss: self.side_loss_kind()? })
    }

    /// Entries of this configuration, in key order, as text.
    pub fn entries(&self) -> Vec<(String, String)> {
        let json = serde_json::to_value(self).expect("config serializes");
        KEYS.iter().map(|&k| (k.to_string(), json_to_text(&json[k]))).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn json_to_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => "none".into(),
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(items) => items.iter().map(json_to_text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Entries of a config file: a JSON object, or `key = value` lines with `#` comments.
pub fn read_entries(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_entries(&text)
}

pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    if text.trim_start().starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text)?;
        return Ok(map.into_iter().map(|(k, v)| (k, json_to_text(&v))).collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::usage(format!("config line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn entries_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.alphas = vec![1.0, 0.5, 0.5, 0.25, 0.25];
        cfg.data = Some("d".into());
        let back = RunConfig::from_entries(&cfg.entries()).unwrap();
        assert_eq!(back, cfg);
        let json = parse_entries(&cfg.to_json()).unwrap();
        assert_eq!(RunConfig::from_entries(&json).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_and_bad_values() {
        let e = RunConfig::from_entries(&[("bogus".into(), "1".into())]).unwrap_err();
        assert!(matches!(e, Error::UnknownKey(ref k) if k == "bogus"));
        assert_eq!(e.exit_code(), 2);
        assert!(RunConfig::from_entries(&[("size".into(), "65".into())]).is_err());
        assert!(RunConfig::from_entries(&[("interaction".into(), "xor".into())]).is_err());
        assert!(RunConfig::from_entries(&[("scale_dim".into(), "3".into())]).is_err());
    }

    #[test]
    fn later_entries_win_and_profile_is_a_base() {
        let e = parse_entries("size = 128\nprofile = desk\n# c\nbatch=2").unwrap();
        let cfg = RunConfig::from_entries(&e).unwrap();
        assert_eq!((cfg.size, cfg.batch, cfg.augment), (128, 2, false));
    }
}
