//! Flat `key=value` run configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; lists are comma separated (`train.crop=32,96,96`).

use std::fmt::Display;
use std::str::FromStr;

use crate::adapter::{ConvMode, ScanMode, TpMambaConfig};
use crate::encoder::ViTConfig;
use crate::error::{config_err, Error, Result};
use crate::infer::WindowConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: bool,
    pub flip: bool,
    pub contrast: bool,
    pub spacing_jitter: bool,
}

impl AugmentConfig {
    pub const NONE: Self = Self { crop: false, flip: false, contrast: false, spacing_jitter: false };
    pub const ALL: Self = Self { crop: true, flip: true, contrast: true, spacing_jitter: true };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `(D, H, W)` training crop; H must equal W.
    pub crop: [usize; 3],
    pub seed: u64,
    pub classes: usize,
    pub model: ViTConfig,
    pub augment: AugmentConfig,
    pub window: WindowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr_start: 2e-4,
            lr_end: 0.0,
            weight_decay: 1e-2,
            batch_size: 1,
            crop: [96, 96, 96],
            seed: 0,
            classes: 2,
            model: ViTConfig::toy(96),
            augment: AugmentConfig::ALL,
            window: WindowConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|p| parse(key, p)).collect()
}

fn parse3(key: &str, v: &str) -> Result<[usize; 3]> {
    let l: Vec<usize> = parse_list(key, v)?;
    <[usize; 3]>::try_from(l).map_err(|_| Error::Config(format!("{key}: expected three comma-separated values, got {v:?}")))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Overrides one field. `model.img_size` is not a key: it follows the crop.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let a = &mut m.adapter;
        match key {
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.lr_start" => self.lr_start = parse(key, v)?,
            "train.lr_end" => self.lr_end = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.crop" => self.crop = parse3(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.classes" => self.classes = parse(key, v)?,
            "augment.crop" => self.augment.crop = parse(key, v)?,
            "augment.flip" => self.augment.flip = parse(key, v)?,
            "augment.contrast" => self.augment.contrast = parse(key, v)?,
            "augment.spacing_jitter" => self.augment.spacing_jitter = parse(key, v)?,
            "infer.window" => self.window.window = parse3(key, v)?,
            "infer.overlap" => self.window.overlap = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.n_blocks" => m.n_blocks = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.lora_rank" => m.lora_rank = parse(key, v)?,
            "model.lora_alpha" => m.lora_alpha = parse(key, v)?,
            "adapter.rank" => a.rank = parse(key, v)?,
            "adapter.dilations" => a.dilations = parse_list(key, v)?,
            "adapter.depth_kernel" => a.depth_kernel = parse(key, v)?,
            "adapter.scan_mode" => a.scan_mode = parse(key, v)?,
            "adapter.conv_mode" => a.conv_mode = parse(key, v)?,
            "adapter.d_state" => a.d_state = parse(key, v)?,
            "adapter.expand" => a.expand = parse(key, v)?,
            "adapter.d_conv" => a.d_conv = parse(key, v)?,
            _ => return config_err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let a = &m.adapter;
        let pairs: Vec<(&str, String)> = vec![
            ("train.epochs", self.epochs.to_string()),
            ("train.lr_start", self.lr_start.to_string()),
            ("train.lr_end", self.lr_end.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.crop", join(&self.crop)),
            ("train.seed", self.seed.to_string()),
            ("train.classes", self.classes.to_string()),
            ("augment.crop", self.augment.crop.to_string()),
            ("augment.flip", self.augment.flip.to_string()),
            ("augment.contrast", self.augment.contrast.to_string()),
            ("augment.spacing_jitter", self.augment.spacing_jitter.to_string()),
            ("infer.window", join(&self.window.window)),
            ("infer.overlap", self.window.overlap.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.n_blocks", m.n_blocks.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.lora_rank", m.lora_rank.to_string()),
            ("model.lora_alpha", m.lora_alpha.to_string()),
            ("adapter.rank", a.rank.to_string()),
            ("adapter.dilations", join(&a.dilations)),
            ("adapter.depth_kernel", a.depth_kernel.to_string()),
            ("adapter.scan_mode", a.scan_mode.to_string()),
            ("adapter.conv_mode", a.conv_mode.to_string()),
            ("adapter.d_state", a.d_state.to_string()),
            ("adapter.expand", a.expand.to_string()),
            ("adapter.d_conv", a.d_conv.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.finish()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            pairs.push((k.trim(), v));
        }
        Self::from_pairs(pairs)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Derives dependent fields and validates the whole configuration.
    pub fn finish(mut self) -> Result<Self> {
        self.model.img_size = self.crop[1];
        self.model.adapter.channels = self.model.embed_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > self.lr_end && self.lr_end >= 0.0) {
            return config_err(format!("need lr_start > lr_end >= 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if self.epochs == 0 || self.batch_size != 1 {
            return config_err("epochs must be positive and batch_size must be 1");
        }
        if self.weight_decay < 0.0 {
            return config_err("weight_decay must be non-negative");
        }
        if self.crop[1] != self.crop[2] || self.crop.contains(&0) {
            return config_err(format!("crop {:?} must be non-empty with square slices", self.crop));
        }
        if self.classes < 2 || self.classes > 255 {
            return config_err(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if self.window.window[1] != self.crop[1] || self.window.window[2] != self.crop[2] {
            return config_err(format!("inference window {:?} must match the crop's slice size {:?}", self.window.window, self.crop));
        }
        self.model.validate()
    }
}

/// Toy model configuration for an adapter of rank `r` and scan `mode`.
pub fn toy_model(img_size: usize, rank: usize, mode: ScanMode) -> ViTConfig {
    let mut m = ViTConfig::toy(img_size);
    m.adapter = TpMambaConfig { scan_mode: mode, conv_mode: ConvMode::MultiScale, ..TpMambaConfig::new(m.embed_dim, rank) };
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_unknown_key() {
        let cfg = TrainConfig::parse_text("# c\nadapter.scan_mode=hw_only\ntrain.crop=32,64,64\ninfer.window=32,64,64\n").unwrap();
        assert_eq!(cfg.model.adapter.scan_mode, ScanMode::HwOnly);
        assert_eq!(cfg.model.img_size, 64);
        let err = TrainConfig::parse_text("adapter.colour=blue").unwrap_err();
        assert!(err.to_string().contains("adapter.colour"));
        assert!(TrainConfig::parse_text("train.epochs").is_err());
        assert!(TrainConfig::parse_text("adapter.scan_mode=zigzag").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("adapter.dilations", "1,3").unwrap();
        cfg.set("adapter.rank", "22").unwrap();
        cfg.set("train.lr_start", "0.003").unwrap();
        let cfg = cfg.finish().unwrap();
        let again = TrainConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(TrainConfig::from_pairs([("train.lr_end", "0.5")]).is_err());
        assert!(TrainConfig::from_pairs([("model.n_heads", "5")]).is_err());
    }
}
