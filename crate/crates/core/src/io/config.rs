//! Plain-text `key = value` run configuration with `[model]`, `[train]`,
//! `[adapt]`, and `[eval]` sections. Every key has a default; unknown keys
//! are rejected; the effective merged config is echoed into run outputs.

use crate::error::{DrnError, Result};
use crate::eval::{ChannelMode, EvalProtocol};
use crate::model::{DrnConfig, Preset};
use crate::train::{AdaptConfig, DualScales, LossConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [model]
    pub preset: Preset,
    pub scale: usize,
    pub blocks: Option<usize>,
    pub channels: Option<usize>,
    pub reduction: usize,
    pub slope: f64,
    // [train]
    pub train_iterations: u64,
    pub batch: usize,
    pub patch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: Option<u64>,
    pub augment: bool,
    pub lambda: f64,
    pub dual_scales: DualScales,
    pub two_phase: bool,
    pub val_every: u64,
    pub checkpoint_every: u64,
    // [adapt]
    pub adapt_iterations: u64,
    pub unpaired_batch: usize,
    pub paired_batch: usize,
    pub adapt_lr: f64,
    pub pretrained: Option<String>,
    pub scratch: bool,
    // [eval]
    pub channel: ChannelMode,
    /// `None` means "auto": shave = model scale.
    pub shave: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::T,
            scale: 2,
            blocks: None,
            channels: None,
            reduction: 16,
            slope: 0.2,
            train_iterations: 2000,
            batch: 8,
            patch: 24,
            lr_start: 1e-4,
            lr_end: 1e-7,
            seed: None,
            augment: true,
            lambda: 0.1,
            dual_scales: DualScales::All,
            two_phase: false,
            val_every: 100,
            checkpoint_every: 0,
            adapt_iterations: 1000,
            unpaired_batch: 5,
            paired_batch: 11,
            adapt_lr: 1e-4,
            pretrained: None,
            scratch: false,
            channel: ChannelMode::Y,
            shave: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        DrnError::Config(format!("[{section}] {key}: cannot parse {value:?}"))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(DrnError::Config(format!(
            "[{section}] {key}: cannot parse {value:?} as bool"
        ))),
    }
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "model" | "train" | "adapt" | "eval") {
                    return Err(DrnError::Config(format!(
                        "line {}: unknown section [{section}]",
                        lineno + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DrnError::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            self.set(&section, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key; `section` may be empty when the key is written as
    /// `section.key` (the CLI override form).
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let (section, key) = if section.is_empty() {
            key.split_once('.').ok_or_else(|| {
                DrnError::Config(format!("override {key:?} must be written section.key"))
            })?
        } else {
            (section, key)
        };
        match (section, key) {
            ("model", "preset") => self.preset = value.parse()?,
            ("model", "scale") => self.scale = parse_num(section, key, value)?,
            ("model", "blocks") => self.blocks = Some(parse_num(section, key, value)?),
            ("model", "channels") => self.channels = Some(parse_num(section, key, value)?),
            ("model", "reduction") => self.reduction = parse_num(section, key, value)?,
            ("model", "slope") => self.slope = parse_num(section, key, value)?,
            ("train", "iterations") => self.train_iterations = parse_num(section, key, value)?,
            ("train", "batch") => self.batch = parse_num(section, key, value)?,
            ("train", "patch") => self.patch = parse_num(section, key, value)?,
            ("train", "lr_start") => self.lr_start = parse_num(section, key, value)?,
            ("train", "lr_end") => self.lr_end = parse_num(section, key, value)?,
            ("train", "seed") => self.seed = Some(parse_num(section, key, value)?),
            ("train", "augment") => self.augment = parse_bool(section, key, value)?,
            ("train", "lambda") => self.lambda = parse_num(section, key, value)?,
            ("train", "dual_scales") => self.dual_scales = value.parse()?,
            ("train", "two_phase") => self.two_phase = parse_bool(section, key, value)?,
            ("train", "val_every") => self.val_every = parse_num(section, key, value)?,
            ("train", "checkpoint_every") => {
                self.checkpoint_every = parse_num(section, key, value)?
            }
            ("adapt", "iterations") => self.adapt_iterations = parse_num(section, key, value)?,
            ("adapt", "unpaired_batch") => self.unpaired_batch = parse_num(section, key, value)?,
            ("adapt", "paired_batch") => self.paired_batch = parse_num(section, key, value)?,
            ("adapt", "lr") => self.adapt_lr = parse_num(section, key, value)?,
            ("adapt", "pretrained") => {
                self.pretrained = if value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            ("adapt", "scratch") => self.scratch = parse_bool(section, key, value)?,
            ("eval", "channel") => self.channel = value.parse()?,
            ("eval", "shave") => {
                self.shave = if value == "auto" {
                    None
                } else {
                    Some(parse_num(section, key, value)?)
                }
            }
            _ => {
                return Err(DrnError::Config(format!(
                    "unknown config key [{section}] {key}"
                )))
            }
        }
        Ok(())
    }

    /// Seed resolution: explicit config/flag, then the `DRN_SEED` env var,
    /// then 0.
    pub fn resolve_seed(&self) -> u64 {
        if let Some(seed) = self.seed {
            return seed;
        }
        std::env::var("DRN_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    }

    pub fn model_config(&self) -> Result<DrnConfig> {
        let mut cfg = DrnConfig::preset(self.preset, self.scale)?;
        if let Some(blocks) = self.blocks {
            cfg.blocks = blocks;
        }
        if let Some(channels) = self.channels {
            cfg.channels = channels;
        }
        cfg.reduction = self.reduction;
        cfg.slope = self.slope;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.train_iterations,
            batch: self.batch,
            patch: self.patch,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            seed: self.resolve_seed(),
            augment: self.augment,
            two_phase: self.two_phase,
            val_every: self.val_every,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            iterations: self.adapt_iterations,
            unpaired_batch: self.unpaired_batch,
            paired_batch: self.paired_batch,
            lr: self.adapt_lr,
            patch: self.patch,
            seed: self.resolve_seed(),
            augment: self.augment,
            val_every: self.val_every,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            dual_scales: self.dual_scales,
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            channel: self.channel,
            shave: self.shave.unwrap_or(self.scale),
        }
    }

    /// Renders every effective key exactly once, in file format, with
    /// preset-derived values resolved.
    pub fn echo(&self) -> Result<String> {
        let model = self.model_config()?;
        let preset = match self.preset {
            Preset::S => "drn-s",
            Preset::L => "drn-l",
            Preset::T => "drn-t",
        };
        let dual_scales = match self.dual_scales {
            DualScales::All => "all",
            DualScales::Final => "final",
        };
        let channel = match self.channel {
            ChannelMode::Y => "y",
            ChannelMode::Rgb => "rgb",
        };
        let shave = self
            .shave
            .map(|s| s.to_string())
            .unwrap_or_else(|| "auto".into());
        Ok(format!(
            "[model]\n\
             preset = {preset}\n\
             scale = {}\n\
             blocks = {}\n\
             channels = {}\n\
             reduction = {}\n\
             slope = {}\n\
             [train]\n\
             iterations = {}\n\
             batch = {}\n\
             patch = {}\n\
             lr_start = {:e}\n\
             lr_end = {:e}\n\
             seed = {}\n\
             augment = {}\n\
             lambda = {}\n\
             dual_scales = {dual_scales}\n\
             two_phase = {}\n\
             val_every = {}\n\
             checkpoint_every = {}\n\
             [adapt]\n\
             iterations = {}\n\
             unpaired_batch = {}\n\
             paired_batch = {}\n\
             lr = {:e}\n\
             pretrained = {}\n\
             scratch = {}\n\
             [eval]\n\
             channel = {channel}\n\
             shave = {shave}\n",
            model.scale,
            model.blocks,
            model.channels,
            model.reduction,
            model.slope,
            self.train_iterations,
            self.batch,
            self.patch,
            self.lr_start,
            self.lr_end,
            self.resolve_seed(),
            self.augment,
            self.lambda,
            self.two_phase,
            self.val_every,
            self.checkpoint_every,
            self.adapt_iterations,
            self.unpaired_batch,
            self.paired_batch,
            self.adapt_lr,
            self.pretrained.as_deref().unwrap_or(""),
            self.scratch,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_back_from_echo() {
        let cfg = RunConfig::default();
        let echo = cfg.echo().unwrap();
        let reparsed = RunConfig::parse(&echo).unwrap();
        assert_eq!(reparsed.scale, 2);
        assert_eq!(reparsed.batch, 8);
        assert_eq!(reparsed.lambda, 0.1);
        assert_eq!(reparsed.echo().unwrap(), echo);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"), "{err}");
        let err = RunConfig::parse("[optimizer]\nlr = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
    }

    #[test]
    fn sections_and_overrides() {
        let mut cfg = RunConfig::parse(
            "# comment\n[model]\npreset = drn-s\nscale = 4\n[train]\nlambda = 0.5\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.preset, Preset::S);
        assert_eq!(cfg.scale, 4);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.resolve_seed(), 7);
        let model = cfg.model_config().unwrap();
        assert_eq!((model.blocks, model.channels), (30, 16));

        cfg.set("", "train.lambda", "0.25").unwrap();
        assert_eq!(cfg.lambda, 0.25);
        assert!(cfg.set("", "nosection", "1").is_err());
    }

    #[test]
    fn echo_lists_every_key_exactly_once() {
        let echo = RunConfig::default().echo().unwrap();
        for key in [
            "preset", "scale", "blocks", "channels", "reduction", "slope", "iterations",
            "batch", "patch", "lr_start", "lr_end", "seed", "augment", "lambda",
            "dual_scales", "two_phase", "val_every", "checkpoint_every", "unpaired_batch",
            "paired_batch", "pretrained", "scratch", "channel", "shave",
        ] {
            let count = echo
                .lines()
                .filter(|l| l.split('=').next().map(str::trim) == Some(key))
                .count();
            let expected = if key == "iterations" { 2 } else { 1 };
            assert_eq!(count, expected, "key {key} appears {count} times");
        }
    }

    #[test]
    fn explicit_blocks_override_preset() {
        let cfg = RunConfig::parse("[model]\npreset = drn-s\nscale = 4\nblocks = 5\n").unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.blocks, 5);
        assert_eq!(model.channels, 16);
    }
}
