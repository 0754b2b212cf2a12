//! Run configuration and its `key = value` text form.
//!
//! Keys are namespaced by section (`data.`, `backbone.`, `train.`, `eval.`);
//! `#` starts a comment. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Number of stages, counted from the input side, excluded from
    /// episodic training.
    pub frozen_stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            frozen_stages: 1,
        }
    }
}

impl BackboneConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone.stage_channels must be a non-empty list of positive ints".into()));
        }
        if self.frozen_stages > self.stage_channels.len() {
            return Err(Error::Config(format!(
                "backbone.frozen_stages = {} exceeds the {} stages",
                self.frozen_stages,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub master_seed: u64,
    pub image_size: usize,
    /// Instances per class available to the training stages.
    pub train_pool: usize,
    /// Held-out instances per class (evaluation, accuracy checks).
    pub test_pool: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            master_seed: 42,
            image_size: 64,
            train_pool: 1000,
            test_pool: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every_epochs: usize,
    pub cls_epochs: usize,
    pub episodic_epochs: usize,
    pub steps_per_epoch: usize,
    /// Weight of the classification loss during episodic training.
    pub cls_lambda: f64,
    pub fold: usize,
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay: 0.7,
            decay_every_epochs: 10,
            cls_epochs: 30,
            episodic_epochs: 40,
            steps_per_epoch: 500,
            cls_lambda: 1.0,
            fold: 0,
            k: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { pairs: 1000, seed: 42 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Defaults overridden by every `key = value` line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.master_seed" => self.data.master_seed = parse(key, value)?,
            "data.image_size" => self.data.image_size = parse(key, value)?,
            "data.train_pool" => self.data.train_pool = parse(key, value)?,
            "data.test_pool" => self.data.test_pool = parse(key, value)?,
            "backbone.stage_channels" => {
                self.backbone.stage_channels =
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
            }
            "backbone.frozen_stages" => self.backbone.frozen_stages = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, value)?,
            "train.decay_every_epochs" => self.train.decay_every_epochs = parse(key, value)?,
            "train.cls_epochs" => self.train.cls_epochs = parse(key, value)?,
            "train.episodic_epochs" => self.train.episodic_epochs = parse(key, value)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = parse(key, value)?,
            "train.cls_lambda" => self.train.cls_lambda = parse(key, value)?,
            "train.fold" => self.train.fold = parse(key, value)?,
            "train.k" => self.train.k = parse(key, value)?,
            "eval.pairs" => self.eval.pairs = parse(key, value)?,
            "eval.seed" => self.eval.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(Error::Config("train.lr_decay must lie in (0, 1]".into()));
        }
        if t.decay_every_epochs == 0 {
            return Err(Error::Config("train.decay_every_epochs must be at least 1".into()));
        }
        if t.fold > 3 {
            return Err(Error::Config(format!("train.fold = {} is not in 0..=3", t.fold)));
        }
        if t.k == 0 {
            return Err(Error::Config("train.k must be at least 1".into()));
        }
        if !(t.cls_lambda >= 0.0) {
            return Err(Error::Config("train.cls_lambda must be non-negative".into()));
        }
        let factor = self.backbone.downsample_factor();
        if self.data.image_size == 0 || self.data.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "data.image_size = {} must be a positive multiple of {factor}",
                self.data.image_size
            )));
        }
        Ok(())
    }

    /// Canonical text form; `Config::parse(&c.to_text()) == c`.
    pub fn to_text(&self) -> String {
        let mut s = self.model_text();
        writeln!(s, "eval.pairs = {}", self.eval.pairs).unwrap();
        writeln!(s, "eval.seed = {}", self.eval.seed).unwrap();
        s
    }

    /// Every key that shapes a training run (everything except `eval.*`).
    fn model_text(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let b = &self.backbone;
        let t = &self.train;
        let channels: Vec<String> = b.stage_channels.iter().map(ToString::to_string).collect();
        writeln!(s, "data.master_seed = {}", d.master_seed).unwrap();
        writeln!(s, "data.image_size = {}", d.image_size).unwrap();
        writeln!(s, "data.train_pool = {}", d.train_pool).unwrap();
        writeln!(s, "data.test_pool = {}", d.test_pool).unwrap();
        writeln!(s, "backbone.stage_channels = {}", channels.join(",")).unwrap();
        writeln!(s, "backbone.frozen_stages = {}", b.frozen_stages).unwrap();
        writeln!(s, "train.lr = {:?}", t.lr).unwrap();
        writeln!(s, "train.lr_decay = {:?}", t.lr_decay).unwrap();
        writeln!(s, "train.decay_every_epochs = {}", t.decay_every_epochs).unwrap();
        writeln!(s, "train.cls_epochs = {}", t.cls_epochs).unwrap();
        writeln!(s, "train.episodic_epochs = {}", t.episodic_epochs).unwrap();
        writeln!(s, "train.steps_per_epoch = {}", t.steps_per_epoch).unwrap();
        writeln!(s, "train.cls_lambda = {:?}", t.cls_lambda).unwrap();
        writeln!(s, "train.fold = {}", t.fold).unwrap();
        writeln!(s, "train.k = {}", t.k).unwrap();
        s
    }

    /// Fingerprint stored in checkpoints; resuming under a different training
    /// configuration is refused. Evaluation settings and the shot count do
    /// not participate.
    pub fn hash(&self) -> u64 {
        let text: String = self.model_text().lines().filter(|l| !l.starts_with("train.k ")).map(|l| format!("{l}\n")).collect();
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_schedule() {
        let c = Config::default();
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.lr_decay, 0.7);
        assert_eq!(c.train.decay_every_epochs, 10);
        assert_eq!(c.backbone.stage_channels, vec![16, 32, 64]);
        assert_eq!(c.backbone.downsample_factor(), 8);
        assert_eq!(c.eval.pairs, 1000);
        assert_eq!(c.data.master_seed, 42);
    }

    #[test]
    fn parses_comments_and_namespaced_keys() {
        let text = "# comment\n train.lr = 0.001  # trailing\n\nbackbone.stage_channels = 8, 16\nbackbone.frozen_stages=0\ndata.image_size = 32\n";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.backbone.stage_channels, vec![8, 16]);
        assert_eq!(c.backbone.frozen_stages, 0);
        assert_eq!(c.data.image_size, 32);
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.train.lr = 3.5e-4;
        c.train.fold = 2;
        c.eval.seed = 7;
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::parse("train.fold = 4").is_err());
        assert!(Config::parse("train.lr = 0").is_err());
        assert!(Config::parse("train.lr_decay = 1.5").is_err());
        assert!(Config::parse("backbone.frozen_stages = 4").is_err());
        assert!(Config::parse("data.image_size = 60").is_err());
        assert!(Config::parse("nope = 1").is_err());
        assert!(Config::parse("train.lr").is_err());
    }

    #[test]
    fn hash_ignores_eval_section_and_shots() {
        let a = Config::default();
        let mut b = a.clone();
        b.eval.seed = 99;
        b.train.k = 5;
        assert_eq!(a.hash(), b.hash());
        b.train.cls_lambda = 0.0;
        assert_ne!(a.hash(), b.hash());
    }
}
