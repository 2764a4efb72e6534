//! Model and training configuration with a flat `key = value` text form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::LossWeightMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Pool the cross-attention outputs; no masking and no masked encoder.
    pub disable_mte: bool,
    /// Drop the cross-attention stack; masks are drawn uniformly at random.
    pub disable_cab: bool,
    /// Fixed sinusoidal index encoding instead of the learnable time encoding.
    pub disable_tte: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub t_depth: usize,
    pub m_depth: usize,
    pub cab_layers: usize,
    pub dropout: f64,
    pub mask_ratio: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            t_depth: 2,
            m_depth: 2,
            cab_layers: 2,
            dropout: 0.1,
            mask_ratio: 0.1,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.d == 0 || !self.d.is_multiple_of(4) {
            return bad(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.cab_layers == 0 {
            return bad("cab_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1]", self.mask_ratio));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping; 0 never stops early.
    pub patience: usize,
    pub seed: u64,
    pub loss_weights: LossWeightMode,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            loss_weights: LossWeightMode::InverseFrequency,
            grad_clip: 5.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "d",
    "heads",
    "t_depth",
    "m_depth",
    "cab_layers",
    "dropout",
    "mask_ratio",
    "disable_mte",
    "disable_cab",
    "disable_tte",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "loss_weights",
    "grad_clip",
];

/// `key = value` pairs of a config text; `#` starts a comment.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Validation(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let v = value.trim();
        match key.trim() {
            "d" => m.d = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "t_depth" => m.t_depth = parse(key, v)?,
            "m_depth" => m.m_depth = parse(key, v)?,
            "cab_layers" => m.cab_layers = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "mask_ratio" | "r" => m.mask_ratio = parse(key, v)?,
            "disable_mte" => m.ablation.disable_mte = parse(key, v)?,
            "disable_cab" => m.ablation.disable_cab = parse(key, v)?,
            "disable_tte" => m.ablation.disable_tte = parse(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "loss_weights" => {
                self.loss_weights = match v {
                    "inverse_frequency" => LossWeightMode::InverseFrequency,
                    "uniform" => LossWeightMode::Uniform,
                    _ => return Err(Error::Validation(format!("unknown loss weight mode {v:?}"))),
                }
            }
            "grad_clip" => self.grad_clip = parse(key, v)?,
            other => return Err(Error::Validation(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "d" => m.d.to_string(),
            "heads" => m.heads.to_string(),
            "t_depth" => m.t_depth.to_string(),
            "m_depth" => m.m_depth.to_string(),
            "cab_layers" => m.cab_layers.to_string(),
            "dropout" => format!("{:?}", m.dropout),
            "mask_ratio" => format!("{:?}", m.mask_ratio),
            "disable_mte" => m.ablation.disable_mte.to_string(),
            "disable_cab" => m.ablation.disable_cab.to_string(),
            "disable_tte" => m.ablation.disable_tte.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "loss_weights" => match self.loss_weights {
                LossWeightMode::InverseFrequency => "inverse_frequency".into(),
                LossWeightMode::Uniform => "uniform".into(),
            },
            "grad_clip" => format!("{:?}", self.grad_clip),
            _ => return None,
        })
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::Validation(format!(
                "grad_clip {} must be non-negative",
                self.grad_clip
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.model.d, c.model.heads, c.model.cab_layers), (64, 4, 2));
        assert_eq!((c.model.mask_ratio, c.model.dropout, c.learning_rate), (0.1, 0.1, 1e-3));
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (32, 100, 5));
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("d", "8").unwrap();
        c.set("heads", "2").unwrap();
        c.set("disable_cab", "true").unwrap();
        c.set("learning_rate", "0.003").unwrap();
        c.set("loss_weights", "uniform").unwrap();
        c.set("dropout", "0.1").unwrap();
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        let c2 = TrainConfig::from_text("# tiny\nd = 8\nheads=2 # two\n").unwrap();
        assert_eq!((c2.model.d, c2.model.heads), (8, 2));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::from_text("depth = 3").unwrap_err().is_validation());
        assert!(TrainConfig::from_text("d = eight").unwrap_err().is_validation());
        assert!(TrainConfig::from_text("d = 8\nheads = 3").unwrap_err().is_validation());
        assert!(TrainConfig::from_text("cab_layers = 0").unwrap_err().is_validation());
        assert!(TrainConfig::from_text("nonsense").unwrap_err().is_validation());
    }
}
