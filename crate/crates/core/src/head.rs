//! Pooling, the MLP predictor and the class-weighted loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Session};

/// `[mean(H_A over valid rows) ; mean(H_B over valid rows)]` as `1×2d`.
pub fn pool_and_concat(s: &mut Session, h_a: Var, h_b: Var, valid_a: &[bool], valid_b: &[bool]) -> Result<Var> {
    let a = s.tape.masked_mean(h_a, valid_a)?;
    let b = s.tape.masked_mean(h_b, valid_b)?;
    s.tape.concat(&[a, b])
}

/// `2d → d → 1` with relu in between and a sigmoid output.
#[derive(Clone, Debug)]
pub struct PredictorMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl PredictorMlp {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, "head.hidden", 2 * d, d, rng),
            out: Linear::new(store, "head.out", d, 1, rng),
        }
    }

    pub fn logit(&self, s: &mut Session, features: Var) -> Result<Var> {
        let h = self.hidden.forward(s, features)?;
        let h = s.tape.relu(h);
        self.out.forward(s, h)
    }

    /// Linkage probability as a `1×1` node.
    pub fn predict(&self, s: &mut Session, features: Var) -> Result<Var> {
        let z = self.logit(s, features)?;
        Ok(s.tape.sigmoid(z))
    }
}

/// Decision rule on a probability.
pub fn decide(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeightMode {
    /// `w_pos = N / 2N_pos`, `w_neg = N / 2N_neg`.
    InverseFrequency,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pos: f64,
    pub neg: f64,
}

impl LossWeights {
    pub fn new(pos: f64, neg: f64) -> Result<Self> {
        if !(pos > 0.0 && neg > 0.0 && pos.is_finite() && neg.is_finite()) {
            return Err(Error::Validation(format!(
                "loss weights ({pos}, {neg}) must be positive"
            )));
        }
        Ok(Self { pos, neg })
    }

    pub fn uniform() -> Self {
        Self { pos: 1.0, neg: 1.0 }
    }

    pub fn from_labels(mode: LossWeightMode, labels: &[u8]) -> Result<Self> {
        match mode {
            LossWeightMode::Uniform => Ok(Self::uniform()),
            LossWeightMode::InverseFrequency => {
                let n = labels.len() as f64;
                let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
                let neg = n - pos;
                if pos == 0.0 || neg == 0.0 {
                    return Err(Error::Validation("training labels contain a single class".into()));
                }
                Self::new(n / (2.0 * pos), n / (2.0 * neg))
            }
        }
    }

    pub fn of(&self, label: u8) -> f64 {
        if label == 1 {
            self.pos
        } else {
            self.neg
        }
    }
}

/// Weighted BCE of a batch of `1×1` probability nodes.
pub fn weighted_bce(s: &mut Session, probs: &[Var], labels: &[u8], w: LossWeights) -> Result<Var> {
    if probs.is_empty() {
        return Err(Error::Contract("binary cross-entropy of an empty batch".into()));
    }
    let p = if probs.len() == 1 {
        probs[0]
    } else {
        s.tape.concat(probs)?
    };
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let ws: Vec<f64> = labels.iter().map(|&l| w.of(l)).collect();
    s.tape.weighted_bce(p, &y, &ws)
}
