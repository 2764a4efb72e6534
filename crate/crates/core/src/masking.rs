//! Attention-guided token masking.
//!
//! A key token's importance is the attention it receives from the other
//! platform (its column sum in the map). The `floor(r·k)` least important
//! valid tokens are replaced by the learnable mask embedding.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor, Var};
use crate::correlation::AttentionMap;
use crate::data::Platform;
use crate::error::{Error, Result};
use crate::layers::Session;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_mask: usize,
    /// Ascending token positions.
    pub indices: Vec<usize>,
    pub target: Platform,
}

impl MaskPlan {
    pub fn empty(target: Platform) -> Self {
        Self {
            n_mask: 0,
            indices: Vec::new(),
            target,
        }
    }
}

/// Learnable `z_α`, shared by both platforms.
#[derive(Clone, Debug)]
pub struct MaskEmbedding {
    pub z: ParamId,
}

impl MaskEmbedding {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            z: store.add("mask.z_alpha", Tensor::randn(&[1, d], 0.02, rng)),
        }
    }
}

/// Attention received by every key; padded keys score `-inf` and are never
/// selected.
pub fn token_importance(map: &AttentionMap, valid_keys: &[bool]) -> Vec<f64> {
    let m = &map.matrix;
    (0..m.cols())
        .map(|j| {
            if valid_keys.get(j).copied().unwrap_or(false) {
                (0..m.rows()).map(|i| m.at(i, j)).sum()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// `floor(r·k_valid)`, immune to representation error such as `0.29·100`.
pub fn mask_count(r: f64, k_valid: usize) -> usize {
    (r * k_valid as f64 + 1e-9).floor() as usize
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Validation(format!("mask ratio {r} outside [0, 1]")));
    }
    Ok(())
}

/// The `floor(r·k_valid)` finite scores that are smallest, ties going to the
/// lower position. Non-finite scores mark padding.
pub fn select_mask(scores: &[f64], r: f64, k_valid: usize, target: Platform) -> Result<MaskPlan> {
    check_ratio(r)?;
    let mut valid: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    if valid.len() != k_valid {
        return Err(Error::Contract(format!(
            "{} finite scores for {k_valid} valid tokens",
            valid.len()
        )));
    }
    let n_mask = mask_count(r, k_valid);
    valid.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut indices = valid[..n_mask].to_vec();
    indices.sort_unstable();
    Ok(MaskPlan {
        n_mask,
        indices,
        target,
    })
}

/// Uniformly random plan of the same size as [`select_mask`] would produce.
pub fn random_mask<R: Rng>(valid: &[bool], r: f64, target: Platform, rng: &mut R) -> Result<MaskPlan> {
    check_ratio(r)?;
    let positions: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    let n_mask = mask_count(r, positions.len());
    let mut indices: Vec<usize> = positions.choose_multiple(rng, n_mask).copied().collect();
    indices.sort_unstable();
    Ok(MaskPlan {
        n_mask,
        indices,
        target,
    })
}

/// `(1 − M) ⊙ Z + M ⊙ z_α`; rows outside the plan are returned bit-equal.
pub fn apply_mask(s: &mut Session, z: Var, plan: &MaskPlan, mask: &MaskEmbedding) -> Result<Var> {
    if plan.indices.is_empty() {
        return Ok(z);
    }
    let (k, d) = (s.value(z).rows(), s.value(z).cols());
    let mut m = vec![0.0; k];
    for &i in &plan.indices {
        if i >= k {
            return Err(Error::Contract(format!("mask index {i} outside {k} tokens")));
        }
        m[i] = 1.0;
    }
    let keep: Vec<f64> = m.iter().flat_map(|&v| std::iter::repeat_n(1.0 - v, d)).collect();
    let keep = s.constant(Tensor::new(vec![k, d], keep)?);
    let column = s.constant(Tensor::new(vec![k, 1], m)?);
    let za = s.param(mask.z);
    let kept = s.tape.mul(z, keep)?;
    let filled = s.tape.matmul(column, za)?;
    s.tape.add(kept, filled)
}

/// One JSON line per plan: `{"pair":..,"platform":..,"indices":[..]}`.
pub fn write_plan_jsonl<W: Write>(mut w: W, pair: usize, plan: &MaskPlan) -> Result<()> {
    let line = serde_json::json!({
        "pair": pair,
        "platform": plan.target.to_string(),
        "indices": plan.indices,
    });
    serde_json::to_writer(&mut w, &line)?;
    w.write_all(b"\n")?;
    Ok(())
}
