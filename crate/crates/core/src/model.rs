//! The full linkage network, wired pair by pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Var};
use crate::config::ModelConfig;
use crate::correlation::{AttentionMap, CorrelationBlock};
use crate::data::{Platform, TokenizedSequence};
use crate::embedding::{add_temporal, sinusoidal_positions, EmbeddingTables, TemporalEncoding};
use crate::encoder::{EncoderRole, EncoderStack};
use crate::error::Result;
use crate::head::{pool_and_concat, PredictorMlp};
use crate::layers::Session;
use crate::masking::{apply_mask, random_mask, select_mask, token_importance, MaskEmbedding, MaskPlan};

/// Folds `parts` into one well-mixed seed (splitmix64 steps).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Debug)]
pub struct MtLink {
    pub cfg: ModelConfig,
    pub embed: EmbeddingTables,
    pub te: TemporalEncoding,
    pub f_t: EncoderStack,
    pub cab: CorrelationBlock,
    pub mask: MaskEmbedding,
    pub f_m: EncoderStack,
    pub head: PredictorMlp,
}

/// Everything one pair's forward pass exposes.
pub struct PairForward {
    /// `1×1` linkage probability.
    pub prob: Var,
    /// Absent when the cross-attention stack is ablated.
    pub map_ab: Option<AttentionMap>,
    pub map_ba: Option<AttentionMap>,
    /// Absent when the masked encoder is ablated.
    pub plan_a: Option<MaskPlan>,
    pub plan_b: Option<MaskPlan>,
}

impl MtLink {
    /// Builds every sub-module (ablated ones included, so checkpoints of all
    /// variants share one layout) and returns the initialized parameters.
    pub fn new(cfg: &ModelConfig, vocab: usize, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, p) = (cfg.d, cfg.heads, cfg.dropout);
        let embed = EmbeddingTables::new(&mut store, vocab, d, &mut rng)?;
        let te = TemporalEncoding::new(&mut store, d, &mut rng);
        let f_t = EncoderStack::new(&mut store, EncoderRole::Temporal, cfg.t_depth, d, h, p, &mut rng)?;
        let cab = CorrelationBlock::new(&mut store, d, h, cfg.cab_layers, p, &mut rng)?;
        let mask = MaskEmbedding::new(&mut store, d, &mut rng);
        let f_m = EncoderStack::new(&mut store, EncoderRole::Masked, cfg.m_depth, d, h, p, &mut rng)?;
        let head = PredictorMlp::new(&mut store, d, &mut rng);
        let model = Self {
            cfg: cfg.clone(),
            embed,
            te,
            f_t,
            cab,
            mask,
            f_m,
            head,
        };
        Ok((model, store))
    }

    /// `Z = f_st(T) + TE(t)` (or the fixed index encoding when ablated).
    pub fn embed(&self, s: &mut Session, seq: &TokenizedSequence) -> Result<Var> {
        let x = self.embed.embed_sequence(s, seq)?;
        let enc = if self.cfg.ablation.disable_tte {
            s.constant(sinusoidal_positions(seq.len(), self.cfg.d))
        } else {
            self.te.encode(s, &seq.hours)?
        };
        add_temporal(s, x, enc)
    }

    /// `plan_seed` drives the random masks of the cross-attention ablation
    /// and is ignored otherwise.
    pub fn forward_pair(
        &self,
        s: &mut Session,
        a: &TokenizedSequence,
        b: &TokenizedSequence,
        plan_seed: u64,
    ) -> Result<PairForward> {
        let ab = self.cfg.ablation;
        let r = self.cfg.mask_ratio;
        let (va, vb) = (vec![true; a.len()], vec![true; b.len()]);
        let za = self.embed(s, a)?;
        let zb = self.embed(s, b)?;
        let ha = self.f_t.encode(s, za, &va)?;
        let hb = self.f_t.encode(s, zb, &vb)?;

        let (qa, qb, maps, plans) = if ab.disable_cab {
            let mut rng = ChaCha8Rng::seed_from_u64(plan_seed);
            let pa = random_mask(&va, r, Platform::A, &mut rng)?;
            let pb = random_mask(&vb, r, Platform::B, &mut rng)?;
            (ha, hb, None, (pa, pb))
        } else {
            let out = self.cab.cross_attend_stack(s, ha, hb, &va, &vb)?;
            let plans = if ab.disable_mte {
                (MaskPlan::empty(Platform::A), MaskPlan::empty(Platform::B))
            } else {
                // A→B attention ranks B's tokens and vice versa
                let sb = token_importance(&out.map_ab, &vb);
                let sa = token_importance(&out.map_ba, &va);
                (
                    select_mask(&sa, r, a.len(), Platform::A)?,
                    select_mask(&sb, r, b.len(), Platform::B)?,
                )
            };
            (out.a, out.b, Some((out.map_ab, out.map_ba)), plans)
        };

        let (fa, fb, plans) = if ab.disable_mte {
            (qa, qb, None)
        } else {
            let ma = apply_mask(s, qa, &plans.0, &self.mask)?;
            let mb = apply_mask(s, qb, &plans.1, &self.mask)?;
            let fa = self.f_m.encode(s, ma, &va)?;
            let fb = self.f_m.encode(s, mb, &vb)?;
            (fa, fb, Some(plans))
        };
        let features = pool_and_concat(s, fa, fb, &va, &vb)?;
        let prob = self.head.predict(s, features)?;
        let (map_ab, map_ba) = maps.map_or((None, None), |(x, y)| (Some(x), Some(y)));
        let (plan_a, plan_b) = plans.map_or((None, None), |(x, y)| (Some(x), Some(y)));
        Ok(PairForward {
            prob,
            map_ab,
            map_ba,
            plan_a,
            plan_b,
        })
    }

    /// Probability for one pair without recording gradients for later use.
    pub fn score(
        &self,
        store: &ParamStore,
        a: &TokenizedSequence,
        b: &TokenizedSequence,
        plan_seed: u64,
    ) -> Result<f64> {
        let mut s = Session::eval(store);
        let out = self.forward_pair(&mut s, a, b, plan_seed)?;
        s.value(out.prob).item()
    }
}
