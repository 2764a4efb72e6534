//! Full-model gradient check against central finite differences.

use crate::autodiff::{Gradients, ParamStore, Var};
use crate::config::ModelConfig;
use crate::data::TokenizedSequence;
use crate::error::{Error, Result};
use crate::head::{weighted_bce, LossWeights};
use crate::layers::Session;
use crate::masking::MaskPlan;
use crate::model::MtLink;

pub const STEP: f64 = 1e-5;

/// Gradient tensors with a smaller L2 norm are compared in absolute terms.
/// Round-off in the difference quotient at `STEP` is near 1e-10 per tensor,
/// so smaller norms are not resolvable; the key biases, whose gradient is
/// exactly zero under softmax shift invariance, land here.
pub const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    /// Per parameter tensor: name and relative error.
    pub per_param: Vec<(String, f64)>,
    pub n_checked: usize,
}

pub struct Batch<'a> {
    pub pairs: Vec<(&'a TokenizedSequence, &'a TokenizedSequence)>,
    pub labels: Vec<u8>,
    pub weights: LossWeights,
}

/// The discrete state of a forward pass: every pair's mask plans and the
/// relu activation pattern.
#[derive(PartialEq)]
struct Branches {
    plans: Vec<Option<MaskPlan>>,
    relu: Vec<bool>,
}

fn batch_loss(model: &MtLink, s: &mut Session, batch: &Batch) -> Result<(Var, Vec<Option<MaskPlan>>)> {
    let mut probs = Vec::with_capacity(batch.pairs.len());
    let mut plans = Vec::with_capacity(2 * batch.pairs.len());
    for (i, (a, b)) in batch.pairs.iter().enumerate() {
        let out = model.forward_pair(s, a, b, i as u64)?;
        probs.push(out.prob);
        plans.push(out.plan_a);
        plans.push(out.plan_b);
    }
    Ok((weighted_bce(s, &probs, &batch.labels, batch.weights)?, plans))
}

fn evaluate(model: &MtLink, store: &ParamStore, batch: &Batch) -> Result<(f64, Branches)> {
    let mut s = Session::eval(store);
    let (l, plans) = batch_loss(model, &mut s, batch)?;
    let relu = s.tape.relu_pattern();
    Ok((s.value(l).item()?, Branches { plans, relu }))
}

pub fn loss_value(model: &MtLink, store: &ParamStore, batch: &Batch) -> Result<f64> {
    Ok(evaluate(model, store, batch)?.0)
}

pub fn analytic(model: &MtLink, store: &ParamStore, batch: &Batch) -> Result<Gradients> {
    let mut s = Session::eval(store);
    let (l, _) = batch_loss(model, &mut s, batch)?;
    s.gradients(l)
}

/// Compares every parameter's backprop gradient `g` with the central
/// difference `n_e = (L(θ+h·e) − L(θ−h·e)) / 2h` taken element by element; a
/// parameter's error is `‖g − n‖ / max(‖g‖, ‖n‖, FLOOR)`.
///
/// Mask selection and relu are only piecewise smooth in the parameters, so
/// a difference quotient whose evaluations take different branches measures
/// a kink, not a derivative. Such a probe is reported as a contract error
/// instead of a gradient mismatch.
pub fn check_model(model: &MtLink, store: &ParamStore, batch: &Batch) -> Result<GradcheckReport> {
    let grads = analytic(model, store, batch)?;
    let (_, base) = evaluate(model, store, batch)?;
    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut n_checked = 0;
    for id in store.ids() {
        let (mut g2, mut n2, mut diff2) = (0.0, 0.0, 0.0);
        for e in 0..store.get(id).len() {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + STEP;
            let (up, branch_up) = evaluate(model, &work, batch)?;
            work.get_mut(id).data_mut()[e] = orig - STEP;
            let (down, branch_down) = evaluate(model, &work, batch)?;
            work.get_mut(id).data_mut()[e] = orig;
            if branch_up != base || branch_down != base {
                return Err(Error::Contract(format!(
                    "perturbing {}[{e}] by {STEP} crosses a mask or relu boundary",
                    store.name(id)
                )));
            }
            let numeric = (up - down) / (2.0 * STEP);
            let g = grads.get(id).data()[e];
            g2 += g * g;
            n2 += numeric * numeric;
            diff2 += (g - numeric) * (g - numeric);
            n_checked += 1;
        }
        let err = diff2.sqrt() / g2.sqrt().max(n2.sqrt()).max(FLOOR);
        per_param.push((store.name(id).to_string(), err));
    }
    let (worst, max_rel_err) =
        per_param
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    Ok(GradcheckReport {
        max_rel_err,
        worst,
        per_param,
        n_checked,
    })
}

/// Deterministic toy sequence of length `k` over `vocab` tokens.
pub fn toy_sequence(k: usize, vocab: usize, offset: usize) -> TokenizedSequence {
    TokenizedSequence {
        pois: (0..k).map(|i| (i * 3 + offset) % vocab).collect(),
        days: (0..k).map(|i| (i * 7 + offset) % 31).collect(),
        hours: (0..k).map(|i| (i * 5 + offset) as f64 * 0.25 + 0.1).collect(),
        coords: None,
    }
}

/// Two heads, default depths, and a mask ratio that masks a token of every
/// toy sequence.
pub fn toy_config(d: usize) -> ModelConfig {
    ModelConfig {
        d,
        heads: 2,
        mask_ratio: 0.34,
        ..ModelConfig::default()
    }
}

pub fn toy_vocab(k: usize) -> usize {
    2 * k + 1
}

/// `[a₀, b₀, a₁, b₁]` of lengths `k` and `k − 1`; pair 0 is labeled linked.
pub fn toy_sequences(k: usize, offset: usize) -> [TokenizedSequence; 4] {
    let vocab = toy_vocab(k);
    [
        toy_sequence(k, vocab, offset),
        toy_sequence(k - 1, vocab, offset + 1),
        toy_sequence(k, vocab, offset + 4),
        toy_sequence(k - 1, vocab, offset + 5),
    ]
}

pub const TOY_LABELS: [u8; 2] = [1, 0];

/// The standard check: `d`-dimensional model with two heads and two
/// cross-attention layers, a batch of one positive and one negative pair of
/// lengths `k` and `k − 1`, and a mask ratio that masks at least one token.
/// When a probe lands on a kink the toy inputs are shifted and the check
/// restarts, at most [`ATTEMPTS`] times.
pub fn run(d: usize, k: usize, seed: u64) -> Result<GradcheckReport> {
    if k < 2 {
        return Err(Error::Validation("gradcheck needs k >= 2".into()));
    }
    let vocab = toy_vocab(k);
    let (model, store) = MtLink::new(&toy_config(d), vocab, seed)?;
    let mut last = None;
    for attempt in 0..ATTEMPTS {
        let seqs = toy_sequences(k, 6 * attempt);
        let batch = Batch {
            pairs: vec![(&seqs[0], &seqs[1]), (&seqs[2], &seqs[3])],
            labels: TOY_LABELS.to_vec(),
            weights: LossWeights::new(1.5, 0.75)?,
        };
        match check_model(&model, &store, &batch) {
            Err(Error::Contract(msg)) => last = Some(msg),
            other => return other,
        }
    }
    Err(Error::Contract(last.unwrap_or_default()))
}

pub const ATTEMPTS: usize = 4;
