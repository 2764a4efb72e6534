//! Optimization loop, early stopping, evaluation and checkpoints.

use std::fs;
use std::io::{Cursor, Read};
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, ParamStore, Tensor};
use crate::config::TrainConfig;
use crate::data::{Corpus, PairSample, TokenizedSequence};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricsReport};
use crate::head::{weighted_bce, LossWeights};
use crate::layers::Session;
use crate::model::{mix_seed, MtLink};

/// Labeled pairs over the two platforms' tokenized sequences.
#[derive(Clone, Copy)]
pub struct PairSet<'a> {
    pub a: &'a [TokenizedSequence],
    pub b: &'a [TokenizedSequence],
    pub pairs: &'a [PairSample],
}

impl<'a> PairSet<'a> {
    pub fn of(corpus: &'a Corpus, pairs: &'a [PairSample]) -> Self {
        Self {
            a: &corpus.tokens_a,
            b: &corpus.tokens_b,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.pairs.iter().map(|p| p.label).collect()
    }

    fn get(&self, i: usize) -> (&'a TokenizedSequence, &'a TokenizedSequence) {
        let p = &self.pairs[i];
        (&self.a[p.seq_a], &self.b[p.seq_b])
    }
}

// stream tags keep the random streams of one seed independent
const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;
const TRAIN_PLAN: u64 = 3;
const EVAL_PLAN: u64 = 4;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for e in 0..p.len() {
                let ge = g.data()[e];
                m[e] = BETA1 * m[e] + (1.0 - BETA1) * ge;
                v[e] = BETA2 * v[e] + (1.0 - BETA2) * ge * ge;
                p[e] -= self.lr * (m[e] / c1) / ((v[e] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Rescales `grads` to global norm `max_norm` when larger; returns the norm
/// before clipping. `max_norm = 0` disables clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean class-weighted loss over the epoch's training pairs.
    pub train_loss: f64,
    pub val: MetricsReport,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab_size: usize,
    /// Epoch (1-based) whose parameters are stored.
    pub epoch: usize,
    /// Validation AUC of the stored parameters.
    pub best_metric: f64,
    pub val_metrics: Option<MetricsReport>,
    pub params: ParamStore,
    pub adam: Adam,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Seed of the random mask plans (used only when cross-attention is ablated)
/// for evaluation pair `index`.
pub fn eval_plan_seed(seed: u64, index: usize) -> u64 {
    mix_seed(&[seed, EVAL_PLAN, index as u64])
}

/// Probabilities for every pair of `set`, without dropout.
pub fn predict(model: &MtLink, store: &ParamStore, set: &PairSet, seed: u64) -> Result<Vec<f64>> {
    (0..set.len())
        .map(|i| {
            let (a, b) = set.get(i);
            model.score(store, a, b, eval_plan_seed(seed, i))
        })
        .collect()
}

pub fn evaluate(model: &MtLink, store: &ParamStore, set: &PairSet, seed: u64) -> Result<MetricsReport> {
    let scores = predict(model, store, set, seed)?;
    compute_metrics(&scores, &set.labels(), 0.5)
}

/// Gradient of the summed weighted loss over `idx` (divided by `denom`) and
/// that summed loss.
fn batch_gradients(
    model: &MtLink,
    store: &ParamStore,
    set: &PairSet,
    idx: &[usize],
    weights: LossWeights,
    denom: f64,
    seeds: impl Fn(usize) -> (u64, u64),
) -> Result<(Gradients, f64)> {
    let mut total = Gradients::zeros_like(store);
    let mut loss_sum = 0.0;
    for &i in idx {
        let (a, b) = set.get(i);
        let (dropout_seed, plan_seed) = seeds(i);
        let mut s = Session::train(store, dropout_seed);
        let out = model.forward_pair(&mut s, a, b, plan_seed)?;
        let l = weighted_bce(&mut s, &[out.prob], &[set.pairs[i].label], weights)?;
        let value = s.value(l).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                detail: format!("non-finite loss on training pair {i}"),
            });
        }
        loss_sum += value;
        let l = s.tape.scale(l, 1.0 / denom);
        total.add(&s.gradients(l)?);
    }
    Ok((total, loss_sum))
}

/// Trains a fresh model on `train`, selecting the epoch with the best
/// validation AUC. `on_epoch` sees every epoch's log as it completes and may
/// end training by returning `Break`.
pub fn train(
    train_set: &PairSet,
    val_set: &PairSet,
    vocab_size: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let weights = LossWeights::from_labels(cfg.loss_weights, &train_set.labels())?;
    let (model, mut store) = MtLink::new(&cfg.model, vocab_size, cfg.seed)?;
    let mut adam = Adam::new(&store, cfg.learning_rate);
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let ep = epoch as u64;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, SHUFFLE, ep])));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seeds = |i: usize| {
                (
                    mix_seed(&[cfg.seed, DROPOUT, ep, i as u64]),
                    mix_seed(&[cfg.seed, TRAIN_PLAN, ep, i as u64]),
                )
            };
            let (mut grads, l) = batch_gradients(&model, &store, train_set, batch, weights, batch.len() as f64, seeds)
                .map_err(|e| match e {
                    Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
                    other => other,
                })?;
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite gradient norm".into(),
                });
            }
            adam.update(&mut store, &grads);
            loss_sum += l;
        }
        let val = evaluate(&model, &store, val_set, cfg.seed)?;
        let auc = val.auc()?;
        let improved = best.as_ref().is_none_or(|b| auc > b.best_metric);
        if improved {
            stale = 0;
            best = Some(Checkpoint {
                config: cfg.clone(),
                vocab_size,
                epoch,
                best_metric: auc,
                val_metrics: Some(val.clone()),
                params: store.clone(),
                adam: adam.clone(),
            });
        } else {
            stale += 1;
        }
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val,
            improved,
            seconds: start.elapsed().as_secs_f64(),
        };
        let flow = on_epoch(&log);
        history.push(log);
        if flow.is_break() {
            break;
        }
        if cfg.patience > 0 && stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let checkpoint = best.ok_or_else(|| Error::Validation("max_epochs must be at least 1".into()))?;
    Ok(TrainOutcome {
        checkpoint,
        history,
        stopped_early,
    })
}

/// Runs `steps` full-batch Adam steps on `set` and returns the loss measured
/// without dropout before each step and after the last one.
pub fn descend(
    model: &MtLink,
    store: &mut ParamStore,
    set: &PairSet,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    let weights = LossWeights::from_labels(cfg.loss_weights, &set.labels())?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut adam = Adam::new(store, cfg.learning_rate);
    let mut losses = Vec::with_capacity(steps + 1);
    let eval_loss = |store: &ParamStore| -> Result<f64> {
        let mut s = Session::eval(store);
        let probs = idx
            .iter()
            .map(|&i| {
                let (a, b) = set.get(i);
                Ok(model.forward_pair(&mut s, a, b, eval_plan_seed(cfg.seed, i))?.prob)
            })
            .collect::<Result<Vec<_>>>()?;
        let l = weighted_bce(&mut s, &probs, &set.labels(), weights)?;
        s.value(l).item()
    };
    for step in 0..steps {
        losses.push(eval_loss(store)?);
        let seeds = |i: usize| (0, mix_seed(&[cfg.seed, TRAIN_PLAN, step as u64, i as u64]));
        let (mut grads, _) = batch_gradients(model, store, set, &idx, weights, idx.len() as f64, seeds)?;
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam.update(store, &grads);
    }
    losses.push(eval_loss(store)?);
    Ok(losses)
}

const MAGIC: &[u8; 4] = b"MTLK";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if n > remaining {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let mut buf = vec![0u8; n];
        self.0.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_bytes(&mut out, self.config.to_text().as_bytes());
        put_u64(&mut out, self.vocab_size as u64);
        put_u64(&mut out, self.epoch as u64);
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        let metrics = match &self.val_metrics {
            Some(m) => serde_json::to_vec(m)?,
            None => Vec::new(),
        };
        put_bytes(&mut out, &metrics);
        put_u64(&mut out, self.adam.step);
        out.extend_from_slice(&self.adam.lr.to_le_bytes());
        put_u32(&mut out, (3 * self.params.len()) as u32);
        for (id, name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
            put_tensor(&mut out, &format!("adam.m.{name}"), &self.adam.m[id.index()]);
            put_tensor(&mut out, &format!("adam.v.{name}"), &self.adam.v[id.index()]);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(Cursor::new(bytes));
        if &r.array::<4>()? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::from_text(&r.string()?)?;
        let vocab_size = r.u64()? as usize;
        let epoch = r.u64()? as usize;
        let best_metric = r.f64()?;
        let metrics = r.bytes()?;
        let val_metrics = if metrics.is_empty() {
            None
        } else {
            Some(serde_json::from_slice(&metrics)?)
        };
        let step = r.u64()?;
        let lr = r.f64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::new();
        let mut moments = std::collections::HashMap::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            if name.starts_with("adam.") {
                moments.insert(name, t);
            } else {
                params.push((name, t));
            }
        }
        let (_, mut store) = MtLink::new(&config.model, vocab_size, config.seed)?;
        store.load_from(params)?;
        let mut take = |kind: &str, name: &str| {
            moments
                .remove(&format!("adam.{kind}.{name}"))
                .ok_or_else(|| Error::Format(format!("missing optimizer moment for {name}")))
        };
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, name, t) in store.iter() {
            let (mm, vv) = (take("m", name)?, take("v", name)?);
            if mm.shape() != t.shape() || vv.shape() != t.shape() {
                return Err(Error::Format(format!("optimizer moment shape mismatch for {name}")));
            }
            m.push(mm);
            v.push(vv);
        }
        Ok(Self {
            config,
            vocab_size,
            epoch,
            best_metric,
            val_metrics,
            params: store,
            adam: Adam { lr, step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// The model structure for this checkpoint's configuration.
    pub fn model(&self) -> Result<MtLink> {
        Ok(MtLink::new(&self.config.model, self.vocab_size, self.config.seed)?.0)
    }
}
