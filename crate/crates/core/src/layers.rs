//! Building blocks shared by the model modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// One forward (and optionally backward) pass over a shared parameter store.
///
/// A session owns its tape, so sessions over the same store are independent.
/// Dropout is active only when the session was created with [`Session::train`].
pub struct Session<'s> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'s> Session<'s> {
    pub fn train(store: &'s ParamStore, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            dropout_rng: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.dropout_rng.as_mut())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Runs backward from `loss` and returns the parameter gradients.
    pub fn gradients(mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        let mut g = Gradients::zeros_like(self.store);
        self.tape.accumulate_param_grads(&mut g);
        Ok(g)
    }

    /// Zeroes the rows flagged invalid. A no-op when every row is valid.
    pub fn mask_rows(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        if valid.iter().all(|&v| v) {
            return Ok(x);
        }
        let c = self.value(x).cols();
        let mask: Vec<f64> = valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, c))
            .collect();
        let m = self.constant(Tensor::new(self.value(x).shape().to_vec(), mask)?);
        self.tape.mul(x, m)
    }
}

/// `x · W + b` with `W` of shape `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::uniform(&[inputs, outputs], -limit, limit, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn with_weight(store: &mut ParamStore, name: &str, weight: Tensor) -> Self {
        let outputs = weight.cols();
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.matmul(x, w)?;
        s.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.tape.layer_norm(x, g, b)
    }
}
