//! Spatio-temporal token embedding and the learnable cosine time encoding.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tensor, Var};
use crate::data::TokenizedSequence;
use crate::error::{Error, Result};
use crate::layers::{Linear, Session};

/// Day-of-month slots.
pub const TIME_SLOTS: usize = 31;

const EMBED_STD: f64 = 0.02;

/// POI table `|P|×d`, day table `31×d/4`, and the projection of their
/// concatenation back to `d`.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub poi: ParamId,
    pub slot: ParamId,
    pub proj: Linear,
    pub d: usize,
}

impl EmbeddingTables {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab: usize, d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::Validation(format!("d = {d} must be a positive multiple of 4")));
        }
        if vocab == 0 {
            return Err(Error::Validation("empty POI vocabulary".into()));
        }
        let d_t = d / 4;
        let normal = |shape: &[usize], rng: &mut R| Tensor::randn(shape, EMBED_STD, rng);
        let poi = store.add("embed.poi", normal(&[vocab, d], rng));
        let slot = store.add("embed.slot", normal(&[TIME_SLOTS, d_t], rng));
        let proj = Linear::with_weight(store, "embed.proj", normal(&[d + d_t, d], rng));
        Ok(Self { poi, slot, proj, d })
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.get(self.poi).rows()
    }

    /// `k×d` rows `W_proj · [E_p[poi]; E_t[day]] + bias`.
    pub fn embed_sequence(&self, s: &mut Session, seq: &TokenizedSequence) -> Result<Var> {
        let poi = s.param(self.poi);
        let slot = s.param(self.slot);
        let p = s.tape.gather(poi, &seq.pois)?;
        let t = s.tape.gather(slot, &seq.days)?;
        let x = s.tape.concat(&[p, t])?;
        self.proj.forward(s, x)
    }
}

/// `TE(t)_j = cos(w_j t + b_j) / sqrt(d)`.
#[derive(Clone, Debug)]
pub struct TemporalEncoding {
    /// Stored as `1×d` so the encoding is an outer product `t · w`.
    pub freq: ParamId,
    pub phase: ParamId,
}

impl TemporalEncoding {
    /// Frequencies from N(0, 1), phases from U[0, 2π).
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let w: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self::from_values(store, w, b)
    }

    pub fn from_values(store: &mut ParamStore, w: Vec<f64>, b: Vec<f64>) -> Self {
        let d = w.len();
        Self {
            freq: store.add("te.freq", Tensor::new(vec![1, d], w).expect("1×d")),
            phase: store.add("te.phase", Tensor::vector(b)),
        }
    }

    /// One TE row per entry of `hours`.
    pub fn encode(&self, s: &mut Session, hours: &[f64]) -> Result<Var> {
        if hours.is_empty() {
            return Err(Error::Contract("no timestamps to encode".into()));
        }
        let d = s.store.get(self.phase).len();
        let t = s.constant(Tensor::new(vec![hours.len(), 1], hours.to_vec())?);
        let w = s.param(self.freq);
        let b = s.param(self.phase);
        let wt = s.tape.matmul(t, w)?;
        let arg = s.tape.add_row(wt, b)?;
        let c = s.tape.cos(arg);
        Ok(s.tape.scale(c, 1.0 / (d as f64).sqrt()))
    }
}

/// TE of a single normalized time outside any tape.
pub fn temporal_encode(t: f64, w: &[f64], b: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (w.len() as f64).sqrt();
    w.iter().zip(b).map(|(w, b)| norm * (w * t + b).cos()).collect()
}

/// `Z = X + TE`.
pub fn add_temporal(s: &mut Session, x: Var, te: Var) -> Result<Var> {
    s.tape.add(x, te)
}

/// Fixed sinusoidal position encoding over token indices.
pub fn sinusoidal_positions(k: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; k * d];
    for pos in 0..k {
        for j in 0..d {
            let rate = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            data[pos * d + j] = if j % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![k, d], data).expect("k×d")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn seq(pois: Vec<usize>, days: Vec<usize>) -> TokenizedSequence {
        let hours = (0..pois.len()).map(|i| i as f64).collect();
        TokenizedSequence {
            pois,
            days,
            hours,
            coords: None,
        }
    }

    #[test]
    fn zero_tables_broadcast_the_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = EmbeddingTables::new(&mut store, 5, 8, &mut rng).unwrap();
        for id in [emb.poi, emb.slot, emb.proj.weight] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let bias: Vec<f64> = (0..8).map(|j| j as f64 - 3.5).collect();
        store.get_mut(emb.proj.bias).data_mut().copy_from_slice(&bias);
        let mut s = Session::eval(&store);
        let x = emb.embed_sequence(&mut s, &seq(vec![0, 4, 2], vec![0, 30, 5])).unwrap();
        for row in s.value(x).to_rows() {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn shapes_and_purity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = EmbeddingTables::new(&mut store, 5, 8, &mut rng).unwrap();
        assert_eq!(store.get(emb.poi).shape(), &[5, 8]);
        assert_eq!(store.get(emb.slot).shape(), &[31, 2]);
        assert_eq!(store.get(emb.proj.weight).shape(), &[10, 8]);
        let mut s = Session::eval(&store);
        let x = emb.embed_sequence(&mut s, &seq(vec![3, 1, 3], vec![7, 2, 7])).unwrap();
        let v = s.value(x);
        assert_eq!(v.shape(), &[3, 8]);
        assert_eq!(v.row(0), v.row(2));
        assert_ne!(v.row(0), v.row(1));

        let err = emb.embed_sequence(&mut s, &seq(vec![5], vec![0])).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { token: 5, size: 5 }));
        assert!(EmbeddingTables::new(&mut ParamStore::new(), 5, 6, &mut rng).is_err());
    }

    #[test]
    fn encoding_examples() {
        assert!(temporal_encode(123.4, &[0.0; 16], &[0.0; 16])
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(temporal_encode(0.0, &[1.0; 4], &[0.0; 4]), vec![0.5; 4]);

        let mut store = ParamStore::new();
        let te = TemporalEncoding::from_values(&mut store, vec![1.0, 2.0, 0.5, -1.0], vec![0.1, 0.2, 0.3, 0.4]);
        let mut s = Session::eval(&store);
        let v = te.encode(&mut s, &[0.0, 2.5]).unwrap();
        let rows = s.value(v).to_rows();
        let w = [1.0, 2.0, 0.5, -1.0];
        let b = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(rows[1], temporal_encode(2.5, &w, &b));
    }

    #[test]
    fn add_temporal_identities() {
        let mut store = ParamStore::new();
        let te = TemporalEncoding::from_values(&mut store, vec![0.3; 4], vec![1.0; 4]);
        let mut s = Session::eval(&store);
        let enc = te.encode(&mut s, &[1.0, 2.0]).unwrap();
        let zero = s.constant(Tensor::zeros(&[2, 4]));
        let z = add_temporal(&mut s, zero, enc).unwrap();
        assert_eq!(s.value(z), s.value(enc));
        let x = s.constant(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let none = s.constant(Tensor::zeros(&[2, 4]));
        let z = add_temporal(&mut s, x, none).unwrap();
        assert_eq!(s.value(z), s.value(x));
    }

    #[test]
    fn sinusoidal_rows_differ() {
        let p = sinusoidal_positions(3, 8);
        assert_eq!(p.row(0)[..2], [0.0, 1.0]);
        assert_ne!(p.row(1), p.row(2));
    }

    proptest! {
        #[test]
        fn encoding_is_bounded(t in -1e4f64..1e4, seed in 0u64..1000) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let te = TemporalEncoding::new(&mut store, 16, &mut rng);
            let w = store.get(te.freq).data().to_vec();
            let b = store.get(te.phase).data().to_vec();
            for v in temporal_encode(t, &w, &b) {
                prop_assert!(v.abs() <= 0.25);
            }
        }
    }
}
