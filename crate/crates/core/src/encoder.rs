//! Multi-head attention and the pre-norm transformer encoder stacks.

use rand::Rng;

use crate::autodiff::{ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, Session};

/// Scaled dot-product attention over already projected `q` (`kq×d`), `k` and
/// `v` (`kk×d`), split into `heads` column blocks.
///
/// Returns the concatenated head outputs and the pre-dropout probabilities as
/// an `H×kq×kk` tensor whose padded query rows and key columns are zero.
#[allow(clippy::too_many_arguments)]
pub fn multi_head(
    s: &mut Session,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    query_valid: &[bool],
    key_valid: &[bool],
    dropout: f64,
) -> Result<(Var, Tensor)> {
    let (kq, d) = (s.value(q).rows(), s.value(q).cols());
    let kk = s.value(k).rows();
    if query_valid.len() != kq || key_valid.len() != kk {
        return Err(Error::Shape(format!(
            "masks of length {}/{} for {kq} queries and {kk} keys",
            query_valid.len(),
            key_valid.len()
        )));
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mask: Vec<bool> = (0..kq).flat_map(|_| key_valid.iter().copied()).collect();
    let mut probs = Vec::with_capacity(heads * kq * kk);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.tape.slice_cols(q, h * dk, dk)?;
        let kh = s.tape.slice_cols(k, h * dk, dk)?;
        let vh = s.tape.slice_cols(v, h * dk, dk)?;
        let kt = s.tape.transpose(kh)?;
        let raw = s.tape.matmul(qh, kt)?;
        let scores = s.tape.scale(raw, scale);
        let p = s.tape.softmax_masked(scores, &mask)?;
        let pv = s.value(p);
        for (i, &qv) in query_valid.iter().enumerate() {
            if qv {
                probs.extend_from_slice(pv.row(i));
            } else {
                probs.extend(std::iter::repeat_n(0.0, kk));
            }
        }
        let p = s.dropout(p, dropout)?;
        outs.push(s.tape.matmul(p, vh)?);
    }
    let out = if heads == 1 { outs[0] } else { s.tape.concat(&outs)? };
    Ok((out, Tensor::new(vec![heads, kq, kk], probs)?))
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Validation(format!("d = {d} is not divisible by {heads} heads")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, valid: &[bool], dropout: f64) -> Result<(Var, Tensor)> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let (a, probs) = multi_head(s, q, k, v, self.heads, valid, valid, dropout)?;
        Ok((self.out.forward(s, a)?, probs))
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))` with a 4d relu
/// hidden layer.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, 4 * d, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * d, d, rng),
            dropout,
        })
    }

    /// Padded rows enter and leave as zeros; the returned tensor holds the
    /// `H×k×k` attention probabilities.
    pub fn forward(&self, s: &mut Session, z: Var, valid: &[bool]) -> Result<(Var, Tensor)> {
        let x = s.mask_rows(z, valid)?;
        let h = self.ln_attn.forward(s, x)?;
        let (a, probs) = self.attn.forward(s, h, valid, self.dropout)?;
        let a = s.dropout(a, self.dropout)?;
        let x = s.tape.add(x, a)?;
        let h = self.ln_ff.forward(s, x)?;
        let f = self.ff_in.forward(s, h)?;
        let f = s.tape.relu(f);
        let f = self.ff_out.forward(s, f)?;
        let f = s.dropout(f, self.dropout)?;
        let x = s.tape.add(x, f)?;
        Ok((s.mask_rows(x, valid)?, probs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderRole {
    Temporal,
    Masked,
}

impl EncoderRole {
    fn prefix(self) -> &'static str {
        match self {
            EncoderRole::Temporal => "f_t",
            EncoderRole::Masked => "f_m",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub role: EncoderRole,
    pub blocks: Vec<TransformerBlock>,
}

impl EncoderStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        role: EncoderRole,
        depth: usize,
        d: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{}.{i}", role.prefix()), d, heads, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self { role, blocks })
    }

    pub fn encode(&self, s: &mut Session, z: Var, valid: &[bool]) -> Result<Var> {
        Ok(self.encode_traced(s, z, valid)?.0)
    }

    /// Like [`EncoderStack::encode`], also returning every block's attention.
    pub fn encode_traced(&self, s: &mut Session, z: Var, valid: &[bool]) -> Result<(Var, Vec<Tensor>)> {
        if !valid.iter().any(|&v| v) {
            return Err(Error::DegenerateRow { row: 0 });
        }
        let mut x = z;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, probs) = block.forward(s, x, valid)?;
            x = y;
            maps.push(probs);
        }
        Ok((x, maps))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn stack(depth: usize, d: usize, heads: usize, seed: u64) -> (ParamStore, EncoderStack) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderStack::new(&mut store, EncoderRole::Temporal, depth, d, heads, 0.1, &mut rng).unwrap();
        (store, enc)
    }

    fn input(k: usize, d: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[k, d], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, enc) = stack(1, 8, 2, 0);
        let mut s = Session::eval(&store);
        let z = s.constant(input(1, 8, 1));
        let (h, maps) = enc.encode_traced(&mut s, z, &[true]).unwrap();
        assert_eq!(s.value(h).shape(), &[1, 8]);
        assert_eq!(maps[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn attention_shape_and_rows() {
        let (store, enc) = stack(2, 8, 2, 3);
        let mut s = Session::eval(&store);
        let z = s.constant(input(4, 8, 4));
        let (h, maps) = enc.encode_traced(&mut s, z, &[true; 4]).unwrap();
        assert_eq!(s.value(h).shape(), &[4, 8]);
        for m in &maps {
            assert_eq!(m.shape(), &[2, 4, 4]);
            for row in m.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (store, enc) = stack(2, 8, 2, 5);
        let x = input(3, 8, 6);
        let rows = x.to_rows();
        let swapped = Tensor::from_rows(&[rows[1].clone(), rows[0].clone(), rows[2].clone()]).unwrap();
        let mut s = Session::eval(&store);
        let a = s.constant(x);
        let b = s.constant(swapped);
        let ha = enc.encode(&mut s, a, &[true; 3]).unwrap();
        let hb = enc.encode(&mut s, b, &[true; 3]).unwrap();
        let (ra, rb) = (s.value(ha).to_rows(), s.value(hb).to_rows());
        for (i, j) in [(0, 1), (1, 0), (2, 2)] {
            for (u, v) in ra[i].iter().zip(&rb[j]) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_depth_is_identity() {
        let (store, enc) = stack(0, 8, 2, 0);
        let mut s = Session::eval(&store);
        let z = s.constant(input(3, 8, 1));
        let h = enc.encode(&mut s, z, &[true; 3]).unwrap();
        assert_eq!(s.value(h), s.value(z));
    }

    #[test]
    fn padding_is_isolated() {
        let (store, enc) = stack(2, 8, 2, 7);
        let valid = [true, true, false, true, false];
        let x = input(5, 8, 8);
        let mut y = x.clone();
        for r in [2, 4] {
            for j in 0..8 {
                y.data_mut()[r * 8 + j] = 100.0 * (j as f64 + 1.0);
            }
        }
        let mut s = Session::eval(&store);
        let a = s.constant(x);
        let b = s.constant(y);
        let (ha, ma) = enc.encode_traced(&mut s, a, &valid).unwrap();
        let (hb, _) = enc.encode_traced(&mut s, b, &valid).unwrap();
        assert_eq!(s.value(ha), s.value(hb));
        for r in [2, 4] {
            assert!(s.value(ha).row(r).iter().all(|&v| v == 0.0));
        }
        for m in &ma {
            for (idx, &p) in m.data().iter().enumerate() {
                let (q, key) = ((idx / 5) % 5, idx % 5);
                if !valid[q] || !valid[key] {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_configs_and_empty_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(EncoderStack::new(&mut store, EncoderRole::Masked, 1, 8, 3, 0.1, &mut rng).is_err());
        let (store, enc) = stack(1, 8, 2, 0);
        let mut s = Session::eval(&store);
        let z = s.constant(input(2, 8, 1));
        assert!(matches!(
            enc.encode(&mut s, z, &[false, false]),
            Err(Error::DegenerateRow { .. })
        ));
    }
}
