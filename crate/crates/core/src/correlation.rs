//! Bidirectional cross-attention between the two platforms' encodings.
//!
//! Each direction projects its own sequence into layer-0 queries and the
//! opposite sequence into keys and values once; every layer then refines the
//! queries with `Q ← LN(Q + CrossAttn(Q, K, V))` against those fixed keys and
//! values. The last layer's head-averaged probabilities are the attention maps.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{ParamStore, Tensor, Var};
use crate::encoder::multi_head;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapDirection {
    AToB,
    BToA,
}

impl fmt::Display for MapDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapDirection::AToB => "A->B",
            MapDirection::BToA => "B->A",
        })
    }
}

/// Query-by-key attention probabilities, rows summing to one over valid keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub direction: MapDirection,
    pub matrix: Tensor,
}

impl AttentionMap {
    /// CSV with a header of key indices and one row per query.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_matrix_csv(w, &self.matrix)
    }
}

pub fn write_matrix_csv<W: Write>(w: W, m: &Tensor) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<String> = std::iter::once("query".to_string())
        .chain((0..m.cols()).map(|j| j.to_string()))
        .collect();
    out.write_record(&header)?;
    for i in 0..m.rows() {
        let row: Vec<String> = std::iter::once(i.to_string())
            .chain(m.row(i).iter().map(|v| format!("{v:?}")))
            .collect();
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Format(format!("matrix entry {v:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

#[derive(Clone, Debug)]
pub struct CrossAttnLayer {
    pub q: Linear,
    pub out: Linear,
    pub ln: LayerNorm,
}

/// One direction: queries from one platform attend to the other.
#[derive(Clone, Debug)]
pub struct CrossDirection {
    pub query_in: Linear,
    pub key: Linear,
    pub value: Linear,
    pub layers: Vec<CrossAttnLayer>,
}

impl CrossDirection {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, layers: usize, rng: &mut R) -> Self {
        Self {
            query_in: Linear::new(store, &format!("{name}.query_in"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            layers: (0..layers)
                .map(|l| CrossAttnLayer {
                    q: Linear::new(store, &format!("{name}.{l}.q"), d, d, rng),
                    out: Linear::new(store, &format!("{name}.{l}.out"), d, d, rng),
                    ln: LayerNorm::new(store, &format!("{name}.{l}.ln"), d),
                })
                .collect(),
        }
    }

    /// Refined queries and the last layer's head-averaged `kq×kk` map.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        s: &mut Session,
        queries: Var,
        keys: Var,
        query_valid: &[bool],
        key_valid: &[bool],
        heads: usize,
        dropout: f64,
    ) -> Result<(Var, Tensor)> {
        let k = self.key.forward(s, keys)?;
        let v = self.value.forward(s, keys)?;
        let mut q = self.query_in.forward(s, queries)?;
        let mut last = None;
        for layer in &self.layers {
            let qp = layer.q.forward(s, q)?;
            let (a, probs) = multi_head(s, qp, k, v, heads, query_valid, key_valid, dropout)?;
            let a = layer.out.forward(s, a)?;
            let r = s.tape.add(q, a)?;
            let n = layer.ln.forward(s, r)?;
            q = s.mask_rows(n, query_valid)?;
            last = Some(probs);
        }
        let probs = last.ok_or_else(|| Error::Validation("cross-attention needs at least one layer".into()))?;
        Ok((q, head_mean(&probs)))
    }
}

fn head_mean(probs: &Tensor) -> Tensor {
    let (h, kq, kk) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let mut out = vec![0.0; kq * kk];
    for head in probs.data().chunks(kq * kk) {
        for (o, p) in out.iter_mut().zip(head) {
            *o += p;
        }
    }
    out.iter_mut().for_each(|v| *v /= h as f64);
    Tensor::new(vec![kq, kk], out).expect("kq×kk")
}

#[derive(Clone, Debug)]
pub struct CorrelationBlock {
    pub a_to_b: CrossDirection,
    pub b_to_a: CrossDirection,
    pub heads: usize,
    pub dropout: f64,
}

pub struct CrossOutput {
    pub a: Var,
    pub b: Var,
    pub map_ab: AttentionMap,
    pub map_ba: AttentionMap,
}

impl CorrelationBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Validation("cross-attention needs at least one layer".into()));
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Validation(format!("d = {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            a_to_b: CrossDirection::new(store, "cab.a_to_b", d, layers, rng),
            b_to_a: CrossDirection::new(store, "cab.b_to_a", d, layers, rng),
            heads,
            dropout,
        })
    }

    pub fn layers(&self) -> usize {
        self.a_to_b.layers.len()
    }

    pub fn cross_attend_stack(
        &self,
        s: &mut Session,
        h_a: Var,
        h_b: Var,
        valid_a: &[bool],
        valid_b: &[bool],
    ) -> Result<CrossOutput> {
        for valid in [valid_a, valid_b] {
            if !valid.iter().any(|&v| v) {
                return Err(Error::DegenerateRow { row: 0 });
            }
        }
        let (a, map_ab) = self
            .a_to_b
            .run(s, h_a, h_b, valid_a, valid_b, self.heads, self.dropout)?;
        let (b, map_ba) = self
            .b_to_a
            .run(s, h_b, h_a, valid_b, valid_a, self.heads, self.dropout)?;
        Ok(CrossOutput {
            a,
            b,
            map_ab: AttentionMap {
                direction: MapDirection::AToB,
                matrix: map_ab,
            },
            map_ba: AttentionMap {
                direction: MapDirection::BToA,
                matrix: map_ba,
            },
        })
    }
}
