use std::collections::HashMap;

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Variance floor used by [`Tape::layer_norm`].
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    MaskedMean {
        x: Var,
        valid: Vec<bool>,
    },
    Relu(Var),
    Sigmoid(Var),
    Cos(Var),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    WeightedBce {
        probs: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order of the computation DAG and backward is a single reverse
/// sweep that visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    done: bool,
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // logical A is m×k; when a_t the buffer holds its k×m transpose
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n index ranges
    // addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: impl IntoIterator<Item = f64>, len: usize) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    for (b, v) in buf.iter_mut().zip(g) {
        *b += v;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// that every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Copies the value of `v` into a new leaf that gradients never cross.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let shape = self.nodes[v.0].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    /// Adds the gradients of every parameter leaf into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Gradients) {
        for (&id, &v) in &self.params {
            if let Some(Some(g)) = self.grads.get(v.0) {
                out.add_into(id, g);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a vector of length `cols(x)` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return shape_err(format!(
                "row bias of {} values for {} columns",
                self.value(bias).len(),
                c
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect()).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Concatenates along the last axis. All inputs must agree on row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let rows = self.value(first).rows();
        let lead: Vec<usize> = {
            let s = self.value(first).shape();
            s[..s.len() - 1].to_vec()
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return shape_err("concat operands disagree on row count");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if len == 0 || start + len > c {
            return shape_err(format!("column slice {start}..{} of {c}", start + len));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Mean over the rows flagged valid, producing a `1×cols` row.
    pub fn masked_mean(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if valid.len() != t.rows() {
            return shape_err(format!("{} mask entries for {} rows", valid.len(), t.rows()));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::DegenerateRow { row: 0 });
        }
        let c = t.cols();
        let mut out = vec![0.0; c];
        for (r, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![1, c], out)?,
            Op::MaskedMean {
                x,
                valid: valid.to_vec(),
            },
            rg,
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Active/inactive pattern of every relu input on the tape, one flag per
    /// element in tape order. The recorded function is smooth between two
    /// evaluations that share this pattern and the same discrete choices.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.map(x, f64::cos, Op::Cos(x))
    }

    /// Inverted dropout. With `rng == None` or `rate == 0` this is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, keep }, rg))
    }

    /// Rows `ids` of `table`, as an `ids.len()×cols` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.rows(), t.cols());
        if ids.is_empty() {
            return shape_err("gather with no indices");
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= rows {
                return Err(Error::Vocabulary { token: i, size: rows });
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return shape_err(format!("transpose of {:?}", t.shape()));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg))
    }

    /// Row-wise softmax restricted to `valid` positions (same length as `x`);
    /// invalid positions come out as exactly zero.
    pub fn softmax_masked(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if valid.len() != t.len() {
            return shape_err(format!("{} mask entries for {} values", valid.len(), t.len()));
        }
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let mask = &valid[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if mask[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Normalizes every row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return shape_err(format!("layer norm affine parameters for {c} columns"));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = Vec::with_capacity(t.rows());
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Class-weighted binary cross-entropy averaged over the batch.
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn weighted_bce(&mut self, probs: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        let n = p.len();
        if labels.is_empty() {
            return Err(Error::Contract("binary cross-entropy of an empty batch".into()));
        }
        if labels.len() != n || weights.len() != n {
            return shape_err(format!(
                "{n} probabilities, {} labels, {} weights",
                labels.len(),
                weights.len()
            ));
        }
        let loss = p
            .data()
            .iter()
            .zip(labels)
            .zip(weights)
            .map(|((&q, &y), &w)| {
                let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
                w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            * (-1.0 / n as f64);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of every node that requires them with respect to
    /// the scalar `loss`. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = out.cols();
                if self.rg(*a) {
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, g, false, self.value(*b).data(), true, buf);
                }
                if self.rg(*b) {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, self.value(*a).data(), true, g, false, buf);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], g.iter().copied(), g.len());
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.iter().copied(), g.len());
                }
                if self.rg(*bias) {
                    let c = out.cols();
                    let mut col = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        col[i % c] += v;
                    }
                    accumulate(&mut grads[bias.0], col, c);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(vb).map(|(g, y)| g * y), g.len());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(va).map(|(g, x)| g * x), g.len());
                }
            }
            Op::Scale(x, s) => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * s), g.len());
                }
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.rg(*p) {
                        let buf = grads[p.0].get_or_insert_with(|| vec![0.0; rows * c]);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            for (d, s) in buf[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let src = self.value(*x);
                    let (rows, c, len) = (src.rows(), src.cols(), out.cols());
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; rows * c]);
                    for r in 0..rows {
                        for j in 0..len {
                            buf[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::MaskedMean { x, valid } => {
                if self.rg(*x) {
                    let src = self.value(*x);
                    let c = src.cols();
                    let count = valid.iter().filter(|&&v| v).count() as f64;
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; src.len()]);
                    for (r, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
                        for j in 0..c {
                            buf[r * c + j] += g[j] / count;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x).data();
                    accumulate(
                        &mut grads[x.0],
                        g.iter().zip(xs).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }),
                        g.len(),
                    );
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    accumulate(
                        &mut grads[x.0],
                        g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)),
                        g.len(),
                    );
                }
            }
            Op::Cos(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x).data();
                    accumulate(&mut grads[x.0], g.iter().zip(xs).map(|(g, v)| -g * v.sin()), g.len());
                }
            }
            Op::Dropout { x, keep } => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.iter().zip(keep).map(|(g, k)| g * k), g.len());
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let t = self.value(*table);
                    let c = t.cols();
                    let buf = grads[table.0].get_or_insert_with(|| vec![0.0; t.len()]);
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    // out is c×r; source is r×c
                    let (c, r) = (out.rows(), out.cols());
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let c = out.cols();
                    let y = out.data();
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; y.len()]);
                    for r in 0..out.rows() {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let rows = out.rows();
                if self.rg(*gain) {
                    let mut dg = vec![0.0; c];
                    for (i, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % c] += gv * h;
                    }
                    accumulate(&mut grads[gain.0], dg, c);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                    accumulate(&mut grads[bias.0], db, c);
                }
                if self.rg(*x) {
                    let gamma = self.value(*gain).data();
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; rows * c]);
                    for r in 0..rows {
                        let hs = &xhat[r * c..(r + 1) * c];
                        let dh: Vec<f64> = (0..c).map(|j| g[r * c + j] * gamma[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hs).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[r * c + j] += rstd[r] * (dh[j] - mean_dh - hs[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    accumulate(&mut grads[x.0], std::iter::repeat_n(g[0], n), n);
                }
            }
            Op::WeightedBce { probs, labels, weights } => {
                if self.rg(*probs) {
                    let p = self.value(*probs).data();
                    let n = p.len() as f64;
                    let d = p.iter().zip(labels).zip(weights).map(|((&q, &y), &w)| {
                        if q <= BCE_EPS || q >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            -g[0] * w / n * (y / q - (1.0 - y) / (1.0 - q))
                        }
                    });
                    accumulate(&mut grads[probs.0], d, p.len());
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
