//! Reverse-mode autodiff over a flat tape of eagerly evaluated ops.
//!
//! Each forward call appends a node holding the computed value; `backward`
//! walks the tape in reverse and accumulates gradients into named parameter
//! leaves. No fusion, no graph rewriting.

use std::collections::{BTreeMap, HashMap};

use crate::error::{LdError, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-12;
const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddRow,
    MulRow,
    Matmul,
    /// a · bᵀ
    MatmulNT,
    Gelu,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Log,
    Sum,
    Mean,
    Embed { ids: Vec<u32> },
    Rows { indices: Vec<usize> },
    SliceCols { start: usize, len: usize },
    ConcatRows,
    ConcatCols,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Parameter name → gradient tensor (same shape as the parameter).
#[derive(Debug, Clone, Default)]
pub struct GradientMap(pub BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_ids: HashMap<String, NodeId>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> LdError {
    LdError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![], t)
    }

    /// Binds a named parameter leaf; rebinding the same name returns the
    /// existing node so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, t: Tensor) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            vec![],
            t,
        );
        self.param_ids.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("sub", ta, tb));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub, vec![a, b], out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(c), vec![a], out)
    }

    /// Matrix + broadcast row vector.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for i in 0..ta.rows() {
            for j in 0..c {
                data[i * c + j] += tr.data()[j];
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow, vec![a, row], out))
    }

    /// Matrix ∘ broadcast row vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(mismatch("mul_row", ta, tr));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for i in 0..ta.rows() {
            for j in 0..c {
                data[i * c + j] *= tr.data()[j];
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::MulRow, vec![a, row], out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += av * tb.data()[p * n + j];
                }
            }
        }
        let shape = if ta.shape().len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Matmul, vec![a, b], out))
    }

    /// a · bᵀ with b stored row-major; used for attention scores and the
    /// batched similarity matrix.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += ta.data()[i * k + p] * tb.data()[j * k + p];
                }
                data[i * n + j] = s;
            }
        }
        let shape = if ta.shape().len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::MatmulNT, vec![a, b], out))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| gelu_tanh(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu, vec![a], out)
    }

    /// Per-row layer normalization without affine scaling. A zero-variance
    /// row normalizes to zeros (eps inside the square root).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::LayerNorm, vec![a], out)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), softmax_rows(ta)).expect("same shape");
        self.push(Op::Softmax, vec![a], out)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for j in 0..c {
                data[i * c + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::LogSoftmax, vec![a], out)
    }

    /// Elementwise ln(x + eps); eps keeps zero inputs finite.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| (x + LOG_EPS).ln()).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Log, vec![a], out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push(Op::Mean, vec![a], Tensor::scalar(s))
    }

    /// Row lookup into an embedding table by token id.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(LdError::TokenOutOfVocab {
                    id,
                    vocab: v as u32,
                });
            }
            data.extend_from_slice(tt.row(id as usize));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(Op::Embed { ids: ids.to_vec() }, vec![table], out))
    }

    /// Select rows by index (duplicates allowed).
    pub fn rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(LdError::InvalidArgument(format!(
                    "row index {} out of range ({} rows)",
                    i, r
                )));
            }
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push(
            Op::Rows {
                indices: indices.to_vec(),
            },
            vec![a],
            out,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start + len > c {
            return Err(LdError::InvalidArgument(format!(
                "column slice {}..{} out of range ({} cols)",
                start,
                start + len,
                c
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        Ok(self.push(Op::SliceCols { start, len }, vec![a], out))
    }

    /// Stack inputs vertically; all must share column width.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(LdError::EmptyInput("concat_rows"));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != c {
                return Err(mismatch("concat_rows", self.value(parts[0]), tp));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.push(Op::ConcatRows, parts.to_vec(), out))
    }

    /// Stack inputs horizontally; all must share row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(LdError::EmptyInput("concat_cols"));
        }
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let tp = self.value(p);
            if tp.rows() != r {
                return Err(mismatch("concat_cols", self.value(parts[0]), tp));
            }
            let w = widths[idx];
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(tp.row(i));
            }
            off += w;
        }
        let out = Tensor::matrix(r, total, data)?;
        Ok(self.push(Op::ConcatCols, parts.to_vec(), out))
    }

    /// Reverse pass from a scalar loss node. Every parameter leaf bound to
    /// the graph gets an entry; leaves off the loss path get exact zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap> {
        if !self.value(loss).is_scalar() {
            return Err(LdError::InvalidShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                msg: "loss node must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let inputs = self.nodes[id].inputs.clone();
            match &self.nodes[id].op {
                Op::Leaf { .. } => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add => {
                    self.accumulate(&mut grads, inputs[0], g.clone());
                    self.accumulate(&mut grads, inputs[1], g);
                }
                Op::Sub => {
                    self.accumulate(&mut grads, inputs[0], g.clone());
                    let neg =
                        Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| -x).collect())?;
                    self.accumulate(&mut grads, inputs[1], neg);
                }
                Op::Mul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let da = elementwise(&g, self.value(b), |x, y| x * y);
                    let db = elementwise(&g, self.value(a), |x, y| x * y);
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::Scale(c) => {
                    let c = *c;
                    let da =
                        Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| x * c).collect())?;
                    self.accumulate(&mut grads, inputs[0], da);
                }
                Op::AddRow => {
                    let row_shape = self.value(inputs[1]).shape().to_vec();
                    let c = g.cols();
                    let mut drow = vec![0.0; c];
                    for i in 0..g.rows() {
                        for j in 0..c {
                            drow[j] += g.data()[i * c + j];
                        }
                    }
                    self.accumulate(&mut grads, inputs[0], g);
                    self.accumulate(&mut grads, inputs[1], Tensor::new(row_shape, drow)?);
                }
                Op::MulRow => {
                    let (a, row) = (inputs[0], inputs[1]);
                    let ta = self.value(a).clone();
                    let tr = self.value(row).clone();
                    let c = g.cols();
                    let mut da = vec![0.0; ta.len()];
                    let mut drow = vec![0.0; c];
                    for i in 0..g.rows() {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            da[i * c + j] = gv * tr.data()[j];
                            drow[j] += gv * ta.data()[i * c + j];
                        }
                    }
                    self.accumulate(&mut grads, a, Tensor::new(ta.shape().to_vec(), da)?);
                    self.accumulate(&mut grads, row, Tensor::new(tr.shape().to_vec(), drow)?);
                }
                Op::Matmul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * tb.data()[p * n + j];
                                db[p * n + j] += gv * ta.data()[i * k + p];
                            }
                        }
                    }
                    let da = Tensor::new(ta.shape().to_vec(), da)?;
                    let db = Tensor::new(tb.shape().to_vec(), db)?;
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::MatmulNT => {
                    let (a, b) = (inputs[0], inputs[1]);
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * tb.data()[j * k + p];
                                db[j * k + p] += gv * ta.data()[i * k + p];
                            }
                        }
                    }
                    let da = Tensor::new(ta.shape().to_vec(), da)?;
                    let db = Tensor::new(tb.shape().to_vec(), db)?;
                    self.accumulate(&mut grads, a, da);
                    self.accumulate(&mut grads, b, db);
                }
                Op::Gelu => {
                    let ta = self.value(inputs[0]);
                    let data: Vec<f64> = ta
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| gv * gelu_tanh_grad(x))
                        .collect();
                    self.accumulate(
                        &mut grads,
                        inputs[0],
                        Tensor::new(ta.shape().to_vec(), data)?,
                    );
                }
                Op::LayerNorm => {
                    let ta = self.value(inputs[0]);
                    let ty = &self.nodes[id].value;
                    let (r, c) = (ta.rows(), ta.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let row = &ta.data()[i * c..(i + 1) * c];
                        let yrow = &ty.data()[i * c..(i + 1) * c];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var =
                            row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let g_mean = grow.iter().sum::<f64>() / c as f64;
                        let gy_mean = grow
                            .iter()
                            .zip(yrow)
                            .map(|(gv, yv)| gv * yv)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv * (grow[j] - g_mean - yrow[j] * gy_mean);
                        }
                    }
                    self.accumulate(&mut grads, inputs[0], Tensor::new(ta.shape().to_vec(), dx)?);
                }
                Op::Softmax => {
                    let ty = &self.nodes[id].value;
                    let (r, c) = (ty.rows(), ty.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let p = &ty.data()[i * c..(i + 1) * c];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let dot = p.iter().zip(grow).map(|(pv, gv)| pv * gv).sum::<f64>();
                        for j in 0..c {
                            dx[i * c + j] = p[j] * (grow[j] - dot);
                        }
                    }
                    let shape = self.value(inputs[0]).shape().to_vec();
                    self.accumulate(&mut grads, inputs[0], Tensor::new(shape, dx)?);
                }
                Op::LogSoftmax => {
                    let ty = &self.nodes[id].value;
                    let (r, c) = (ty.rows(), ty.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let lsm = &ty.data()[i * c..(i + 1) * c];
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let gsum = grow.iter().sum::<f64>();
                        for j in 0..c {
                            dx[i * c + j] = grow[j] - lsm[j].exp() * gsum;
                        }
                    }
                    let shape = self.value(inputs[0]).shape().to_vec();
                    self.accumulate(&mut grads, inputs[0], Tensor::new(shape, dx)?);
                }
                Op::Log => {
                    let ta = self.value(inputs[0]);
                    let data: Vec<f64> = ta
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gv)| gv / (x + LOG_EPS))
                        .collect();
                    self.accumulate(
                        &mut grads,
                        inputs[0],
                        Tensor::new(ta.shape().to_vec(), data)?,
                    );
                }
                Op::Sum => {
                    let ta = self.value(inputs[0]);
                    let gv = g.scalar_value();
                    let data = vec![gv; ta.len()];
                    self.accumulate(
                        &mut grads,
                        inputs[0],
                        Tensor::new(ta.shape().to_vec(), data)?,
                    );
                }
                Op::Mean => {
                    let ta = self.value(inputs[0]);
                    let gv = g.scalar_value() / ta.len() as f64;
                    let data = vec![gv; ta.len()];
                    self.accumulate(
                        &mut grads,
                        inputs[0],
                        Tensor::new(ta.shape().to_vec(), data)?,
                    );
                }
                Op::Embed { ids } => {
                    let ids = ids.clone();
                    let tt = self.value(inputs[0]);
                    let d = tt.cols();
                    let mut dt = vec![0.0; tt.len()];
                    for (pos, &tokid) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[tokid as usize * d + j] += g.data()[pos * d + j];
                        }
                    }
                    self.accumulate(&mut grads, inputs[0], Tensor::new(tt.shape().to_vec(), dt)?);
                }
                Op::Rows { indices } => {
                    let indices = indices.clone();
                    let ta = self.value(inputs[0]);
                    let c = ta.cols();
                    let mut da = vec![0.0; ta.len()];
                    for (pos, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            da[i * c + j] += g.data()[pos * c + j];
                        }
                    }
                    self.accumulate(&mut grads, inputs[0], Tensor::new(ta.shape().to_vec(), da)?);
                }
                Op::SliceCols { start, len } => {
                    let (start, len) = (*start, *len);
                    let ta = self.value(inputs[0]);
                    let (r, c) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..len {
                            da[i * c + start + j] = g.data()[i * len + j];
                        }
                    }
                    self.accumulate(&mut grads, inputs[0], Tensor::new(ta.shape().to_vec(), da)?);
                }
                Op::ConcatRows => {
                    let c = g.cols();
                    let mut off = 0;
                    for &p in &inputs {
                        let tp = self.value(p);
                        let r = tp.rows();
                        let part = Tensor::new(
                            tp.shape().to_vec(),
                            g.data()[off * c..(off + r) * c].to_vec(),
                        )?;
                        off += r;
                        self.accumulate(&mut grads, p, part);
                    }
                }
                Op::ConcatCols => {
                    let total = g.cols();
                    let r = g.rows();
                    let mut off = 0;
                    for &p in &inputs {
                        let tp = self.value(p);
                        let w = tp.cols();
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        off += w;
                        self.accumulate(&mut grads, p, Tensor::new(tp.shape().to_vec(), data)?);
                    }
                }
            }
        }

        let mut map = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let grad = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros_like(&node.value));
                map.insert(name.clone(), grad);
            }
        }
        Ok(GradientMap(map))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = &t.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            data[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            data[i * c + j] /= sum;
        }
    }
    data
}

/// Evaluates the scalar loss and all parameter gradients in one pass.
pub fn value_and_grad(graph: &mut Graph, loss: NodeId) -> Result<(f64, GradientMap)> {
    let value = graph.value(loss);
    if !value.is_scalar() {
        return Err(LdError::InvalidShape {
            op: "value_and_grad",
            shape: value.shape().to_vec(),
            msg: "loss node must be scalar".into(),
        });
    }
    let v = value.scalar_value();
    let grads = graph.backward(loss)?;
    Ok((v, grads))
}

/// Central-difference gradient oracle: (f(p+h·e) − f(p−h·e)) / 2h per
/// coordinate of every parameter. Test harness only; O(#params) evaluations.
pub fn finite_diff_grad<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    step: f64,
) -> Result<GradientMap>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(LdError::InvalidArgument("step must be positive".into()));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let n = params[&name].len();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = work[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            grad[i] = (plus - minus) / (2.0 * step);
        }
        let shape = params[&name].shape().to_vec();
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(GradientMap(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let i = g.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap());
        let out = g.matmul(a, i).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        for c in [-3.0, 0.0, 7.5] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(vec![c; 4]));
            let out = g.softmax(x);
            for v in g.value(out).data() {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![5.0; 8]));
        let out = g.layer_norm(x);
        for v in g.value(out).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn quadratic_value_and_grad() {
        // f(x) = x·x at x=[1,2] → value 5, grad [2,4]
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let (v, grads) = value_and_grad(&mut g, loss).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_sum_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![0.3, -1.2, 2.5]));
        let p = g.softmax(x);
        let loss = g.sum(p);
        let (v, grads) = value_and_grad(&mut g, loss).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        for gv in grads.get("x").unwrap().data() {
            assert!(gv.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0]));
        assert!(value_and_grad(&mut g, x).is_err());
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0]));
        let _unused = g.param("y", Tensor::vector(vec![3.0, 4.0]));
        let loss = g.sum(x);
        let (_, grads) = value_and_grad(&mut g, loss).unwrap();
        assert_eq!(grads.get("y").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::vector(vec![1.0]));
        let g3 = finite_diff_grad(|p| Ok(3.0 * p["x"].data()[0]), &params, 1e-5).unwrap();
        assert!((g3.get("x").unwrap().data()[0] - 3.0).abs() < 1e-9);

        params.insert("x".to_string(), Tensor::vector(vec![2.0]));
        let gsq = finite_diff_grad(|p| Ok(p["x"].data()[0].powi(2)), &params, 1e-5).unwrap();
        assert!((gsq.get("x").unwrap().data()[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn mlp_grads_match_finite_differences() {
        // 3-layer MLP with gelu, random-ish fixed weights.
        let mut params = BTreeMap::new();
        let w = |seed: u64, n: usize| {
            // tiny deterministic pseudo-random fill
            let mut v = Vec::with_capacity(n);
            let mut s = seed;
            for _ in 0..n {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.push(((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0);
            }
            v
        };
        params.insert("w1".into(), Tensor::matrix(3, 4, w(1, 12)).unwrap());
        params.insert("w2".into(), Tensor::matrix(4, 4, w(2, 16)).unwrap());
        params.insert("w3".into(), Tensor::matrix(4, 2, w(3, 8)).unwrap());
        let input = Tensor::vector(w(9, 3));

        let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let w1 = g.param("w1", p["w1"].clone());
            let w2 = g.param("w2", p["w2"].clone());
            let w3 = g.param("w3", p["w3"].clone());
            let h1 = g.matmul(x, w1)?;
            let h1 = g.gelu(h1);
            let h2 = g.matmul(h1, w2)?;
            let h2 = g.gelu(h2);
            let h3 = g.matmul(h2, w3)?;
            let sq = g.mul(h3, h3)?;
            let loss = g.sum(sq);
            Ok(g.value(loss).scalar_value())
        };

        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let w1 = g.param("w1", params["w1"].clone());
        let w2 = g.param("w2", params["w2"].clone());
        let w3 = g.param("w3", params["w3"].clone());
        let h1 = g.matmul(x, w1).unwrap();
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, w2).unwrap();
        let h2 = g.gelu(h2);
        let h3 = g.matmul(h2, w3).unwrap();
        let sq = g.mul(h3, h3).unwrap();
        let loss = g.sum(sq);
        let (_, analytic) = value_and_grad(&mut g, loss).unwrap();
        let numeric = finite_diff_grad(eval, &params, 1e-5).unwrap();

        for (name, ag) in analytic.iter() {
            let ng = numeric.get(name).unwrap();
            for (a, n) in ag.data().iter().zip(ng.data()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < 1e-4,
                    "{name}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.param("x", Tensor::vector(vec![0.7, -0.2, 1.9]));
            let w = g.param("w", Tensor::matrix(3, 3, vec![0.1; 9]).unwrap());
            let h = g.matmul(x, w).unwrap();
            let h = g.gelu(h);
            let p = g.softmax(h);
            let lp = g.log(p);
            let loss = g.mean(lp);
            value_and_grad(&mut g, loss).unwrap()
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert!(v1.to_bits() == v2.to_bits());
        for (name, t1) in g1.iter() {
            let t2 = g2.get(name).unwrap();
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
