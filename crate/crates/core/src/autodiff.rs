//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a single-use Wengert tape: the forward pass records
//! tensor-granular operations, `backward()` replays them in reverse.
//! Only the primitives the model and losses need are provided; there is
//! no broadcasting beyond row-bias addition and no view machinery.
//!
//! All tape arithmetic runs in 64-bit. Parameters are quantized to f32
//! values at creation and after optimizer steps (see [`Tensor::quantize_f32`]),
//! which is what checkpointing persists.

use crate::error::{Error, Result};

/// Dense n-dimensional array with optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rounds every element to the nearest f32. Parameters live on this
    /// sub-lattice so checkpoints round-trip bit-exactly.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

pub type NodeId = usize;

enum Op {
    Leaf,
    Constant,
    /// C = A·B, with A (m×k), B (k×n).
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Adds a length-C row vector to every row of a (R×C) matrix.
    AddRow { a: NodeId, row: NodeId, cols: usize },
    Scale { a: NodeId, c: f64 },
    Silu { a: NodeId },
    /// Row-wise softmax of logits/tau. Caches the output (it is its own
    /// backward ingredient).
    SoftmaxRows { a: NodeId, tau: f64, cols: usize },
    /// y = ln(max(x, floor)) elementwise.
    Ln { a: NodeId, floor: f64 },
    /// y = ln sigmoid(x) elementwise.
    LogSigmoid { a: NodeId },
    /// Row sums of a (R×C) matrix.
    SumRows { a: NodeId, cols: usize },
    SumAll { a: NodeId },
    /// out[t] = ln(max(probs[t, ids[t]], floor)) for a (T×V) row-stochastic matrix.
    GatherLog { probs: NodeId, ids: Vec<usize>, cols: usize, floor: f64 },
    /// Rows of an embedding table selected by token id.
    Embed { table: NodeId, ids: Vec<usize>, cols: usize },
    /// Per-row affine normalization with gain/bias; caches (mean, inv_std).
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, cols: usize, cache: Vec<(f64, f64)> },
    /// Multi-head causal self-attention over (T×d) q/k/v; caches the
    /// attention weights (heads × T × T, lower triangular).
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, n_heads: usize, t: usize, d: usize, att: Vec<f64> },
    /// Mean next-token NLL of (T×V) logits against targets; caches softmax rows.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, cols: usize, probs: Vec<f64> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Probability floor applied inside every log of a probability.
pub const PROB_FLOOR: f64 = 1e-8;

/// Single-use recording tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    spent: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), spent: false }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { data, shape, requires_grad, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> NodeId {
        self.push(data, shape, false, Op::Constant)
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Gradient of the last backward() target w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).map(|g| g.as_slice())
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn rows_cols(&self, id: NodeId) -> Result<(usize, usize)> {
        let s = &self.nodes[id].shape;
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::ShapeMismatch(format!("expected 1-D or 2-D, got {:?}", s))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rows_cols(a)?;
        let (k2, n) = self.rows_cols(b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims disagree: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.nodes[a].data, &self.nodes[b].data, m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(data, shape, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let data = zip_map(&self.nodes[a].data, &self.nodes[b].data, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(a)?;
        if self.nodes[row].data.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "add_row: row length {} vs {} columns",
                self.nodes[row].data.len(),
                c
            )));
        }
        let mut data = self.nodes[a].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[row].data[j];
            }
        }
        let rg = self.rg(a) || self.rg(row);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(data, shape, rg, Op::AddRow { a, row, cols: c }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(data, shape, rg, Op::Scale { a, c })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(data, shape, rg, Op::Silu { a })
    }

    /// Row-wise `Softmax(x/tau)` with max-subtraction. `tau` must be positive;
    /// tau = 0 belongs to the decoding layer (argmax), never here.
    pub fn softmax_rows(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("softmax temperature must be > 0, got {tau}")));
        }
        let (r, c) = self.rows_cols(a)?;
        if self.nodes[a].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax over non-finite logits".into()));
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_temp_into(&self.nodes[a].data[i * c..(i + 1) * c], tau, &mut data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(data, shape, rg, Op::SoftmaxRows { a, tau, cols: c }))
    }

    pub fn ln(&mut self, a: NodeId, floor: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.max(floor).ln()).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(data, shape, rg, Op::Ln { a, floor })
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| log_sigmoid(x)).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(data, shape, rg, Op::LogSigmoid { a })
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(a)?;
        let data: Vec<f64> = (0..r)
            .map(|i| self.nodes[a].data[i * c..(i + 1) * c].iter().sum())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(data, vec![r], rg, Op::SumRows { a, cols: c }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], rg, Op::SumAll { a })
    }

    /// `out[t] = ln probs[t, ids[t]]` with the probability floor.
    /// Rows of `probs` are expected to be distributions.
    pub fn gather_log(&mut self, probs: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (r, c) = self.rows_cols(probs)?;
        if ids.len() != r {
            return Err(Error::ShapeMismatch(format!("gather_log: {} indices for {} rows", ids.len(), r)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return Err(Error::IndexOutOfRange(format!("token id {bad} >= vocab {c}")));
        }
        let data: Vec<f64> = ids
            .iter()
            .enumerate()
            .map(|(t, &i)| self.nodes[probs].data[t * c + i].max(PROB_FLOOR).ln())
            .collect();
        let rg = self.rg(probs);
        Ok(self.push(data, vec![r], rg, Op::GatherLog { probs, ids: ids.to_vec(), cols: c, floor: PROB_FLOOR }))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, c) = self.rows_cols(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange(format!("embedding id {bad} >= table rows {rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&self.nodes[table].data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(data, vec![ids.len(), c], rg, Op::Embed { table, ids: ids.to_vec(), cols: c }))
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.rows_cols(a)?;
        if self.nodes[gain].data.len() != c || self.nodes[bias].data.len() != c {
            return Err(Error::ShapeMismatch("layer_norm gain/bias width".into()));
        }
        let mut data = vec![0.0; r * c];
        let mut cache = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.nodes[a].data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xh = (row[j] - mean) * inv_std;
                data[i * c + j] = self.nodes[gain].data[j] * xh + self.nodes[bias].data[j];
            }
            cache.push((mean, inv_std));
        }
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(data, shape, rg, Op::LayerNorm { a, gain, bias, cols: c, cache }))
    }

    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize) -> Result<NodeId> {
        let (t, d) = self.rows_cols(q)?;
        if self.rows_cols(k)? != (t, d) || self.rows_cols(v)? != (t, d) {
            return Err(Error::ShapeMismatch("attention q/k/v shapes disagree".into()));
        }
        if d % n_heads != 0 {
            return Err(Error::ShapeMismatch(format!("width {d} not divisible by {n_heads} heads")));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = &self.nodes[q].data;
        let kd = &self.nodes[k].data;
        let vd = &self.nodes[v].data;
        let mut att = vec![0.0; n_heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..t {
                for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                    let mut dot = 0.0;
                    for x in 0..dh {
                        dot += qd[i * d + off + x] * kd[j * d + off + x];
                    }
                    *s = dot * scale;
                }
                let arow = &mut att[h * t * t + i * t..h * t * t + i * t + i + 1];
                softmax_temp_into(&scores[..i + 1], 1.0, arow);
                for j in 0..=i {
                    let a = arow[j];
                    for x in 0..dh {
                        out[i * d + off + x] += a * vd[j * d + off + x];
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, vec![t, d], rg, Op::CausalAttention { q, k, v, n_heads, t, d, att }))
    }

    /// Mean next-token negative log-likelihood.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (t, v) = self.rows_cols(logits)?;
        if targets.len() != t {
            return Err(Error::ShapeMismatch(format!("cross_entropy: {} targets for {} rows", targets.len(), t)));
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange(format!("target {bad} >= vocab {v}")));
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for i in 0..t {
            softmax_temp_into(&self.nodes[logits].data[i * v..(i + 1) * v], 1.0, &mut probs[i * v..(i + 1) * v]);
            loss -= probs[i * v + targets[i]].max(PROB_FLOOR).ln();
        }
        loss /= t as f64;
        let rg = self.rg(logits);
        Ok(self.push(vec![loss], vec![1], rg, Op::CrossEntropy { logits, targets: targets.to_vec(), cols: v, probs }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar node. The tape is single-use: a second
    /// call is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.spent {
            return Err(Error::TapeSpent);
        }
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.spent = true;
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        self.grads[loss][0] = 1.0;
        for id in (0..=loss).rev() {
            if self.grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Split off the upstream gradient to appease the borrow checker.
            let g = std::mem::take(&mut self.grads[id]);
            self.accumulate(id, &g);
            self.grads[id] = g;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: &[f64]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, &self.nodes[b].data, m, n, k, &mut da);
                    add_into(&mut self.grads[a], &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(&self.nodes[a].data, g, m, k, n, &mut db);
                    add_into(&mut self.grads[b], &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    add_into(&mut self.grads[a], g);
                }
                if self.rg(b) {
                    add_into(&mut self.grads[b], g);
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    add_into(&mut self.grads[a], g);
                }
                if self.rg(b) {
                    for (dst, &x) in self.grads[b].iter_mut().zip(g) {
                        *dst -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b].data).map(|(x, y)| x * y).collect();
                    add_into(&mut self.grads[a], &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a].data).map(|(x, y)| x * y).collect();
                    add_into(&mut self.grads[b], &db);
                }
            }
            Op::AddRow { a, row, cols } => {
                let (a, row, c) = (*a, *row, *cols);
                if self.rg(a) {
                    add_into(&mut self.grads[a], g);
                }
                if self.rg(row) {
                    for (i, &x) in g.iter().enumerate() {
                        self.grads[row][i % c] += x;
                    }
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.rg(a) {
                    for (dst, &x) in self.grads[a].iter_mut().zip(g) {
                        *dst += c * x;
                    }
                }
            }
            Op::Silu { a } => {
                let a = *a;
                if self.rg(a) {
                    let da: Vec<f64> = self.nodes[a]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gx)| {
                            let s = sigmoid(x);
                            gx * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    add_into(&mut self.grads[a], &da);
                }
            }
            Op::SoftmaxRows { a, tau, cols } => {
                let (a, tau, c) = (*a, *tau, *cols);
                if self.rg(a) {
                    let y = &self.nodes[id].data;
                    let rows = y.len() / c;
                    let mut da = vec![0.0; y.len()];
                    for i in 0..rows {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            da[i * c + j] = yr[j] * (gr[j] - dot) / tau;
                        }
                    }
                    add_into(&mut self.grads[a], &da);
                }
            }
            Op::Ln { a, floor } => {
                let (a, floor) = (*a, *floor);
                if self.rg(a) {
                    let da: Vec<f64> = self.nodes[a]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gx)| if x >= floor { gx / x } else { 0.0 })
                        .collect();
                    add_into(&mut self.grads[a], &da);
                }
            }
            Op::LogSigmoid { a } => {
                let a = *a;
                if self.rg(a) {
                    let da: Vec<f64> = self.nodes[a]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gx)| gx * (1.0 - sigmoid(x)))
                        .collect();
                    add_into(&mut self.grads[a], &da);
                }
            }
            Op::SumRows { a, cols } => {
                let (a, c) = (*a, *cols);
                if self.rg(a) {
                    for i in 0..g.len() {
                        for j in 0..c {
                            self.grads[a][i * c + j] += g[i];
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                if self.rg(a) {
                    for dst in self.grads[a].iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            Op::GatherLog { probs, ids, cols, floor } => {
                let (probs, c, floor) = (*probs, *cols, *floor);
                let ids = ids.clone();
                if self.rg(probs) {
                    for (t, &i) in ids.iter().enumerate() {
                        let p = self.nodes[probs].data[t * c + i];
                        if p >= floor {
                            self.grads[probs][t * c + i] += g[t] / p;
                        }
                    }
                }
            }
            Op::Embed { table, ids, cols } => {
                let (table, c) = (*table, *cols);
                let ids = ids.clone();
                if self.rg(table) {
                    for (t, &i) in ids.iter().enumerate() {
                        for j in 0..c {
                            self.grads[table][i * c + j] += g[t * c + j];
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, cols, cache } => {
                let (a, gain, bias, c) = (*a, *gain, *bias, *cols);
                let cache = cache.clone();
                let rows = cache.len();
                let cf = c as f64;
                let mut da = vec![0.0; rows * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..rows {
                    let (mean, inv_std) = cache[i];
                    let xr = &self.nodes[a].data[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let gd = &self.nodes[gain].data;
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        let xh = (xr[j] - mean) * inv_std;
                        let dxh = gr[j] * gd[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dgain[j] += gr[j] * xh;
                        dbias[j] += gr[j];
                    }
                    for j in 0..c {
                        let xh = (xr[j] - mean) * inv_std;
                        let dxh = gr[j] * gd[j];
                        da[i * c + j] = (dxh - sum_dxh / cf - xh * sum_dxh_xh / cf) * inv_std;
                    }
                }
                if self.rg(a) {
                    add_into(&mut self.grads[a], &da);
                }
                if self.rg(gain) {
                    add_into(&mut self.grads[gain], &dgain);
                }
                if self.rg(bias) {
                    add_into(&mut self.grads[bias], &dbias);
                }
            }
            Op::CausalAttention { q, k, v, n_heads, t, d, att } => {
                let (q, k, v, nh, t, d) = (*q, *k, *v, *n_heads, *t, *d);
                let att = att.clone();
                let dh = d / nh;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = self.nodes[q].data.clone();
                let kd = self.nodes[k].data.clone();
                let vd = self.nodes[v].data.clone();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut darow = vec![0.0; t];
                for h in 0..nh {
                    let off = h * dh;
                    for i in 0..t {
                        let arow = &att[h * t * t + i * t..h * t * t + i * t + i + 1];
                        // dA and the softmax Jacobian, row i.
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let mut da = 0.0;
                            for x in 0..dh {
                                da += g[i * d + off + x] * vd[j * d + off + x];
                            }
                            darow[j] = da;
                            dot += da * arow[j];
                        }
                        for j in 0..=i {
                            let ds = arow[j] * (darow[j] - dot) * scale;
                            for x in 0..dh {
                                dq[i * d + off + x] += ds * kd[j * d + off + x];
                                dk[j * d + off + x] += ds * qd[i * d + off + x];
                                dv[j * d + off + x] += arow[j] * g[i * d + off + x];
                            }
                        }
                    }
                }
                if self.rg(q) {
                    add_into(&mut self.grads[q], &dq);
                }
                if self.rg(k) {
                    add_into(&mut self.grads[k], &dk);
                }
                if self.rg(v) {
                    add_into(&mut self.grads[v], &dv);
                }
            }
            Op::CrossEntropy { logits, targets, cols, probs } => {
                let (logits, c) = (*logits, *cols);
                let targets = targets.clone();
                let probs = probs.clone();
                if self.rg(logits) {
                    let t = targets.len() as f64;
                    for (i, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            self.grads[logits][i * c + j] += g[0] * (probs[i * c + j] - indicator) / t;
                        }
                    }
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// C += nothing; C = A(m×k)·B(k×n), ikj order.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// C = A(m×n)·Bᵀ where B is (k×n); result (m×k). Row-dot form.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// C = Aᵀ·B where A is (m×k), B is (m×n); result (k×n).
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for j in 0..k {
            let aij = a[i * k + j];
            if aij == 0.0 {
                continue;
            }
            let orow = &mut out[j * n..(j + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
    }
}

/// `Softmax(logits/tau)` into `out`, with max-subtraction for stability.
pub fn softmax_temp_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = ((l - max) / tau).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Standalone `Softmax(logits/tau)`. Rejects non-positive temperatures and
/// non-finite logits.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("softmax temperature must be > 0, got {tau}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax over non-finite logits".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_temp_into(logits, tau, &mut out);
    Ok(out)
}

/// Argmax with lowest-index tie-break.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences; returns the max relative error over all input
/// elements. Relative error is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-5, 1e-3]")));
    }
    let mut inputs: Vec<Tensor> = inputs.to_vec();
    for t in &mut inputs {
        t.requires_grad = true;
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &ids)?;
    if g.data(out).len() != 1 {
        return Err(Error::Contract("grad_check target must be scalar".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.data(out)[0])
    };

    let mut max_err: f64 = 0.0;
    for (ti, t) in inputs.clone().iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = inputs[ti].data[ei];
            inputs[ti].data[ei] = orig + eps;
            let hi = eval(&inputs)?;
            inputs[ti].data[ei] = orig - eps;
            let lo = eval(&inputs)?;
            inputs[ti].data[ei] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic[ti][ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
