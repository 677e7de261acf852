//! The small decoder-only transformer (frozen base) and the trainable
//! temperature head.
//!
//! The base maps token ids to final hidden states h_t; the unembedding W
//! turns h_t into next-token logits. The head reads the same h_t and emits
//! a categorical distribution over a fixed temperature grid. During
//! preference training the base is frozen; only head parameters move.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::optim::Adam;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    pub head_hidden: usize,
    pub temperature_grid: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 46,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            ctx_len: 256,
            head_hidden: 256,
            temperature_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ctx_len == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        validate_grid(&self.temperature_grid)
    }

    pub fn grid_len(&self) -> usize {
        self.temperature_grid.len()
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Config("temperature grid needs at least 2 entries".into()));
    }
    if !grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("temperature grid must be strictly increasing".into()));
    }
    if grid.iter().any(|&t| !(0.0..=2.0).contains(&t)) {
        return Err(Error::Config("temperature grid values must lie in [0, 2]".into()));
    }
    Ok(())
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    pub unembed: Tensor,
    pub frozen: bool,
}

fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    // Box-Muller; quantized to the f32 lattice like all parameters.
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (z * std) as f32 as f64
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap()
}

impl BaseModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: ones(d),
                ln1_b: Tensor::zeros(vec![d]),
                wq: randn(vec![d, d], std, &mut rng),
                bq: Tensor::zeros(vec![d]),
                wk: randn(vec![d, d], std, &mut rng),
                bk: Tensor::zeros(vec![d]),
                wv: randn(vec![d, d], std, &mut rng),
                bv: Tensor::zeros(vec![d]),
                wo: randn(vec![d, d], resid_std, &mut rng),
                bo: Tensor::zeros(vec![d]),
                ln2_g: ones(d),
                ln2_b: Tensor::zeros(vec![d]),
                w_in: randn(vec![d, 4 * d], std, &mut rng),
                b_in: Tensor::zeros(vec![4 * d]),
                w_out: randn(vec![4 * d, d], resid_std, &mut rng),
                b_out: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(BaseModel {
            tok_emb: randn(vec![config.vocab_size, d], std, &mut rng),
            pos_emb: randn(vec![config.ctx_len, d], std, &mut rng),
            blocks,
            ln_f_g: ones(d),
            ln_f_b: Tensor::zeros(vec![d]),
            unembed: randn(vec![d, config.vocab_size], std, &mut rng),
            config,
            frozen: false,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w_in", &b.w_in),
                ("b_in", &b.b_in),
                ("w_out", &b.w_out),
                ("b_out", &b.b_out),
            ] {
                out.push((format!("layer{i}.{n}"), t));
            }
        }
        out.push(("ln_f_g".into(), &self.ln_f_g));
        out.push(("ln_f_b".into(), &self.ln_f_b));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("wq", &mut b.wq),
                ("bq", &mut b.bq),
                ("wk", &mut b.wk),
                ("bk", &mut b.bk),
                ("wv", &mut b.wv),
                ("bv", &mut b.bv),
                ("wo", &mut b.wo),
                ("bo", &mut b.bo),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("w_in", &mut b.w_in),
                ("b_in", &mut b.b_in),
                ("w_out", &mut b.w_out),
                ("b_out", &mut b.b_out),
            ] {
                out.push((format!("layer{i}.{n}"), t));
            }
        }
        out.push(("ln_f_g".into(), &mut self.ln_f_g));
        out.push(("ln_f_b".into(), &mut self.ln_f_b));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Length("empty token sequence".into()));
        }
        if tokens.len() > self.config.ctx_len {
            return Err(Error::Length(format!(
                "sequence length {} exceeds ctx_len {}",
                tokens.len(),
                self.config.ctx_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange(format!(
                "token id {bad} >= vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Stages all parameters onto a graph and runs the forward pass up to
    /// the final layer norm, returning the (T × d_model) hidden node.
    /// With `train` set, parameters are recorded as differentiable leaves.
    pub fn forward_graph(&self, g: &mut Graph, tokens: &[u32], train: bool) -> Result<(NodeId, StagedBase)> {
        self.check_tokens(tokens)?;
        let staged = self.stage(g, train);
        let h = self.forward_staged(g, &staged, tokens)?;
        Ok((h, staged))
    }

    fn stage(&self, g: &mut Graph, train: bool) -> StagedBase {
        let put = |g: &mut Graph, t: &Tensor| {
            if train {
                let mut t = t.clone();
                t.requires_grad = true;
                g.leaf(&t)
            } else {
                g.constant(t.data.clone(), t.shape.clone())
            }
        };
        StagedBase {
            tok_emb: put(g, &self.tok_emb),
            pos_emb: put(g, &self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| StagedBlock {
                    ln1_g: put(g, &b.ln1_g),
                    ln1_b: put(g, &b.ln1_b),
                    wq: put(g, &b.wq),
                    bq: put(g, &b.bq),
                    wk: put(g, &b.wk),
                    bk: put(g, &b.bk),
                    wv: put(g, &b.wv),
                    bv: put(g, &b.bv),
                    wo: put(g, &b.wo),
                    bo: put(g, &b.bo),
                    ln2_g: put(g, &b.ln2_g),
                    ln2_b: put(g, &b.ln2_b),
                    w_in: put(g, &b.w_in),
                    b_in: put(g, &b.b_in),
                    w_out: put(g, &b.w_out),
                    b_out: put(g, &b.b_out),
                })
                .collect(),
            ln_f_g: put(g, &self.ln_f_g),
            ln_f_b: put(g, &self.ln_f_b),
            unembed: put(g, &self.unembed),
        }
    }

    fn forward_staged(&self, g: &mut Graph, s: &StagedBase, tokens: &[u32]) -> Result<NodeId> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let te = g.embed(s.tok_emb, &ids)?;
        let pe = g.embed(s.pos_emb, &positions)?;
        let mut x = g.add(te, pe)?;
        for b in &s.blocks {
            let n1 = g.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
            let q0 = g.matmul(n1, b.wq)?;
            let q = g.add_row(q0, b.bq)?;
            let k0 = g.matmul(n1, b.wk)?;
            let k = g.add_row(k0, b.bk)?;
            let v0 = g.matmul(n1, b.wv)?;
            let v = g.add_row(v0, b.bv)?;
            let att = g.causal_attention(q, k, v, self.config.n_heads)?;
            let proj0 = g.matmul(att, b.wo)?;
            let proj = g.add_row(proj0, b.bo)?;
            x = g.add(x, proj)?;
            let n2 = g.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
            let m0 = g.matmul(n2, b.w_in)?;
            let m1 = g.add_row(m0, b.b_in)?;
            let m2 = g.silu(m1);
            let m3 = g.matmul(m2, b.w_out)?;
            let m4 = g.add_row(m3, b.b_out)?;
            x = g.add(x, m4)?;
        }
        g.layer_norm(x, s.ln_f_g, s.ln_f_b, LN_EPS)
    }

    /// Final hidden state h_t for every position; deterministic given
    /// parameters. Runs off-tape through the incremental path.
    pub fn forward_hidden(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut state = InferState::new(self);
        let mut data = Vec::with_capacity(tokens.len() * self.config.d_model);
        for &t in tokens {
            data.extend_from_slice(&state.feed(t)?);
        }
        Tensor::new(vec![tokens.len(), self.config.d_model], data)
    }

    /// Pre-temperature next-token logits W·h for one hidden vector.
    pub fn token_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        if h.len() != d {
            return Err(Error::ShapeMismatch(format!("hidden width {} vs d_model {d}", h.len())));
        }
        let v = self.config.vocab_size;
        let mut out = vec![0.0; v];
        crate::autodiff::matmul_nn(h, &self.unembed.data, 1, d, v, &mut out);
        Ok(out)
    }

    /// Mean next-token NLL over a token sequence (no gradient).
    pub fn sequence_nll(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Length("need at least 2 tokens for NLL".into()));
        }
        let mut g = Graph::new();
        let (h, s) = self.forward_graph(&mut g, &tokens[..tokens.len() - 1], false)?;
        let logits = g.matmul(h, s.unembed)?;
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        let loss = g.cross_entropy(logits, &targets)?;
        Ok(g.data(loss)[0])
    }
}

pub struct StagedBlock {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w_in: NodeId,
    pub b_in: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

pub struct StagedBase {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub blocks: Vec<StagedBlock>,
    pub ln_f_g: NodeId,
    pub ln_f_b: NodeId,
    pub unembed: NodeId,
}

impl StagedBase {
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b,
                b.w_in, b.b_in, b.w_out, b.b_out,
            ]);
        }
        ids.extend([self.ln_f_g, self.ln_f_b, self.unembed]);
        ids
    }
}

struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Incremental single-sequence decoding state with per-layer key/value
/// caches. Numerically identical to the batch graph forward (same f64 ops
/// in the same order per position).
pub struct InferState<'a> {
    model: &'a BaseModel,
    caches: Vec<LayerCache>,
    pos: usize,
}

fn layer_norm_vec(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(&v, (&gi, &bi))| gi * (v - mean) * inv_std + bi).collect()
}

fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows);
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let wrow = &w.data[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
    out
}

impl<'a> InferState<'a> {
    pub fn new(model: &'a BaseModel) -> Self {
        InferState {
            model,
            caches: (0..model.config.n_layers).map(|_| LayerCache { k: Vec::new(), v: Vec::new() }).collect(),
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token, returns the final hidden state at its position.
    pub fn feed(&mut self, token: u32) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        if self.pos >= cfg.ctx_len {
            return Err(Error::Length(format!("context overflow at position {}", self.pos)));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::IndexOutOfRange(format!("token id {token} >= vocab_size {}", cfg.vocab_size)));
        }
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = token as usize;
        let mut x: Vec<f64> = self.model.tok_emb.data[t * d..(t + 1) * d]
            .iter()
            .zip(&self.model.pos_emb.data[self.pos * d..(self.pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        for (li, blk) in self.model.blocks.iter().enumerate() {
            let n1 = layer_norm_vec(&x, &blk.ln1_g.data, &blk.ln1_b.data);
            let q = affine(&n1, &blk.wq, &blk.bq.data);
            let k = affine(&n1, &blk.wk, &blk.bk.data);
            let v = affine(&n1, &blk.wv, &blk.bv.data);
            let cache = &mut self.caches[li];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            let t_now = self.pos + 1;
            let mut att_out = vec![0.0; d];
            let mut scores = vec![0.0; t_now];
            let mut weights = vec![0.0; t_now];
            for h in 0..nh {
                let off = h * dh;
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &cache.k[j * d + off..j * d + off + dh];
                    *s = q[off..off + dh].iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                crate::autodiff::softmax_temp_into(&scores, 1.0, &mut weights);
                for (j, &w) in weights.iter().enumerate() {
                    let vrow = &cache.v[j * d + off..j * d + off + dh];
                    for (o, &vv) in att_out[off..off + dh].iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
            }
            let proj = affine(&att_out, &blk.wo, &blk.bo.data);
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }
            let n2 = layer_norm_vec(&x, &blk.ln2_g.data, &blk.ln2_b.data);
            let mut m = affine(&n2, &blk.w_in, &blk.b_in.data);
            for v in &mut m {
                *v *= crate::autodiff::sigmoid(*v);
            }
            let m2 = affine(&m, &blk.w_out, &blk.b_out.data);
            for (xi, p) in x.iter_mut().zip(&m2) {
                *xi += p;
            }
        }
        self.pos += 1;
        Ok(layer_norm_vec(&x, &self.model.ln_f_g.data, &self.model.ln_f_b.data))
    }
}

/// 3-layer MLP with SiLU activations and a softmax output over the
/// temperature grid. The final layer starts at zero so the initial
/// distribution is exactly uniform.
#[derive(Debug, Clone)]
pub struct AdaptiveDecoderHead {
    pub grid: Vec<f64>,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl AdaptiveDecoderHead {
    pub fn init(d_model: usize, hidden: usize, grid: Vec<f64>, seed: u64) -> Result<Self> {
        validate_grid(&grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = grid.len();
        Ok(AdaptiveDecoderHead {
            grid,
            w1: randn(vec![d_model, hidden], 0.02, &mut rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: randn(vec![hidden, hidden], 0.02, &mut rng),
            b2: Tensor::zeros(vec![hidden]),
            w3: Tensor::zeros(vec![hidden, k]),
            b3: Tensor::zeros(vec![k]),
        })
    }

    pub fn k(&self) -> usize {
        self.grid.len()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.w1".into(), &self.w1),
            ("head.b1".into(), &self.b1),
            ("head.w2".into(), &self.w2),
            ("head.b2".into(), &self.b2),
            ("head.w3".into(), &self.w3),
            ("head.b3".into(), &self.b3),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.w1".into(), &mut self.w1),
            ("head.b1".into(), &mut self.b1),
            ("head.w2".into(), &mut self.w2),
            ("head.b2".into(), &mut self.b2),
            ("head.w3".into(), &mut self.w3),
            ("head.b3".into(), &mut self.b3),
        ]
    }

    /// Probability distribution over the grid for one hidden state.
    pub fn temp_distribution(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.w1.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "hidden width {} vs head input {}",
                h.len(),
                self.w1.shape[0]
            )));
        }
        let mut a = affine(h, &self.w1, &self.b1.data);
        for v in &mut a {
            *v *= crate::autodiff::sigmoid(*v);
        }
        let mut b = affine(&a, &self.w2, &self.b2.data);
        for v in &mut b {
            *v *= crate::autodiff::sigmoid(*v);
        }
        let logits = affine(&b, &self.w3, &self.b3.data);
        crate::autodiff::softmax_temp(&logits, 1.0)
    }

    /// Stages head parameters as differentiable leaves.
    pub fn stage(&self, g: &mut Graph) -> StagedHead {
        let put = |g: &mut Graph, t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.leaf(&t)
        };
        StagedHead {
            w1: put(g, &self.w1),
            b1: put(g, &self.b1),
            w2: put(g, &self.w2),
            b2: put(g, &self.b2),
            w3: put(g, &self.w3),
            b3: put(g, &self.b3),
        }
    }

    /// Graph forward over a batch of hidden states (P × d_model), returning
    /// (P × K) temperature probabilities.
    pub fn forward_graph(&self, g: &mut Graph, staged: &StagedHead, hs: NodeId) -> Result<NodeId> {
        let a0 = g.matmul(hs, staged.w1)?;
        let a1 = g.add_row(a0, staged.b1)?;
        let a2 = g.silu(a1);
        let b0 = g.matmul(a2, staged.w2)?;
        let b1 = g.add_row(b0, staged.b2)?;
        let b2 = g.silu(b1);
        let c0 = g.matmul(b2, staged.w3)?;
        let c1 = g.add_row(c0, staged.b3)?;
        g.softmax_rows(c1, 1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StagedHead {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl StagedHead {
    pub fn param_ids(&self) -> [NodeId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 1200, learning_rate: 1e-3, batch_size: 8, max_seq_len: 96, seed: 0 }
    }
}

/// Next-token training of the base on a document corpus. Afterwards the
/// model is frozen; preference training never touches it again.
pub fn pretrain_base(model: &mut BaseModel, corpus: &[Vec<u32>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if model.frozen {
        return Err(Error::Contract("cannot pretrain a frozen model".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
    let n_params = sizes.len();
    let mut opt = Adam::new(cfg.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let doc = &corpus[rng.gen_range(0..corpus.len())];
            if doc.len() < 2 {
                continue;
            }
            let window = cfg.max_seq_len.min(model.config.ctx_len);
            let seq: &[u32] = if doc.len() > window {
                let start = rng.gen_range(0..doc.len() - window);
                &doc[start..start + window]
            } else {
                doc
            };
            let mut g = Graph::new();
            let (h, staged) = model.forward_graph(&mut g, &seq[..seq.len() - 1], true)?;
            let logits = g.matmul(h, staged.unembed)?;
            let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            step_loss += g.data(loss)[0];
            g.backward(loss)?;
            for (i, id) in staged.param_ids().iter().enumerate() {
                if let Some(gr) = g.grad(*id) {
                    for (dst, &s) in grads[i].iter_mut().zip(gr) {
                        *dst += s;
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for gr in &mut grads {
            for v in gr.iter_mut() {
                *v *= inv;
            }
        }
        step_loss *= inv;
        if !step_loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss diverged: {step_loss}")));
        }
        let mut params = model.named_params_mut();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        debug_assert_eq!(refs.len(), n_params);
        opt.step(&mut refs, &grads);
        curve.push(step_loss);
    }
    model.frozen = true;
    Ok(curve)
}
