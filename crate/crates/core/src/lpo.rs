//! Preference losses over latent temperature choices, and the head-only
//! training loop.
//!
//! Three DPO-style variants are implemented — temperature tokens only
//! (the default), joint word+temperature tokens, and marginalized latent
//! temperatures — plus an NLL-on-chosen baseline. The frozen base model
//! doubles as its own reference model and the reference temperature
//! distribution is uniform, so every preference loss is exactly ln 2 at
//! the head's uniform initialization.

use crate::autodiff::{argmax, softmax_temp, Graph, NodeId, Tensor, PROB_FLOOR};
use crate::decoding::GenerationRecord;
use crate::error::{Error, Result};
use crate::model::{AdaptiveDecoderHead, BaseModel, InferState, StagedHead};
use crate::optim::Adam;
use crate::pairs::PreferencePair;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    JointTokens,
    TempTokensOnly,
    TempAsLatents,
    NllChosen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::TempTokensOnly,
            beta: 0.1,
            learning_rate: 1e-3,
            steps: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub margin: f64,
    pub chosen_term: f64,
    pub rejected_term: f64,
}

/// Frozen-base quantities a loss needs from one record, computed once.
#[derive(Debug, Clone)]
pub struct RecordCache {
    /// Hidden state before each response token (L × d_model). Row i is the
    /// state the head would see when deciding the temperature for token i;
    /// row 0 is the last prompt position.
    pub hiddens: Tensor,
    pub temp_index: Vec<usize>,
    /// P(y_t | τ_k) for every response token and grid entry (L × K), with
    /// the τ=0 one-hot convention.
    pub tau_token_probs: Tensor,
    /// Σ_t ln P′_ref(y_t): uniform temperature weights over the same
    /// frozen token probabilities.
    pub ref_logprob: f64,
}

/// Replays `record` through the frozen base, collecting the hidden states
/// and per-temperature token probabilities every loss variant consumes.
pub fn cache_record(base: &BaseModel, grid: &[f64], record: &GenerationRecord) -> Result<RecordCache> {
    if record.response.is_empty() {
        return Err(Error::Contract("cannot cache a record with an empty response".into()));
    }
    if let Some(&bad) = record.temp_index.iter().find(|&&i| i >= grid.len()) {
        return Err(Error::IndexOutOfRange(format!("temp index {bad} >= grid size {}", grid.len())));
    }
    let d = base.config.d_model;
    let l = record.response.len();
    let k = grid.len();
    let mut state = InferState::new(base);
    let mut h = Vec::new();
    for &t in &record.prompt {
        h = state.feed(t)?;
    }
    let mut hiddens = Vec::with_capacity(l * d);
    let mut tau_probs = Vec::with_capacity(l * k);
    let mut ref_logprob = 0.0;
    for (step, &tok) in record.response.iter().enumerate() {
        hiddens.extend_from_slice(&h);
        let logits = base.token_logits(&h)?;
        let top = argmax(&logits);
        let mut mean = 0.0;
        for &tau in grid {
            let p = if tau == 0.0 {
                if tok as usize == top {
                    1.0
                } else {
                    0.0
                }
            } else {
                softmax_temp(&logits, tau)?[tok as usize]
            };
            tau_probs.push(p);
            mean += p / k as f64;
        }
        ref_logprob += mean.max(PROB_FLOOR).ln();
        if step + 1 < l {
            h = state.feed(tok)?;
        }
    }
    Ok(RecordCache {
        hiddens: Tensor::new(vec![l, d], hiddens)?,
        temp_index: record.temp_index.clone(),
        tau_token_probs: Tensor::new(vec![l, k], tau_probs)?,
        ref_logprob,
    })
}

/// Σ over recorded temperature decisions of ln P(τ_index | h) under the
/// current head.
pub fn temp_seq_logprob(head: &AdaptiveDecoderHead, base: &BaseModel, record: &GenerationRecord) -> Result<f64> {
    let cache = cache_record(base, &head.grid, record)?;
    temp_seq_logprob_cached(head, &cache)
}

fn temp_seq_logprob_cached(head: &AdaptiveDecoderHead, cache: &RecordCache) -> Result<f64> {
    if cache.temp_index.is_empty() {
        return Err(Error::Contract("record carries no temperature decisions".into()));
    }
    let d = cache.hiddens.shape[1];
    let mut sum = 0.0;
    for (i, &idx) in cache.temp_index.iter().enumerate() {
        let p = head.temp_distribution(&cache.hiddens.data[i * d..(i + 1) * d])?;
        sum += p[idx].max(PROB_FLOOR).ln();
    }
    Ok(sum)
}

/// Graph node for Σ ln P(τ_index | h) over the record's decisions.
fn temp_logprob_node(g: &mut Graph, head: &AdaptiveDecoderHead, staged: &StagedHead, cache: &RecordCache) -> Result<NodeId> {
    let n = cache.temp_index.len();
    if n == 0 {
        return Err(Error::Contract("record carries no temperature decisions".into()));
    }
    let d = cache.hiddens.shape[1];
    let hs = g.constant(cache.hiddens.data[..n * d].to_vec(), vec![n, d]);
    let probs = head.forward_graph(g, staged, hs)?;
    let lp = g.gather_log(probs, &cache.temp_index)?;
    Ok(g.sum_all(lp))
}

/// Graph node for Σ_t ln P′(y_t) − ln P′_ref(y_t), marginalizing the
/// temperature out of each token; the recorded indices are not read.
fn latent_ratio_node(g: &mut Graph, head: &AdaptiveDecoderHead, staged: &StagedHead, cache: &RecordCache) -> Result<NodeId> {
    let hs = g.constant(cache.hiddens.data.clone(), cache.hiddens.shape.clone());
    let probs = head.forward_graph(g, staged, hs)?;
    let c = g.constant(cache.tau_token_probs.data.clone(), cache.tau_token_probs.shape.clone());
    let weighted = g.mul(probs, c)?;
    let marginal = g.sum_rows(weighted)?;
    let lnp = g.ln(marginal, PROB_FLOOR);
    let total = g.sum_all(lnp);
    let reference = g.constant(vec![cache.ref_logprob], vec![1]);
    g.sub(total, reference)
}

fn preference_terms(
    g: &mut Graph,
    head: &AdaptiveDecoderHead,
    staged: &StagedHead,
    variant: LossVariant,
    chosen: &RecordCache,
    rejected: &RecordCache,
) -> Result<(NodeId, NodeId)> {
    match variant {
        LossVariant::TempTokensOnly => Ok((
            temp_logprob_node(g, head, staged, chosen)?,
            temp_logprob_node(g, head, staged, rejected)?,
        )),
        LossVariant::JointTokens => {
            // The policy over word tokens is the frozen base, which is also
            // the reference model, so each record's word ratio
            // Σ ln P(y_t) − Σ ln P_ref(y_t) is identically zero and only the
            // temperature terms remain.
            Ok((
                temp_logprob_node(g, head, staged, chosen)?,
                temp_logprob_node(g, head, staged, rejected)?,
            ))
        }
        LossVariant::TempAsLatents => Ok((
            latent_ratio_node(g, head, staged, chosen)?,
            latent_ratio_node(g, head, staged, rejected)?,
        )),
        LossVariant::NllChosen => Err(Error::Contract("NLL baseline is not a preference loss".into())),
    }
}

/// −ln σ(β·margin) as a graph node, plus the breakdown.
fn pair_loss_node(
    g: &mut Graph,
    head: &AdaptiveDecoderHead,
    staged: &StagedHead,
    variant: LossVariant,
    beta: f64,
    chosen: &RecordCache,
    rejected: &RecordCache,
) -> Result<(NodeId, LossBreakdown)> {
    let (c, r) = preference_terms(g, head, staged, variant, chosen, rejected)?;
    let margin = g.sub(c, r)?;
    let scaled = g.scale(margin, beta);
    let ls = g.log_sigmoid(scaled);
    let loss = g.scale(ls, -1.0);
    let breakdown = LossBreakdown {
        total: g.data(loss)[0],
        margin: g.data(margin)[0],
        chosen_term: g.data(c)[0],
        rejected_term: g.data(r)[0],
    };
    Ok((loss, breakdown))
}

/// Builds the scalar loss node for `variant` against externally staged
/// head parameters, so callers (e.g. gradient checks) can control the
/// leaves. Preference variants build −ln σ(β·margin); the NLL baseline
/// builds −ln P(τ⃗) of the chosen record and ignores `rejected`.
pub fn loss_graph_node(
    g: &mut Graph,
    head: &AdaptiveDecoderHead,
    staged: &StagedHead,
    variant: LossVariant,
    beta: f64,
    chosen: &RecordCache,
    rejected: &RecordCache,
) -> Result<NodeId> {
    match variant {
        LossVariant::NllChosen => {
            let lp = temp_logprob_node(g, head, staged, chosen)?;
            let _ = rejected;
            Ok(g.scale(lp, -1.0))
        }
        _ => Ok(pair_loss_node(g, head, staged, variant, beta, chosen, rejected)?.0),
    }
}

fn eval_pair_loss(
    pair: &PreferencePair,
    head: &AdaptiveDecoderHead,
    base: &BaseModel,
    variant: LossVariant,
    beta: f64,
) -> Result<LossBreakdown> {
    if beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let chosen = cache_record(base, &head.grid, &pair.chosen)?;
    let rejected = cache_record(base, &head.grid, &pair.rejected)?;
    let mut g = Graph::new();
    let staged = head.stage(&mut g);
    let (_, breakdown) = pair_loss_node(&mut g, head, &staged, variant, beta, &chosen, &rejected)?;
    Ok(breakdown)
}

/// Preference loss over the temperature tokens only.
pub fn loss_temp_only(pair: &PreferencePair, head: &AdaptiveDecoderHead, base: &BaseModel, beta: f64) -> Result<LossBreakdown> {
    eval_pair_loss(pair, head, base, LossVariant::TempTokensOnly, beta)
}

/// Joint word+temperature loss. `ref_base` must be the frozen base itself,
/// under which the word-token ratios cancel exactly.
pub fn loss_joint(
    pair: &PreferencePair,
    head: &AdaptiveDecoderHead,
    base: &BaseModel,
    ref_base: &BaseModel,
    beta: f64,
) -> Result<LossBreakdown> {
    if !std::ptr::eq(base, ref_base) {
        return Err(Error::Contract("the reference model must be the frozen base itself".into()));
    }
    eval_pair_loss(pair, head, base, LossVariant::JointTokens, beta)
}

/// Marginalized-latent loss; ignores the recorded temperature indices.
pub fn loss_latent(pair: &PreferencePair, head: &AdaptiveDecoderHead, base: &BaseModel, beta: f64) -> Result<LossBreakdown> {
    eval_pair_loss(pair, head, base, LossVariant::TempAsLatents, beta)
}

/// Mean −ln P(τ⃗) over the chosen records: the NLL-on-chosen baseline.
pub fn loss_nll_chosen(records: &[&GenerationRecord], head: &AdaptiveDecoderHead, base: &BaseModel) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("NLL baseline needs at least one record".into()));
    }
    let mut sum = 0.0;
    for r in records {
        sum -= temp_seq_logprob(head, base, r)?;
    }
    Ok(sum / records.len() as f64)
}

/// Trains the head on a pair dataset with Adam; base parameters are never
/// touched. Returns the per-step loss curve.
pub fn train(
    pairs: &[PreferencePair],
    head: &mut AdaptiveDecoderHead,
    base: &BaseModel,
    config: &LossConfig,
) -> Result<Vec<LossBreakdown>> {
    config.validate()?;
    if !base.frozen {
        return Err(Error::Contract("LPO requires a frozen base model".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Contract("empty pair dataset".into()));
    }
    let caches: Vec<(RecordCache, RecordCache)> = pairs
        .iter()
        .map(|p| {
            Ok((
                cache_record(base, &head.grid, &p.chosen)?,
                cache_record(base, &head.grid, &p.rejected)?,
            ))
        })
        .collect::<Result<_>>()?;
    let sizes: Vec<usize> = head.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut g = Graph::new();
        let staged = head.stage(&mut g);
        let mut batch_losses = Vec::with_capacity(config.batch_size);
        let mut margin_sum = 0.0;
        let mut chosen_sum = 0.0;
        let mut rejected_sum = 0.0;
        for _ in 0..config.batch_size {
            let i = rng.gen_range(0..caches.len());
            let (c, r) = &caches[i];
            let loss = match config.variant {
                LossVariant::NllChosen => {
                    let lp = temp_logprob_node(&mut g, head, &staged, c)?;
                    chosen_sum += g.data(lp)[0];
                    g.scale(lp, -1.0)
                }
                v => {
                    let (node, b) = pair_loss_node(&mut g, head, &staged, v, config.beta, c, r)?;
                    margin_sum += b.margin;
                    chosen_sum += b.chosen_term;
                    rejected_sum += b.rejected_term;
                    node
                }
            };
            batch_losses.push(loss);
        }
        let mut total = batch_losses[0];
        for &l in &batch_losses[1..] {
            total = g.add(total, l)?;
        }
        let mean = g.scale(total, 1.0 / config.batch_size as f64);
        let value = g.data(mean)[0];
        let breakdown = LossBreakdown {
            total: value,
            margin: margin_sum / config.batch_size as f64,
            chosen_term: chosen_sum / config.batch_size as f64,
            rejected_term: rejected_sum / config.batch_size as f64,
        };
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} at step {step} (margin {})",
                breakdown.margin
            )));
        }
        g.backward(mean)?;
        let grads: Vec<Vec<f64>> = staged
            .param_ids()
            .iter()
            .map(|&id| g.grad(id).expect("head leaves require grad").to_vec())
            .collect();
        let mut params: Vec<&mut Tensor> = head.named_params_mut().into_iter().map(|(_, t)| t).collect();
        adam.step(&mut params, &grads);
        curve.push(breakdown);
    }
    Ok(curve)
}

/// Loss-curve CSV: step, total, margin.
pub fn write_loss_curve(path: &Path, curve: &[LossBreakdown]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,total,margin")?;
    for (i, b) in curve.iter().enumerate() {
        writeln!(f, "{i},{},{}", b.total, b.margin)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, log_sigmoid, sigmoid};
    use crate::data::{TaskSample, TaskTag};
    use crate::decoding::{generate, DecodingPolicy, TempSelection};
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn tiny_base(seed: u64) -> BaseModel {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ctx_len: 64,
            head_hidden: 8,
            temperature_grid: vec![0.0, 0.5, 1.0],
        };
        let mut m = BaseModel::init(cfg, seed).unwrap();
        m.frozen = true;
        m
    }

    fn uniform_head(base: &BaseModel, seed: u64) -> AdaptiveDecoderHead {
        AdaptiveDecoderHead::init(
            base.config.d_model,
            base.config.head_hidden,
            base.config.temperature_grid.clone(),
            seed,
        )
        .unwrap()
    }

    /// A head with non-trivial output layers, for tests that need
    /// non-uniform temperature distributions.
    fn perturbed_head(base: &BaseModel, seed: u64) -> AdaptiveDecoderHead {
        let mut head = uniform_head(base, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for (_, p) in head.named_params_mut() {
            for v in &mut p.data {
                *v += rng.gen_range(-0.5..0.5);
            }
            p.quantize_f32();
        }
        head
    }

    fn sample(prompt: &[u32]) -> TaskSample {
        TaskSample { task: TaskTag::Diverse, prompt: prompt.to_vec(), gold: None, constraint: None }
    }

    /// Trims both responses to their common length so the ln 2 identity
    /// holds for per-token records (the temperature-token loss carries a
    /// known length bias).
    fn trim_to_equal(a: &mut GenerationRecord, b: &mut GenerationRecord) {
        let l = a.response.len().min(b.response.len());
        for r in [a, b] {
            r.response.truncate(l);
            r.token_logprob.truncate(l);
            if r.temp_index.len() > 1 {
                r.temp_index.truncate(l);
                r.temp_logprob.truncate(l);
            }
        }
    }

    fn make_pair(base: &BaseModel, head: &AdaptiveDecoderHead, seq: bool, seed: u64) -> PreferencePair {
        let policy = if seq {
            DecodingPolicy::adaptive_seq(TempSelection::Sample, 6)
        } else {
            DecodingPolicy::adaptive_tok(TempSelection::Sample, 6)
        };
        let s = sample(&[0, 3, 4]);
        let mut chosen = generate(base, Some(head), &s, &policy, seed).unwrap();
        let mut rejected = generate(base, Some(head), &s, &policy, seed + 1).unwrap();
        trim_to_equal(&mut chosen, &mut rejected);
        PreferencePair {
            chosen,
            rejected,
            chosen_score: crate::rewards::Score::new(1.0).unwrap(),
            rejected_score: crate::rewards::Score::new(0.0).unwrap(),
        }
    }

    #[test]
    fn uniform_head_gives_ln2_everywhere() {
        let base = tiny_base(7);
        let head = uniform_head(&base, 3);
        for seq in [true, false] {
            let pair = make_pair(&base, &head, seq, 11);
            for b in [
                loss_temp_only(&pair, &head, &base, 0.1).unwrap(),
                loss_joint(&pair, &head, &base, &base, 0.1).unwrap(),
                loss_latent(&pair, &head, &base, 0.1).unwrap(),
            ] {
                assert!((b.total - LN2).abs() < 1e-9, "loss {} vs ln 2", b.total);
                assert!(b.margin.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn temp_seq_logprob_uniform_values() {
        let base = tiny_base(7);
        let head = uniform_head(&base, 3);
        let k = head.k() as f64;
        let pair = make_pair(&base, &head, true, 5);
        let lp = temp_seq_logprob(&head, &base, &pair.chosen).unwrap();
        assert!((lp - (1.0 / k).ln()).abs() < 1e-9);

        let pair = make_pair(&base, &head, false, 5);
        let l = pair.chosen.response.len() as f64;
        let lp = temp_seq_logprob(&head, &base, &pair.chosen).unwrap();
        assert!((lp - l * (1.0 / k).ln()).abs() < 1e-9);

        // Fixed-temperature records carry no decisions.
        let fixed = DecodingPolicy::fixed(1.0, 6);
        let rec = generate(&base, None, &sample(&[0, 3]), &fixed, 1).unwrap();
        assert!(temp_seq_logprob(&head, &base, &rec).is_err());
    }

    #[test]
    fn nll_chosen_uniform_is_ln_k() {
        let base = tiny_base(7);
        let head = uniform_head(&base, 3);
        let pair = make_pair(&base, &head, true, 5);
        let nll = loss_nll_chosen(&[&pair.chosen], &head, &base).unwrap();
        assert!((nll - (head.k() as f64).ln()).abs() < 1e-9);
        assert!(loss_nll_chosen(&[], &head, &base).is_err());
    }

    #[test]
    fn breakdown_satisfies_sigma_identity_and_joint_equals_temp_only() {
        let base = tiny_base(7);
        let head = perturbed_head(&base, 4);
        for seq in [true, false] {
            let pair = make_pair(&base, &head, seq, 23);
            for beta in [0.1, 1.0] {
                let t = loss_temp_only(&pair, &head, &base, beta).unwrap();
                assert!((t.total - -log_sigmoid(beta * t.margin)).abs() < 1e-6);
                assert!((t.margin - (t.chosen_term - t.rejected_term)).abs() < 1e-9);
                let j = loss_joint(&pair, &head, &base, &base, beta).unwrap();
                assert!((j.total - t.total).abs() < 1e-6);
                let l = loss_latent(&pair, &head, &base, beta).unwrap();
                assert!((l.total - -log_sigmoid(beta * l.margin)).abs() < 1e-6);
            }
        }
        // A different model object is rejected as reference.
        let other = tiny_base(8);
        let pair = make_pair(&base, &head, true, 23);
        assert!(loss_joint(&pair, &head, &base, &other, 0.1).is_err());
    }

    #[test]
    fn latent_matches_brute_force_oracle() {
        let base = tiny_base(7);
        let head = perturbed_head(&base, 9);
        let pair = make_pair(&base, &head, false, 31);
        let beta = 0.3;
        let got = loss_latent(&pair, &head, &base, beta).unwrap();

        // Independent path: plain forward functions, no graph, explicit
        // sums over the grid.
        let term = |rec: &GenerationRecord| {
            let mut state = InferState::new(&base);
            let mut h = Vec::new();
            for &t in &rec.prompt {
                h = state.feed(t).unwrap();
            }
            let k = head.k();
            let mut sum = 0.0;
            for (i, &tok) in rec.response.iter().enumerate() {
                let logits = base.token_logits(&h).unwrap();
                let p_temp = head.temp_distribution(&h).unwrap();
                let mut marginal = 0.0;
                let mut reference = 0.0;
                for (j, &tau) in head.grid.iter().enumerate() {
                    let p_tok = if tau == 0.0 {
                        (argmax(&logits) == tok as usize) as u8 as f64
                    } else {
                        softmax_temp(&logits, tau).unwrap()[tok as usize]
                    };
                    marginal += p_temp[j] * p_tok;
                    reference += p_tok / k as f64;
                }
                sum += marginal.max(PROB_FLOOR).ln() - reference.max(PROB_FLOOR).ln();
                if i + 1 < rec.response.len() {
                    h = state.feed(tok).unwrap();
                }
            }
            sum
        };
        let margin = term(&pair.chosen) - term(&pair.rejected);
        assert!((got.margin - margin).abs() < 1e-6, "{} vs {margin}", got.margin);
        assert!((got.total - -log_sigmoid(beta * margin)).abs() < 1e-6);
    }

    #[test]
    fn latent_ignores_recorded_indices() {
        let base = tiny_base(7);
        let head = perturbed_head(&base, 9);
        let mut pair = make_pair(&base, &head, false, 13);
        let before = loss_latent(&pair, &head, &base, 0.1).unwrap();
        for idx in pair.chosen.temp_index.iter_mut().chain(pair.rejected.temp_index.iter_mut()) {
            *idx = (*idx + 1) % head.k();
        }
        let after = loss_latent(&pair, &head, &base, 0.1).unwrap();
        assert_eq!(before.total, after.total);
        // ...but the temperature-token loss does read them.
        let t_before = loss_temp_only(&pair, &head, &base, 0.1).unwrap();
        assert!((t_before.total - before.total).abs() > 0.0 || t_before.margin != before.margin);
    }

    #[test]
    fn head_gradients_pass_grad_check() {
        let base = tiny_base(7);
        let head = perturbed_head(&base, 15);
        let pair = make_pair(&base, &head, false, 41);
        let chosen = cache_record(&base, &head.grid, &pair.chosen).unwrap();
        let rejected = cache_record(&base, &head.grid, &pair.rejected).unwrap();
        let inputs: Vec<Tensor> = head
            .named_params()
            .into_iter()
            .map(|(_, t)| t.clone().with_grad())
            .collect();
        for variant in [LossVariant::TempTokensOnly, LossVariant::TempAsLatents] {
            let head = head.clone();
            let chosen = chosen.clone();
            let rejected = rejected.clone();
            let err = grad_check(
                move |g, ids| {
                    let staged = StagedHead {
                        w1: ids[0],
                        b1: ids[1],
                        w2: ids[2],
                        b2: ids[3],
                        w3: ids[4],
                        b3: ids[5],
                    };
                    let (loss, _) = pair_loss_node(g, &head, &staged, variant, 0.7, &chosen, &rejected)?;
                    Ok(loss)
                },
                &inputs,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-5, "grad check error {err} for {variant:?}");
        }
    }

    proptest! {
        #[test]
        fn sigma_monotonicity(m1 in -5.0f64..5.0, dm in 0.0f64..5.0, beta in 0.01f64..2.0) {
            // Raising the chosen temperature probability raises the margin,
            // which never increases the loss.
            let lo = -log_sigmoid(beta * m1);
            let hi = -log_sigmoid(beta * (m1 + dm));
            prop_assert!(hi <= lo + 1e-12);
        }
    }

    #[test]
    fn minus_ln_sigma_reference_value() {
        assert!((-log_sigmoid(1.0) - 0.313_261_687_5).abs() < 1e-9);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    fn training_pairs(base: &BaseModel, head: &AdaptiveDecoderHead, n: usize) -> Vec<PreferencePair> {
        // Every pair prefers grid index 2 over index 0 at the same prompt.
        let policy = DecodingPolicy::adaptive_tok(TempSelection::Sample, 5);
        (0..n)
            .map(|i| {
                let s = sample(&[0, 3 + (i % 4) as u32]);
                let mut chosen = generate(base, Some(head), &s, &policy, 100 + i as u64).unwrap();
                let mut rejected = generate(base, Some(head), &s, &policy, 200 + i as u64).unwrap();
                trim_to_equal(&mut chosen, &mut rejected);
                for t in &mut chosen.temp_index {
                    *t = 2;
                }
                for t in &mut rejected.temp_index {
                    *t = 0;
                }
                PreferencePair {
                    chosen,
                    rejected,
                    chosen_score: crate::rewards::Score::new(1.0).unwrap(),
                    rejected_score: crate::rewards::Score::new(0.0).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn training_learns_and_is_deterministic() {
        let base = tiny_base(7);
        let mut head = uniform_head(&base, 3);
        let pairs = training_pairs(&base, &head, 8);
        let config = LossConfig { steps: 60, batch_size: 4, learning_rate: 1e-2, ..LossConfig::default() };

        // Zero steps: head untouched.
        let frozen_w3 = head.w3.data.clone();
        let none = train(&pairs, &mut head, &base, &LossConfig { steps: 0, ..config.clone() }).unwrap();
        assert!(none.is_empty());
        assert_eq!(head.w3.data, frozen_w3);

        let curve = train(&pairs, &mut head, &base, &config).unwrap();
        assert!((curve[0].total - LN2).abs() < 1e-9);
        assert!(curve.iter().all(|b| b.total.is_finite()));
        assert!(curve.last().unwrap().total < LN2, "no learning: {}", curve.last().unwrap().total);

        // One step strictly increases P(τᶜ) and decreases P(τʳ) at the
        // pair's hidden states.
        let cache = cache_record(&base, &head.grid, &pairs[0].chosen).unwrap();
        let d = cache.hiddens.shape[1];
        let p = head.temp_distribution(&cache.hiddens.data[..d]).unwrap();
        assert!(p[2] > 1.0 / 3.0 + 0.01);
        assert!(p[0] < 1.0 / 3.0 - 0.01);

        // Determinism and a frozen base.
        let mut head2 = uniform_head(&base, 3);
        let curve2 = train(&pairs, &mut head2, &base, &config).unwrap();
        assert_eq!(head.w3.data, head2.w3.data);
        assert_eq!(
            serde_json::to_string(&curve).unwrap(),
            serde_json::to_string(&curve2).unwrap()
        );

        let mut thawed = tiny_base(7);
        thawed.frozen = false;
        assert!(train(&pairs, &mut head, &thawed, &config).is_err());
    }

    #[test]
    fn nll_chosen_converges_to_mode_frequency() {
        let base = tiny_base(7);
        let mut head = uniform_head(&base, 3);
        // One prompt; chosen temperature index 2 on 60% of records, index 0
        // on 40%: NLL training matches the empirical frequency instead of
        // committing to the tournament winner.
        let policy = DecodingPolicy::adaptive_seq(TempSelection::Sample, 4);
        let s = sample(&[0, 3]);
        let pairs: Vec<PreferencePair> = (0..10)
            .map(|i| {
                let mut chosen = generate(&base, Some(&head), &s, &policy, 300 + i).unwrap();
                chosen.temp_index = vec![if i < 6 { 2 } else { 0 }];
                let rejected = chosen.clone();
                PreferencePair {
                    chosen,
                    rejected,
                    chosen_score: crate::rewards::Score::new(1.0).unwrap(),
                    rejected_score: crate::rewards::Score::new(1.0).unwrap(),
                }
            })
            .collect();
        let config = LossConfig {
            variant: LossVariant::NllChosen,
            steps: 400,
            batch_size: 10,
            learning_rate: 1e-2,
            ..LossConfig::default()
        };
        train(&pairs, &mut head, &base, &config).unwrap();
        let cache = cache_record(&base, &head.grid, &pairs[0].chosen).unwrap();
        let d = cache.hiddens.shape[1];
        let p = head.temp_distribution(&cache.hiddens.data[..d]).unwrap();
        assert!((p[2] - 0.6).abs() < 0.05, "p = {p:?}");
        assert!((p[0] - 0.4).abs() < 0.05, "p = {p:?}");
    }

    #[test]
    fn loss_curve_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = vec![
            LossBreakdown { total: 0.7, margin: 0.0, chosen_term: -1.0, rejected_term: -1.0 },
            LossBreakdown { total: 0.6, margin: 0.5, chosen_term: -0.5, rejected_term: -1.0 },
        ];
        write_loss_curve(&path, &curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,total,margin\n0,0.7,0\n1,0.6,0.5\n"));
    }
}
