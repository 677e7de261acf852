//! Generation engine: fixed-temperature, per-sequence, and per-token
//! adaptive sampling.
//!
//! Temperature selection at τ=0 means argmax with a lowest-index tie-break,
//! and the token log-probability under τ=0 is 0 by convention. Every
//! generation owns an rng stream derived from (run seed, sample id,
//! response index), so parallel generation is reproducible and
//! order-independent.

use crate::autodiff::{argmax, softmax_temp, PROB_FLOOR};
use crate::data::{TaskSample, EOS};
use crate::error::{Error, Result};
use crate::model::{AdaptiveDecoderHead, BaseModel, InferState};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    FixedTemp(f64),
    AdaptiveSeq,
    AdaptiveTok,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TempSelection {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingPolicy {
    pub variant: PolicyVariant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temp_selection: Option<TempSelection>,
    pub max_new_tokens: usize,
}

impl DecodingPolicy {
    pub fn fixed(tau: f64, max_new_tokens: usize) -> Self {
        DecodingPolicy { variant: PolicyVariant::FixedTemp(tau), temp_selection: None, max_new_tokens }
    }

    pub fn adaptive_seq(sel: TempSelection, max_new_tokens: usize) -> Self {
        DecodingPolicy { variant: PolicyVariant::AdaptiveSeq, temp_selection: Some(sel), max_new_tokens }
    }

    pub fn adaptive_tok(sel: TempSelection, max_new_tokens: usize) -> Self {
        DecodingPolicy { variant: PolicyVariant::AdaptiveTok, temp_selection: Some(sel), max_new_tokens }
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            PolicyVariant::FixedTemp(tau) => {
                if !(0.0..=2.0).contains(&tau) {
                    return Err(Error::Contract(format!("fixed temperature {tau} outside [0, 2]")));
                }
                if self.temp_selection.is_some() {
                    return Err(Error::Contract("temp_selection only applies to adaptive variants".into()));
                }
            }
            PolicyVariant::AdaptiveSeq | PolicyVariant::AdaptiveTok => {
                if self.temp_selection.is_none() {
                    return Err(Error::Contract("adaptive variants require a temp_selection".into()));
                }
            }
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Contract("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a single generation produced, including the temperature
/// choices and log-probabilities the preference losses consume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    /// One entry per response token (per-token adaptive), exactly one
    /// (per-sequence adaptive), or empty (fixed temperature).
    pub temp_index: Vec<usize>,
    pub temp_logprob: Vec<f64>,
    pub token_logprob: Vec<f64>,
    pub rng_seed: u64,
}

impl GenerationRecord {
    pub fn validate(&self, variant: PolicyVariant, k: usize) -> Result<()> {
        if self.token_logprob.len() != self.response.len() {
            return Err(Error::Contract("token_logprob length must match response".into()));
        }
        if self.temp_logprob.len() != self.temp_index.len() {
            return Err(Error::Contract("temp_logprob length must match temp_index".into()));
        }
        let want = match variant {
            PolicyVariant::FixedTemp(_) => 0,
            PolicyVariant::AdaptiveSeq => 1,
            PolicyVariant::AdaptiveTok => self.response.len(),
        };
        if self.temp_index.len() != want {
            return Err(Error::Contract(format!(
                "variant expects {want} temp indices, record has {}",
                self.temp_index.len()
            )));
        }
        if let Some(&bad) = self.temp_index.iter().find(|&&i| i >= k) {
            return Err(Error::IndexOutOfRange(format!("temp index {bad} >= grid size {k}")));
        }
        Ok(())
    }
}

/// Draws the next token at temperature `tau`. τ=0 is argmax with a
/// lowest-index tie-break and log-probability 0 by convention.
pub fn sample_token(logits: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> Result<(u32, f64)> {
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN logits in sample_token".into()));
    }
    if tau == 0.0 {
        return Ok((argmax(logits) as u32, 0.0));
    }
    let probs = softmax_temp(logits, tau)?;
    let id = multinomial(&probs, rng);
    Ok((id as u32, probs[id].max(PROB_FLOOR).ln()))
}

/// Argmax temperature selection with a lowest-index tie-break.
pub fn select_temp_greedy(p: &[f64], grid: &[f64]) -> (f64, usize) {
    let i = argmax(p);
    (grid[i], i)
}

/// Multinomial temperature selection; the returned logprob is ln p[index].
pub fn select_temp_sample(p: &[f64], grid: &[f64], rng: &mut ChaCha8Rng) -> (f64, usize, f64) {
    let i = multinomial(p, rng);
    (grid[i], i, p[i].max(PROB_FLOOR).ln())
}

/// Marginal next-token distribution Σ_k p[k]·softmax(logits/τ_k); a grid
/// entry τ=0 contributes a one-hot at the argmax.
pub fn mixture_next_token_dist(logits: &[f64], p: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    for (k, &tau) in grid.iter().enumerate() {
        if tau == 0.0 {
            out[argmax(logits)] += p[k];
        } else {
            for (o, q) in out.iter_mut().zip(softmax_temp(logits, tau)?) {
                *o += p[k] * q;
            }
        }
    }
    Ok(out)
}

fn multinomial(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Runs one generation under `policy`, recording temperature indices and
/// all log-probabilities. Stops at EOS (which is kept in the response) or
/// after `max_new_tokens`.
pub fn generate(
    base: &BaseModel,
    head: Option<&AdaptiveDecoderHead>,
    sample: &TaskSample,
    policy: &DecodingPolicy,
    rng_seed: u64,
) -> Result<GenerationRecord> {
    policy.validate()?;
    if sample.prompt.is_empty() {
        return Err(Error::Contract("empty prompt".into()));
    }
    if sample.prompt.len() + policy.max_new_tokens > base.config.ctx_len {
        return Err(Error::Length(format!(
            "prompt ({}) plus max_new_tokens ({}) exceeds ctx_len ({})",
            sample.prompt.len(),
            policy.max_new_tokens,
            base.config.ctx_len
        )));
    }
    let adaptive = !matches!(policy.variant, PolicyVariant::FixedTemp(_));
    let head = match (adaptive, head) {
        (true, Some(h)) => Some(h),
        (true, None) => return Err(Error::Contract("adaptive policy requires a head".into())),
        (false, h) => h,
    };
    let mut rng = crate::rng::stream_from_seed(rng_seed);
    let mut state = InferState::new(base);
    let mut h = Vec::new();
    for &t in &sample.prompt {
        h = state.feed(t)?;
    }

    let mut record = GenerationRecord {
        prompt: sample.prompt.clone(),
        response: Vec::new(),
        temp_index: Vec::new(),
        temp_logprob: Vec::new(),
        token_logprob: Vec::new(),
        rng_seed,
    };
    let pick_temp = |h: &[f64], rng: &mut ChaCha8Rng| -> Result<(f64, usize, f64)> {
        let head = head.expect("adaptive policy has a head");
        let p = head.temp_distribution(h)?;
        Ok(match policy.temp_selection.expect("validated") {
            TempSelection::Greedy => {
                let (tau, i) = select_temp_greedy(&p, &head.grid);
                (tau, i, p[i].max(PROB_FLOOR).ln())
            }
            TempSelection::Sample => select_temp_sample(&p, &head.grid, rng),
        })
    };

    let mut seq_tau = match policy.variant {
        PolicyVariant::FixedTemp(tau) => tau,
        PolicyVariant::AdaptiveSeq => {
            let (tau, i, lp) = pick_temp(&h, &mut rng)?;
            record.temp_index.push(i);
            record.temp_logprob.push(lp);
            tau
        }
        PolicyVariant::AdaptiveTok => 0.0,
    };

    for _ in 0..policy.max_new_tokens {
        if matches!(policy.variant, PolicyVariant::AdaptiveTok) {
            let (tau, i, lp) = pick_temp(&h, &mut rng)?;
            record.temp_index.push(i);
            record.temp_logprob.push(lp);
            seq_tau = tau;
        }
        let logits = base.token_logits(&h)?;
        let (tok, lp) = sample_token(&logits, seq_tau, &mut rng)?;
        record.response.push(tok);
        record.token_logprob.push(lp);
        if tok == EOS {
            break;
        }
        h = state.feed(tok)?;
    }
    Ok(record)
}

/// Recomputes each response token's log-probability from the model and the
/// recorded temperature indices (or the fixed temperature in `policy`).
pub fn replay(base: &BaseModel, grid: &[f64], policy: &DecodingPolicy, record: &GenerationRecord) -> Result<Vec<f64>> {
    record.validate(policy.variant, grid.len().max(1))?;
    let mut state = InferState::new(base);
    let mut h = Vec::new();
    for &t in &record.prompt {
        h = state.feed(t)?;
    }
    let mut out = Vec::with_capacity(record.response.len());
    for (step, &tok) in record.response.iter().enumerate() {
        let tau = match policy.variant {
            PolicyVariant::FixedTemp(tau) => tau,
            PolicyVariant::AdaptiveSeq => grid[record.temp_index[0]],
            PolicyVariant::AdaptiveTok => grid[record.temp_index[step]],
        };
        let logits = base.token_logits(&h)?;
        if tau == 0.0 {
            out.push(0.0);
        } else {
            let probs = softmax_temp(&logits, tau)?;
            out.push(probs[tok as usize].max(PROB_FLOOR).ln());
        }
        if step + 1 < record.response.len() {
            h = state.feed(tok)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskTag;
    use crate::model::ModelConfig;
    use crate::rng::stream_from_seed;

    fn tiny_base() -> BaseModel {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ctx_len: 32,
            head_hidden: 8,
            temperature_grid: vec![0.0, 0.5, 1.0],
        };
        BaseModel::init(cfg, 7).unwrap()
    }

    fn tiny_head(base: &BaseModel, seed: u64) -> AdaptiveDecoderHead {
        AdaptiveDecoderHead::init(base.config.d_model, base.config.head_hidden, base.config.temperature_grid.clone(), seed)
            .unwrap()
    }

    fn prompt_sample(ids: &[u32]) -> TaskSample {
        TaskSample { task: TaskTag::Diverse, prompt: ids.to_vec(), gold: None, constraint: None }
    }

    #[test]
    fn sample_token_sharp_and_flat() {
        let mut rng = stream_from_seed(1);
        // Sharp logits at low temperature: near-deterministic.
        let mut hits = 0;
        for _ in 0..10_000 {
            let (t, _) = sample_token(&[10.0, -10.0], 0.2, &mut rng).unwrap();
            hits += (t == 0) as u32;
        }
        assert!(hits as f64 / 10_000.0 > 0.999, "freq {hits}");
        // Flat logits: fair coin within binomial CI.
        let mut heads = 0;
        for _ in 0..100_000 {
            let (t, lp) = sample_token(&[0.0, 0.0], 1.0, &mut rng).unwrap();
            heads += (t == 0) as u32;
            assert!((lp - 0.5f64.ln()).abs() < 1e-12);
        }
        let f = heads as f64 / 100_000.0;
        assert!((0.49..=0.51).contains(&f), "freq {f}");
    }

    #[test]
    fn sample_token_greedy_and_errors() {
        let mut rng = stream_from_seed(2);
        let (t, lp) = sample_token(&[1.0, 3.0, 2.0], 0.0, &mut rng).unwrap();
        assert_eq!((t, lp), (1, 0.0));
        // Ties break to the lowest index.
        assert_eq!(sample_token(&[5.0, 5.0], 0.0, &mut rng).unwrap().0, 0);
        assert!(matches!(sample_token(&[f64::NAN, 0.0], 1.0, &mut rng), Err(Error::Numeric(_))));
    }

    #[test]
    fn greedy_temp_selection() {
        assert_eq!(select_temp_greedy(&[0.1, 0.7, 0.2], &[0.0, 0.5, 1.0]), (0.5, 1));
        assert_eq!(select_temp_greedy(&[0.25; 4], &[0.0, 0.2, 0.4, 0.6]), (0.0, 0));
        assert_eq!(select_temp_greedy(&[0.0, 0.0, 1.0], &[0.0, 0.5, 1.0]), (1.0, 2));
    }

    #[test]
    fn sampled_temp_selection_matches_distribution() {
        let p = [0.25, 0.75];
        let grid = [0.2, 0.8];
        let mut rng = stream_from_seed(3);
        let n = 100_000;
        let mut count1 = 0u32;
        for _ in 0..n {
            let (tau, i, lp) = select_temp_sample(&p, &grid, &mut rng);
            assert_eq!(tau, grid[i]);
            assert!((lp - p[i].ln()).abs() < 1e-12);
            count1 += (i == 1) as u32;
        }
        let f = count1 as f64 / n as f64;
        let sigma = (0.75 * 0.25 / n as f64).sqrt();
        assert!((f - 0.75).abs() < 3.0 * sigma, "freq {f}");
    }

    #[test]
    fn mixture_closed_form_and_degenerate() {
        // Single-temperature mixture is exactly softmax_temp.
        let logits = [0.3, -1.2, 2.0];
        let m = mixture_next_token_dist(&logits, &[1.0], &[0.7]).unwrap();
        let s = softmax_temp(&logits, 0.7).unwrap();
        for (a, b) in m.iter().zip(&s) {
            assert!((a - b).abs() < 1e-15);
        }
        // Closed-form two-component mixture.
        let m = mixture_next_token_dist(&[0.0, 2f64.ln()], &[0.5, 0.5], &[0.5, 1.0]).unwrap();
        assert!((m[0] - 4.0 / 15.0).abs() < 1e-12);
        assert!((m[1] - 11.0 / 15.0).abs() < 1e-12);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // τ=0 contributes a one-hot at the argmax.
        let m = mixture_next_token_dist(&[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m, vec![0.0, 1.0]);
    }

    #[test]
    fn two_stage_sampling_matches_mixture() {
        let logits = [0.5, -0.5, 1.5, 0.0];
        let p = [0.2, 0.5, 0.3];
        let grid = [0.0, 0.5, 1.0];
        let want = mixture_next_token_dist(&logits, &p, &grid).unwrap();
        let mut rng = stream_from_seed(4);
        let n = 100_000;
        let mut counts = [0u32; 4];
        for _ in 0..n {
            let (tau, _, _) = select_temp_sample(&p, &grid, &mut rng);
            let (t, _) = sample_token(&logits, tau, &mut rng).unwrap();
            counts[t as usize] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&want)
            .map(|(&c, &w)| (c as f64 / n as f64 - w).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn policy_validation() {
        assert!(DecodingPolicy::fixed(2.5, 8).validate().is_err());
        assert!(DecodingPolicy::fixed(-0.1, 8).validate().is_err());
        assert!(DecodingPolicy::fixed(0.0, 0).validate().is_err());
        let mut p = DecodingPolicy::fixed(1.0, 8);
        p.temp_selection = Some(TempSelection::Greedy);
        assert!(p.validate().is_err());
        let mut p = DecodingPolicy::adaptive_seq(TempSelection::Sample, 8);
        assert!(p.validate().is_ok());
        p.temp_selection = None;
        assert!(p.validate().is_err());
    }

    #[test]
    fn greedy_generation_is_rng_independent() {
        let base = tiny_base();
        let s = prompt_sample(&[0, 3, 4]);
        let policy = DecodingPolicy::fixed(0.0, 8);
        let a = generate(&base, None, &s, &policy, 1).unwrap();
        let b = generate(&base, None, &s, &policy, 999).unwrap();
        assert_eq!(a.response, b.response);
        assert!(a.temp_index.is_empty());
        assert!(a.token_logprob.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn seeded_adaptive_generation_is_deterministic() {
        let base = tiny_base();
        let head = tiny_head(&base, 5);
        let s = prompt_sample(&[0, 2, 6]);
        let policy = DecodingPolicy::adaptive_seq(TempSelection::Sample, 8);
        let a = generate(&base, Some(&head), &s, &policy, 42).unwrap();
        let b = generate(&base, Some(&head), &s, &policy, 42).unwrap();
        assert_eq!(a.response, b.response);
        assert_eq!(a.temp_index, b.temp_index);
        assert_eq!(a.token_logprob, b.token_logprob);
        assert_eq!(a.temp_index.len(), 1);
        a.validate(policy.variant, head.k()).unwrap();
    }

    #[test]
    fn per_token_records_one_index_per_token() {
        let base = tiny_base();
        let head = tiny_head(&base, 5);
        let s = prompt_sample(&[0, 2, 6]);
        let policy = DecodingPolicy::adaptive_tok(TempSelection::Sample, 6);
        let r = generate(&base, Some(&head), &s, &policy, 9).unwrap();
        assert_eq!(r.temp_index.len(), r.response.len());
        r.validate(policy.variant, head.k()).unwrap();
        assert!(generate(&base, None, &s, &policy, 9).is_err());
    }

    #[test]
    fn context_overflow_is_length_error() {
        let base = tiny_base();
        let s = prompt_sample(&[0; 30]);
        let policy = DecodingPolicy::fixed(1.0, 8);
        assert!(matches!(generate(&base, None, &s, &policy, 1), Err(Error::Length(_))));
    }

    #[test]
    fn replay_reproduces_token_logprobs() {
        let base = tiny_base();
        let head = tiny_head(&base, 5);
        let s = prompt_sample(&[0, 1, 2, 3]);
        for policy in [
            DecodingPolicy::fixed(0.8, 8),
            DecodingPolicy::adaptive_seq(TempSelection::Sample, 8),
            DecodingPolicy::adaptive_tok(TempSelection::Sample, 8),
        ] {
            let r = generate(&base, Some(&head), &s, &policy, 11).unwrap();
            let again = replay(&base, &head.grid, &policy, &r).unwrap();
            assert_eq!(again.len(), r.token_logprob.len());
            for (a, b) in again.iter().zip(&r.token_logprob) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}
