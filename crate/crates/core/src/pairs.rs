//! Preference-pair construction from scored generations.
//!
//! Pairs embed both full generation records so the losses can recompute
//! any probability later without regenerating. Prompts whose samples all
//! tie are dropped: a tied pair gives the preference loss a zero or
//! misleading margin.

use crate::data::{TaskSample, TaskTag, SEP};
use crate::decoding::{generate, DecodingPolicy, GenerationRecord, PolicyVariant, TempSelection};
use crate::error::{Error, Result};
use crate::model::{AdaptiveDecoderHead, BaseModel};
use crate::rewards::{constraint_rate, Score};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferencePair {
    pub chosen: GenerationRecord,
    pub rejected: GenerationRecord,
    pub chosen_score: Score,
    pub rejected_score: Score,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.chosen.prompt != self.rejected.prompt {
            return Err(Error::Contract("pair records must share a prompt".into()));
        }
        if self.chosen_score.value < self.rejected_score.value {
            return Err(Error::Contract("chosen must not score below rejected".into()));
        }
        Ok(())
    }
}

/// Highest and lowest scoring responses become the chosen/rejected pair;
/// ties break to the lowest index, and a prompt where max == min yields no
/// pair.
pub fn build_pair_by_score(records: &[GenerationRecord], scores: &[Score]) -> Result<Option<PreferencePair>> {
    if records.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} records but {} scores",
            records.len(),
            scores.len()
        )));
    }
    if records.len() < 2 {
        return Err(Error::Contract("need at least two records to form a pair".into()));
    }
    let mut hi = 0usize;
    let mut lo = 0usize;
    for i in 1..scores.len() {
        if scores[i].value > scores[hi].value {
            hi = i;
        }
        if scores[i].value < scores[lo].value {
            lo = i;
        }
    }
    if scores[hi].value == scores[lo].value {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        chosen: records[hi].clone(),
        rejected: records[lo].clone(),
        chosen_score: scores[hi].clone(),
        rejected_score: scores[lo].clone(),
    }))
}

/// Constrained-task rule: the chosen response is the best constraint rate
/// among the top-4 reward-model-scored responses; the rejected is the
/// worst constraint rate among the bottom-4. Ties inside the 4-sets break
/// by reward-model score, then index. The pair is dropped when the
/// (constraint, reward) ordering fails to strictly separate the two.
pub fn build_pair_constrained(
    records: &[GenerationRecord],
    rm_scores: &[Score],
    constraint_rates: &[f64],
) -> Result<Option<PreferencePair>> {
    let n = records.len();
    if rm_scores.len() != n || constraint_rates.len() != n {
        return Err(Error::Contract("records, scores, and constraint rates must align".into()));
    }
    if n < 8 {
        return Err(Error::Contract(format!(
            "constrained pairing needs at least 8 responses, got {n}"
        )));
    }
    let mut by_rm: Vec<usize> = (0..n).collect();
    // Descending reward-model score, lowest index first on ties.
    by_rm.sort_by(|&a, &b| {
        rm_scores[b]
            .value
            .partial_cmp(&rm_scores[a].value)
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let top4 = &by_rm[..4];
    let bottom4 = &by_rm[n - 4..];
    let chosen = *top4
        .iter()
        .min_by(|&&a, &&b| {
            constraint_rates[b]
                .partial_cmp(&constraint_rates[a])
                .expect("rates are finite")
                .then(rm_scores[b].value.partial_cmp(&rm_scores[a].value).expect("finite"))
                .then(a.cmp(&b))
        })
        .expect("top set nonempty");
    let rejected = *bottom4
        .iter()
        .min_by(|&&a, &&b| {
            constraint_rates[a]
                .partial_cmp(&constraint_rates[b])
                .expect("rates are finite")
                .then(rm_scores[a].value.partial_cmp(&rm_scores[b].value).expect("finite"))
                .then(a.cmp(&b))
        })
        .expect("bottom set nonempty");
    let strictly_better = (constraint_rates[chosen], rm_scores[chosen].value)
        > (constraint_rates[rejected], rm_scores[rejected].value);
    if !strictly_better {
        return Ok(None);
    }
    let pack = |i: usize| {
        let mut components = rm_scores[i].components.clone();
        components.insert("rm_score".into(), rm_scores[i].value);
        Score::with_components(constraint_rates[i], components)
    };
    Ok(Some(PreferencePair {
        chosen: records[chosen].clone(),
        rejected: records[rejected].clone(),
        chosen_score: pack(chosen)?,
        rejected_score: pack(rejected)?,
    }))
}

#[derive(Debug)]
pub struct DatasetBuild {
    pub pairs: Vec<PreferencePair>,
    /// Prompts dropped because all scores tied or a per-prompt step failed.
    pub skipped: usize,
}

/// Generates `n_responses` records per prompt, scores them with `scorer`,
/// and builds one pair per informative prompt. Constrained-tagged samples
/// use the constrained rule; everything else pairs by score. Each record's
/// rng stream derives from (run_seed, sample index, response index), so
/// the dataset is reproducible and order-independent.
pub fn build_dataset<F>(
    base: &BaseModel,
    head: &AdaptiveDecoderHead,
    samples: &[TaskSample],
    n_responses: usize,
    policy: &DecodingPolicy,
    run_seed: u64,
    scorer: F,
) -> Result<DatasetBuild>
where
    F: Fn(&TaskSample, &GenerationRecord) -> Result<Score>,
{
    policy.validate()?;
    let adaptive_sampling = !matches!(policy.variant, PolicyVariant::FixedTemp(_))
        && policy.temp_selection == Some(TempSelection::Sample);
    if !adaptive_sampling {
        return Err(Error::Contract(
            "pair generation requires an adaptive policy with sampled temperatures".into(),
        ));
    }
    if n_responses < 2 {
        return Err(Error::Contract("need at least two responses per prompt".into()));
    }
    let constrained_present = samples
        .iter()
        .any(|s| s.task == TaskTag::Constrained && s.constraint.is_some());
    if constrained_present && n_responses < 8 {
        return Err(Error::Contract(
            "constrained samples need at least 8 responses per prompt".into(),
        ));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for (sample_id, sample) in samples.iter().enumerate() {
        let built = build_prompt_pair(base, head, sample, sample_id as u64, n_responses, policy, run_seed, &scorer);
        match built {
            Ok(Some(pair)) => pairs.push(pair),
            Ok(None) | Err(_) => skipped += 1,
        }
    }
    Ok(DatasetBuild { pairs, skipped })
}

#[allow(clippy::too_many_arguments)]
fn build_prompt_pair<F>(
    base: &BaseModel,
    head: &AdaptiveDecoderHead,
    sample: &TaskSample,
    sample_id: u64,
    n_responses: usize,
    policy: &DecodingPolicy,
    run_seed: u64,
    scorer: &F,
) -> Result<Option<PreferencePair>>
where
    F: Fn(&TaskSample, &GenerationRecord) -> Result<Score>,
{
    let mut records = Vec::with_capacity(n_responses);
    let mut scores = Vec::with_capacity(n_responses);
    for r in 0..n_responses {
        let seed = derive_seed(run_seed, sample_id, r as u64);
        let record = generate(base, Some(head), sample, policy, seed)?;
        scores.push(scorer(sample, &record)?);
        records.push(record);
    }
    match (sample.task, sample.constraint) {
        (TaskTag::Constrained, Some(c)) => {
            let rates: Vec<f64> = records.iter().map(|r| constraint_rate(&r.response, c, SEP)).collect();
            build_pair_constrained(&records, &scores, &rates)
        }
        _ => build_pair_by_score(&records, &scores),
    }
}

/// Truncates both records of a pair to their common response length.
///
/// The preference losses sum unnormalized per-decision log-probabilities,
/// so under a uniform head the margin of a token-level pair starts at
/// (len_rejected - len_chosen) * ln K instead of zero. When response
/// lengths differ systematically (e.g. degenerate responses run to the
/// token cap while clean ones stop at EOS), that offset saturates the
/// sigmoid before any temperature signal is seen. Length-matching restores
/// the zero-margin start while keeping every recorded decision aligned
/// with its hidden state.
pub fn length_match(pair: &mut PreferencePair) {
    let n = pair.chosen.response.len().min(pair.rejected.response.len());
    for r in [&mut pair.chosen, &mut pair.rejected] {
        let per_token = r.temp_index.len() == r.response.len();
        r.response.truncate(n);
        r.token_logprob.truncate(n);
        if per_token {
            r.temp_index.truncate(n);
            r.temp_logprob.truncate(n);
        }
    }
}

/// One pair per line, embedding both full records.
pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line)?;
        pair.validate()?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn rec(prompt: &[u32], response: &[u32]) -> GenerationRecord {
        GenerationRecord {
            prompt: prompt.to_vec(),
            response: response.to_vec(),
            temp_index: vec![0; response.len()],
            temp_logprob: vec![0.0; response.len()],
            token_logprob: vec![0.0; response.len()],
            rng_seed: 0,
        }
    }

    fn scores(vals: &[f64]) -> Vec<Score> {
        vals.iter().map(|&v| Score::new(v).unwrap()).collect()
    }

    #[test]
    fn by_score_picks_extremes_with_tie_break() {
        let recs: Vec<_> = (0..3).map(|i| rec(&[0], &[i])).collect();
        let p = build_pair_by_score(&recs, &scores(&[0.3, 0.9, 0.1])).unwrap().unwrap();
        assert_eq!(p.chosen.response, vec![1]);
        assert_eq!(p.rejected.response, vec![2]);
        p.validate().unwrap();

        let p = build_pair_by_score(&recs, &scores(&[1.0, 1.0, 0.0])).unwrap().unwrap();
        assert_eq!(p.chosen.response, vec![0]); // tie-break to lowest index
        assert_eq!(p.rejected.response, vec![2]);

        assert!(build_pair_by_score(&recs, &scores(&[0.5, 0.5, 0.5])).unwrap().is_none());
        assert!(build_pair_by_score(&recs, &scores(&[0.5, 0.5])).is_err());
        assert!(build_pair_by_score(&recs[..1], &scores(&[0.5])).is_err());
    }

    /// Exhaustive re-statement of the constrained rule, kept independent of
    /// the implementation.
    fn constrained_oracle(rm: &[f64], rates: &[f64]) -> (usize, usize) {
        let n = rm.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| rm[b].partial_cmp(&rm[a]).unwrap().then(a.cmp(&b)));
        let best = |set: &[usize], sign: f64| -> usize {
            let mut sel = set[0];
            for &i in &set[1..] {
                let key = |j: usize| (sign * rates[j], sign * rm[j]);
                if key(i) > key(sel) || (key(i) == key(sel) && i < sel) {
                    sel = i;
                }
            }
            sel
        };
        (best(&order[..4], 1.0), best(&order[n - 4..], -1.0))
    }

    #[test]
    fn constrained_fixture_matches_oracle() {
        // 16 responses; exactly one of the top-4 RM responses is fully
        // compliant.
        let rm: Vec<f64> = (0..16).map(|i| 1.0 - 0.05 * i as f64).collect();
        let mut rates = vec![0.25; 16];
        rates[2] = 1.0; // in the top-4 RM set
        rates[9] = 1.0; // high compliance but mid RM: must not be chosen
        rates[15] = 0.0;
        let recs: Vec<_> = (0..16u32).map(|i| rec(&[0], &[i])).collect();
        let p = build_pair_constrained(&recs, &scores(&rm), &rates).unwrap().unwrap();
        let (want_c, want_r) = constrained_oracle(&rm, &rates);
        assert_eq!(p.chosen.response, vec![want_c as u32]);
        assert_eq!(p.rejected.response, vec![want_r as u32]);
        assert_eq!(p.chosen.response, vec![2]);
        assert_eq!(p.rejected.response, vec![15]);
        assert_eq!(p.chosen_score.value, 1.0);
        assert_eq!(p.chosen_score.components["rm_score"], rm[2]);
        p.validate().unwrap();
    }

    #[test]
    fn constrained_all_compliant_reduces_to_rm() {
        let rm: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let rates = vec![1.0; 16];
        let recs: Vec<_> = (0..16u32).map(|i| rec(&[0], &[i])).collect();
        let p = build_pair_constrained(&recs, &scores(&rm), &rates).unwrap().unwrap();
        assert_eq!(p.chosen.response, vec![15]); // best RM within top-4
        assert_eq!(p.rejected.response, vec![0]); // worst RM within bottom-4
    }

    #[test]
    fn constrained_preconditions_and_ties() {
        let recs: Vec<_> = (0..7u32).map(|i| rec(&[0], &[i])).collect();
        assert!(build_pair_constrained(&recs, &scores(&[0.0; 7]), &[0.0; 7]).is_err());
        // Fully tied inputs are uninformative.
        let recs: Vec<_> = (0..8u32).map(|i| rec(&[0], &[i])).collect();
        assert!(build_pair_constrained(&recs, &scores(&[0.5; 8]), &[1.0; 8]).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn emitted_pairs_respect_ordering(vals in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            let recs: Vec<_> = (0..vals.len() as u32).map(|i| rec(&[0], &[i])).collect();
            if let Some(p) = build_pair_by_score(&recs, &scores(&vals)).unwrap() {
                prop_assert!(p.chosen_score.value > p.rejected_score.value);
            }
        }

        #[test]
        fn constrained_pairs_respect_lex_ordering(
            rm in proptest::collection::vec(0.0f64..1.0, 16),
            rates in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let recs: Vec<_> = (0..16u32).map(|i| rec(&[0], &[i])).collect();
            if let Some(p) = build_pair_constrained(&recs, &scores(&rm), &rates).unwrap() {
                let c = (p.chosen_score.value, p.chosen_score.components["rm_score"]);
                let r = (p.rejected_score.value, p.rejected_score.components["rm_score"]);
                prop_assert!(c > r);
            }
        }
    }

    fn tiny_setup() -> (BaseModel, AdaptiveDecoderHead) {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ctx_len: 64,
            head_hidden: 8,
            temperature_grid: vec![0.0, 0.5, 1.0],
        };
        let base = BaseModel::init(cfg.clone(), 7).unwrap();
        let head =
            AdaptiveDecoderHead::init(cfg.d_model, cfg.head_hidden, cfg.temperature_grid, 3).unwrap();
        (base, head)
    }

    fn prompts(n: usize) -> Vec<TaskSample> {
        (0..n)
            .map(|i| TaskSample {
                task: TaskTag::Diverse,
                prompt: vec![0, 3 + (i % 8) as u32],
                gold: None,
                constraint: None,
            })
            .collect()
    }

    #[test]
    fn dataset_build_is_deterministic_and_ordered() {
        let (base, head) = tiny_setup();
        let policy = DecodingPolicy::adaptive_tok(TempSelection::Sample, 8);
        let scorer = |_: &TaskSample, r: &GenerationRecord| Score::new(r.response[0] as f64);
        let a = build_dataset(&base, &head, &prompts(6), 4, &policy, 11, scorer).unwrap();
        let b = build_dataset(&base, &head, &prompts(6), 4, &policy, 11, scorer).unwrap();
        assert_eq!(a.pairs.len() + a.skipped, 6);
        assert_eq!(
            serde_json::to_string(&a.pairs).unwrap(),
            serde_json::to_string(&b.pairs).unwrap()
        );
        for p in &a.pairs {
            p.validate().unwrap();
            assert!(!p.chosen.temp_index.is_empty());
        }
        // Prompt order is preserved: prompts are distinct by second token.
        let order: Vec<usize> = a
            .pairs
            .iter()
            .map(|p| prompts(6).iter().position(|s| s.prompt == p.chosen.prompt).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]), "pairs out of prompt order: {order:?}");
    }

    #[test]
    fn dataset_build_counts_skips() {
        let (base, head) = tiny_setup();
        let policy = DecodingPolicy::adaptive_seq(TempSelection::Sample, 6);
        // Constant scores: every prompt is uninformative.
        let flat = |_: &TaskSample, _: &GenerationRecord| Score::new(0.5);
        let out = build_dataset(&base, &head, &prompts(5), 4, &policy, 1, flat).unwrap();
        assert_eq!(out.pairs.len(), 0);
        assert_eq!(out.skipped, 5);
        // Greedy temperature selection is rejected for pair generation.
        let greedy = DecodingPolicy::adaptive_seq(TempSelection::Greedy, 6);
        let scorer = |_: &TaskSample, r: &GenerationRecord| Score::new(r.response.len() as f64);
        assert!(build_dataset(&base, &head, &prompts(5), 4, &greedy, 1, scorer).is_err());
    }

    #[test]
    fn pairs_round_trip_jsonl() {
        let (base, head) = tiny_setup();
        let policy = DecodingPolicy::adaptive_tok(TempSelection::Sample, 6);
        let scorer = |_: &TaskSample, r: &GenerationRecord| Score::new(r.response[0] as f64);
        let built = build_dataset(&base, &head, &prompts(6), 4, &policy, 2, scorer).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&path, &built.pairs).unwrap();
        let back = read_pairs(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&built.pairs).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }
}
