//! Reward oracles and a client for an external reward service.
//!
//! Every oracle is pure and deterministic and returns "higher is better"
//! scores; the repeat oracle is therefore used through its negation by the
//! pair builder.

use crate::data::{grammar_validity_fraction, Tokenizer, EOS};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub components: BTreeMap<String, f64>,
}

impl Score {
    pub fn new(value: f64) -> Result<Self> {
        Self::with_components(value, BTreeMap::new())
    }

    pub fn with_components(value: f64, components: BTreeMap<String, f64>) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("score value {value} is not finite")));
        }
        Ok(Score { value, components })
    }
}

/// Fraction of length-`n` windows that duplicate an earlier window in the
/// same sequence. Sequences shorter than n+1 tokens score 0.
pub fn ngram_repeat_rate(tokens: &[u32], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("n-gram order must be at least 1".into()));
    }
    if tokens.len() < n + 1 {
        return Ok(0.0);
    }
    let windows: Vec<&[u32]> = tokens.windows(n).collect();
    let mut seen = std::collections::HashSet::new();
    let mut dup = 0usize;
    for w in &windows {
        if !seen.insert(*w) {
            dup += 1;
        }
    }
    Ok(dup as f64 / windows.len() as f64)
}

/// Fraction of SEP-delimited sentences whose first token is the constraint
/// token. A trailing unterminated sentence counts; an empty response
/// scores 0.
pub fn constraint_rate(response: &[u32], constraint_token: u32, sep: u32) -> f64 {
    let body: Vec<u32> = response.iter().copied().filter(|&t| t != EOS).collect();
    let mut total = 0usize;
    let mut ok = 0usize;
    for sentence in body.split(|&t| t == sep) {
        if sentence.is_empty() {
            continue;
        }
        total += 1;
        if sentence[0] == constraint_token {
            ok += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        ok as f64 / total as f64
    }
}

/// Canonical answer form shared by the exact-answer oracle and majority
/// voting: trimmed, trailing '.' removed, leading zeros normalized.
pub fn canonical_answer(s: &str) -> String {
    let s = s.trim().trim_end_matches('.').trim();
    let t = s.trim_start_matches('0');
    if t.is_empty() && !s.is_empty() {
        "0".into()
    } else {
        t.into()
    }
}

/// 1.0 iff the text after the final '=' in the response, stripped and with
/// leading zeros normalized, equals `gold`.
pub fn exact_answer_reward(response: &[u32], gold: &str) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Contract("gold answer must be nonempty".into()));
    }
    let text = Tokenizer::new().decode(response);
    let Some(eq) = text.rfind('=') else {
        return Ok(0.0);
    };
    let hit = canonical_answer(&text[eq + 1..]) == canonical_answer(gold);
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Evaluates one worked-form step like "7+8=15", "4+3+1=8" or "12-7=5":
/// the left side, folded left-to-right over +/-, must equal the right side.
fn step_holds(step: &str) -> bool {
    let Some((lhs, rhs)) = step.split_once('=') else {
        return false;
    };
    let Ok(want) = rhs.trim().parse::<i64>() else {
        return false;
    };
    let mut total = 0i64;
    let mut term = String::new();
    let mut sign = 1i64;
    for c in lhs.trim().chars().chain(std::iter::once('+')) {
        if c.is_ascii_digit() {
            term.push(c);
        } else if c == '+' || c == '-' {
            let Ok(v) = term.parse::<i64>() else {
                return false;
            };
            total += sign * v;
            term.clear();
            sign = if c == '-' { -1 } else { 1 };
        } else {
            return false;
        }
    }
    total == want
}

/// Fraction of intermediate worked-form steps (the comma-separated
/// equations before the final "=answer") that are arithmetically true.
/// Grades otherwise-tied exact-answer scores so preference pairs can
/// separate sloppy from coherent reasoning chains.
pub fn arith_step_reward(response: &[u32]) -> f64 {
    let text = Tokenizer::new().decode(response);
    let text = text.trim().trim_end_matches('.').trim();
    let parts: Vec<&str> = text.split(", ").collect();
    if parts.len() < 2 {
        return 0.0;
    }
    let inner = &parts[..parts.len() - 1];
    inner.iter().filter(|s| step_holds(s)).count() as f64 / inner.len() as f64
}

/// Distinct-2-gram ratio, distinct complete sentences, and grammar
/// validity, multiplied; the stand-in for an external reward model on the
/// open-ended story task. The sentence factor punishes verbatim sentence
/// loops much harder than the 2-gram ratio alone.
pub fn diversity_reward(response: &[u32]) -> Result<Score> {
    let body: Vec<u32> = response.iter().copied().filter(|&t| t != EOS).collect();
    let distinct = if body.len() < 2 {
        1.0
    } else {
        let total = body.len() - 1;
        let unique: std::collections::HashSet<&[u32]> = body.windows(2).collect();
        unique.len() as f64 / total as f64
    };
    let text = Tokenizer::new().decode(&body);
    let sentences: Vec<&str> = text.split('.').filter(|s| !s.is_empty()).collect();
    // The trailing fragment (no closing '.') still counts, like validity.
    let distinct_sentences = if sentences.is_empty() {
        1.0
    } else {
        let unique: std::collections::HashSet<&&str> = sentences.iter().collect();
        unique.len() as f64 / sentences.len() as f64
    };
    let validity = grammar_validity_fraction(&text);
    let mut components = BTreeMap::new();
    components.insert("distinct_2gram".into(), distinct);
    components.insert("distinct_sentences".into(), distinct_sentences);
    components.insert("grammar_validity".into(), validity);
    Score::with_components(distinct * distinct_sentences * validity, components)
}

/// Diversity reward for the constrained story task, blind to each
/// sentence's first character. The constraint pins sentence-initial
/// characters, so a reward that counted them would score rule-breaking as
/// creativity; stripping them keeps the reward orthogonal to compliance.
pub fn constrained_story_reward(response: &[u32]) -> Result<Score> {
    let body: Vec<u32> = response.iter().copied().filter(|&t| t != EOS).collect();
    let text = Tokenizer::new().decode(&body);
    let validity = grammar_validity_fraction(&text);
    let stripped: Vec<&str> = text
        .split('.')
        .filter(|s| !s.is_empty())
        .map(|s| &s[s.len().min(1)..])
        .collect();
    let distinct_sentences = if stripped.is_empty() {
        1.0
    } else {
        let unique: std::collections::HashSet<&&str> = stripped.iter().collect();
        unique.len() as f64 / stripped.len() as f64
    };
    let joined = stripped.join(".");
    let chars: Vec<char> = joined.chars().collect();
    let distinct = if chars.len() < 2 {
        1.0
    } else {
        let unique: std::collections::HashSet<&[char]> = chars.windows(2).collect();
        unique.len() as f64 / (chars.len() - 1) as f64
    };
    let mut components = BTreeMap::new();
    components.insert("distinct_2gram".into(), distinct);
    components.insert("distinct_sentences".into(), distinct_sentences);
    components.insert("grammar_validity".into(), validity);
    Score::with_components(distinct * distinct_sentences * validity, components)
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
    response: &'a str,
}

/// Scores a response via `POST {endpoint}/score`, retrying twice on
/// transient failures.
pub fn remote_score(endpoint: &str, prompt: &str, response: &str, timeout: Duration) -> Result<Score> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let url = format!("{}/score", endpoint.trim_end_matches('/'));
    let mut last = String::new();
    for _ in 0..3 {
        match agent.post(&url).send_json(ScoreRequest { prompt, response }) {
            Ok(mut resp) => {
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| Error::Remote(format!("unreadable score payload: {e}")))?;
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Remote(format!("malformed score payload: {e}")))?;
                return match v.get("score").and_then(|s| s.as_f64()) {
                    Some(x) if x.is_finite() => Score::new(x),
                    _ => Err(Error::Protocol(format!("score field missing or non-finite in {text}"))),
                };
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Remote(format!("score request to {url} failed after 3 attempts: {last}")))
}
