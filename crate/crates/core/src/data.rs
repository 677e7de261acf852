//! Char-level tokenizer, toy story grammar, and synthetic task generators.
//!
//! The task suite mirrors a mixture of exact-answer arithmetic, open-ended
//! story writing under a small probabilistic grammar, constrained story
//! writing (every sentence must begin with a designated letter), a blended
//! general task, and plain text completion. All generators are pure given
//! a seed.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
/// Sentence separator; round-trips as '.' in text.
pub const SEP: u32 = 2;

const CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 +-=?:,";

/// Char-level tokenizer over a fixed alphabet plus BOS/EOS/SEP.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    to_id: std::collections::HashMap<char, u32>,
    to_char: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut to_id = std::collections::HashMap::new();
        let mut to_char = vec!['\0', '\0', '.'];
        to_id.insert('.', SEP);
        for (i, c) in CHARS.chars().enumerate() {
            to_id.insert(c, 3 + i as u32);
            to_char.push(c);
        }
        Tokenizer { to_id, to_char }
    }

    pub fn vocab_size(&self) -> usize {
        self.to_char.len()
    }

    pub fn encode(&self, s: &str) -> Result<Vec<u32>> {
        s.chars()
            .map(|c| {
                self.to_id
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("character {c:?} outside the alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&t| t != BOS && t != EOS)
            .map(|&t| self.to_char.get(t as usize).copied().unwrap_or('\u{fffd}'))
            .collect()
    }
}

// ── Story grammar ────────────────────────────────────────────────────

pub const SUBJECTS: [&str; 6] = ["ana", "bob", "cal", "dot", "eve", "fay"];
pub const VERBS: [&str; 4] = ["sees", "pets", "has", "met"];
pub const OBJECTS: [&str; 6] = ["a cat", "a dog", "a fox", "a hen", "a pig", "an owl"];

/// First letters of the grammar's sentence-initial words.
pub fn sentence_initial_alphabet() -> Vec<char> {
    SUBJECTS.iter().map(|s| s.chars().next().unwrap()).collect()
}

/// All productions of the one-sentence grammar.
pub fn enumerate_sentences() -> Vec<String> {
    let mut out = Vec::new();
    for s in SUBJECTS {
        for v in VERBS {
            for o in OBJECTS {
                out.push(format!("{s} {v} {o}"));
            }
        }
    }
    out
}

pub fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} {}",
        SUBJECTS[rng.gen_range(0..SUBJECTS.len())],
        VERBS[rng.gen_range(0..VERBS.len())],
        OBJECTS[rng.gen_range(0..OBJECTS.len())]
    )
}

fn sentence_with_initial(initial: char, rng: &mut ChaCha8Rng) -> String {
    let subj = SUBJECTS.iter().find(|s| s.starts_with(initial)).expect("initial from grammar");
    format!(
        "{} {} {}",
        subj,
        VERBS[rng.gen_range(0..VERBS.len())],
        OBJECTS[rng.gen_range(0..OBJECTS.len())]
    )
}

/// True iff the text is a grammar sentence.
pub fn is_valid_sentence(s: &str) -> bool {
    let s = s.trim();
    SUBJECTS.iter().any(|subj| {
        s.strip_prefix(subj).is_some_and(|rest| {
            VERBS.iter().any(|v| {
                rest.strip_prefix(&format!(" {v} "))
                    .is_some_and(|obj| OBJECTS.contains(&obj))
            })
        })
    })
}

/// Fraction of '.'-delimited sentences that parse under the grammar.
/// A trailing unterminated fragment counts as one (invalid unless it
/// happens to parse); empty text scores 0.
pub fn grammar_validity_fraction(text: &str) -> f64 {
    let mut total = 0usize;
    let mut valid = 0usize;
    for seg in text.split('.') {
        if seg.is_empty() {
            continue;
        }
        total += 1;
        if is_valid_sentence(seg) {
            valid += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        valid as f64 / total as f64
    }
}

// ── Task samples ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Arith,
    Diverse,
    Constrained,
    Mixed,
    Completion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSample {
    pub task: TaskTag,
    pub prompt: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constraint: Option<u32>,
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract("sample count must be positive".into()));
    }
    Ok(())
}

fn arith_operands(rng: &mut ChaCha8Rng) -> (u32, char, u32) {
    let mut a = rng.gen_range(10..100u32);
    let mut b = rng.gen_range(10..100u32);
    let op = if rng.gen_bool(0.5) { '+' } else { '-' };
    if op == '-' && b > a {
        std::mem::swap(&mut a, &mut b);
    }
    (a, op, b)
}

fn arith_problem(rng: &mut ChaCha8Rng) -> (String, String) {
    let (a, op, b) = arith_operands(rng);
    let result = if op == '+' { a + b } else { a - b };
    (format!("q: {a}{op}{b}=? a:"), result.to_string())
}

/// Digit-wise worked form for a two-digit problem: a units step, a tens
/// step with an explicit carry or borrow, then the answer after a final
/// "=". Every step is a single-digit fact, so a small model can learn the
/// whole chain even though it cannot produce the answer in one shot.
pub fn arith_worked_form(a: u32, op: char, b: u32) -> String {
    let (au, at, bu, bt) = (a % 10, a / 10, b % 10, b / 10);
    if op == '+' {
        let u = au + bu;
        let t = at + bt + u / 10;
        let ans = a + b;
        if u >= 10 {
            format!("{au}+{bu}={u}, {at}+{bt}+1={t}, ={ans}")
        } else {
            format!("{au}+{bu}={u}, {at}+{bt}={t}, ={ans}")
        }
    } else {
        let ans = a - b;
        if au < bu {
            let u = 10 + au - bu;
            let t = at - 1 - bt;
            format!("1{au}-{bu}={u}, {at}-{bt}-1={t}, ={ans}")
        } else {
            format!("{au}-{bu}={}, {at}-{bt}={}, ={ans}", au - bu, at - bt)
        }
    }
}

/// Exact-answer arithmetic prompts: "q: a op b =? a:" with the numeric
/// answer as gold.
pub fn gen_arith(n: usize, seed: u64) -> Result<Vec<TaskSample>> {
    check_n(n)?;
    let tok = Tokenizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (text, gold) = arith_problem(&mut rng);
            Ok(TaskSample {
                task: TaskTag::Arith,
                prompt: with_bos(tok.encode(&text)?),
                gold: Some(gold),
                constraint: None,
            })
        })
        .collect()
}

/// Open-ended story prompts: a seed sentence under the grammar; many
/// continuations are valid and there is no gold answer.
pub fn gen_diverse(n: usize, seed: u64) -> Result<Vec<TaskSample>> {
    check_n(n)?;
    let tok = Tokenizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let text = format!("story: {}.", random_sentence(&mut rng));
            Ok(TaskSample { task: TaskTag::Diverse, prompt: with_bos(tok.encode(&text)?), gold: None, constraint: None })
        })
        .collect()
}

/// Story prompts plus a designated sentence-initial letter; every
/// sentence of a compliant response begins with that token.
pub fn gen_constrained(n: usize, seed: u64) -> Result<Vec<TaskSample>> {
    check_n(n)?;
    let tok = Tokenizer::new();
    let initials = sentence_initial_alphabet();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c = initials[rng.gen_range(0..initials.len())];
            let text = format!("con {c}: {}.", sentence_with_initial(c, &mut rng));
            let constraint = tok.encode(&c.to_string())?[0];
            Ok(TaskSample {
                task: TaskTag::Constrained,
                prompt: with_bos(tok.encode(&text)?),
                gold: None,
                constraint: Some(constraint),
            })
        })
        .collect()
}

/// The blended training mixture: `n_arith` arithmetic samples, `n_diverse`
/// story samples, and `n_general` mixed samples whose surface tag is
/// `mixed` (the content is a 50/50 blend of the two styles, so the
/// temperature must be inferred from content).
pub fn gen_mixed(n_arith: usize, n_diverse: usize, n_general: usize, seed: u64) -> Result<Vec<TaskSample>> {
    check_n(n_arith + n_diverse + n_general)?;
    let mut out = Vec::with_capacity(n_arith + n_diverse + n_general);
    if n_arith > 0 {
        out.extend(gen_arith(n_arith, seed)?);
    }
    if n_diverse > 0 {
        out.extend(gen_diverse(n_diverse, seed.wrapping_add(1))?);
    }
    if n_general > 0 {
        let tok = Tokenizer::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        for i in 0..n_general {
            let text = if i % 2 == 0 {
                arith_problem(&mut rng).0
            } else {
                format!("story: {}.", random_sentence(&mut rng))
            };
            out.push(TaskSample { task: TaskTag::Mixed, prompt: with_bos(tok.encode(&text)?), gold: None, constraint: None });
        }
    }
    Ok(out)
}

/// Completion prompts: held-out grammar text truncated to a fixed-length
/// prefix.
pub fn gen_completion(n: usize, seed: u64, prefix_len: usize) -> Result<Vec<TaskSample>> {
    check_n(n)?;
    let tok = Tokenizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let n_sent = rng.gen_range(6..10);
            let mut text = String::new();
            for _ in 0..n_sent {
                text.push_str(&random_sentence(&mut rng));
                text.push('.');
            }
            let ids = tok.encode(&text)?;
            let cut = prefix_len.min(ids.len());
            Ok(TaskSample { task: TaskTag::Completion, prompt: with_bos(ids[..cut].to_vec()), gold: None, constraint: None })
        })
        .collect()
}

/// If `text` is an arithmetic prompt ("q: {a}{op}{b}=? a:"), returns the
/// canonical answer. Lets reward oracles score arithmetic content whose
/// gold is deliberately hidden (the mixed task).
pub fn arith_prompt_answer(text: &str) -> Option<String> {
    let rest = text.strip_prefix("q: ")?;
    let expr = rest.split("=?").next()?;
    let (i, op) = expr.char_indices().skip(1).find(|(_, c)| *c == '+' || *c == '-')?;
    let a: i64 = expr[..i].trim().parse().ok()?;
    let b: i64 = expr[i + 1..].trim().parse().ok()?;
    let result = if op == '+' { a + b } else { a - b };
    Some(result.to_string())
}

fn with_bos(mut ids: Vec<u32>) -> Vec<u32> {
    ids.insert(0, BOS);
    ids
}

// ── Pretraining corpus ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub stories: usize,
    pub constrained: usize,
    pub arith: usize,
    pub copy: usize,
    pub text: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { stories: 600, constrained: 600, arith: 2400, copy: 300, text: 600 }
    }
}

/// Documents for next-token pretraining, one token sequence per document,
/// each wrapped in BOS/EOS. Document styles match the task prompts so the
/// frozen base can continue them.
pub fn build_pretrain_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<Vec<u32>>> {
    let tok = Tokenizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs: Vec<String> = Vec::new();
    for _ in 0..spec.stories {
        let n_sent = rng.gen_range(3..7);
        let mut t = String::from("story: ");
        for _ in 0..n_sent {
            t.push_str(&random_sentence(&mut rng));
            t.push('.');
        }
        docs.push(t);
    }
    let initials = sentence_initial_alphabet();
    for _ in 0..spec.constrained {
        let c = initials[rng.gen_range(0..initials.len())];
        let n_sent = rng.gen_range(3..7);
        let mut t = format!("con {c}: ");
        for _ in 0..n_sent {
            t.push_str(&sentence_with_initial(c, &mut rng));
            t.push('.');
        }
        docs.push(t);
    }
    for _ in 0..spec.arith {
        let (a, op, b) = arith_operands(&mut rng);
        docs.push(format!("q: {a}{op}{b}=? a: {}.", arith_worked_form(a, op, b)));
    }
    const COPYABLE: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    for _ in 0..spec.copy {
        let len = rng.gen_range(3..9);
        let s: String = (0..len).map(|_| COPYABLE[rng.gen_range(0..COPYABLE.len())] as char).collect();
        docs.push(format!("copy: {s} = {s}."));
    }
    for _ in 0..spec.text {
        let n_sent = rng.gen_range(6..10);
        let mut t = String::new();
        for _ in 0..n_sent {
            t.push_str(&random_sentence(&mut rng));
            t.push('.');
        }
        docs.push(t);
    }
    docs.iter()
        .map(|d| {
            let mut ids = vec![BOS];
            ids.extend(tok.encode(d)?);
            ids.push(EOS);
            Ok(ids)
        })
        .collect()
}

/// Writes a plain-text corpus, one document per line.
pub fn write_corpus_text(path: &std::path::Path, docs: &[Vec<u32>]) -> Result<()> {
    let tok = Tokenizer::new();
    let mut out = String::new();
    for d in docs {
        out.push_str(&tok.decode(d));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
