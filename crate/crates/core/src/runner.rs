//! Pipeline stages behind the CLI: pretrain, pair generation, LPO
//! training, evaluation generation, scoring, and report rendering.
//!
//! Every artifact embeds the config hash and run seed that produced it;
//! the eval stage refuses to mix artifacts from different hashes unless
//! forced. All stage outputs are deterministic given the config.

use crate::checkpoint::Checkpoint;
use crate::config::{OracleConfig, RunConfig, TaskMix};
use crate::data::{self, TaskSample, TaskTag, Tokenizer, SEP};
use crate::decoding::{generate, DecodingPolicy, GenerationRecord, PolicyVariant, TempSelection};
use crate::error::{Error, Result};
use crate::eval::{temp_stats, winrate_constrained, winrate_correctness, winrate_score, EvalReport};
use crate::lpo;
use crate::model::{AdaptiveDecoderHead, BaseModel, PretrainConfig};
use crate::pairs::{build_dataset, PreferencePair};
use crate::rewards::{self,
    constraint_rate, diversity_reward, exact_answer_reward, ngram_repeat_rate, remote_score, Score,
};
use crate::rng::derive_seed;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Duration;

// Stage ids feeding the counter-based seed derivation.
const SEED_PRETRAIN_MODEL: u64 = 1;
const SEED_PRETRAIN_CORPUS: u64 = 2;
const SEED_TRAIN_TASKS: u64 = 3;
const SEED_EVAL_TASKS: u64 = 4;
const SEED_PAIR_GEN: u64 = 5;
const SEED_EVAL_GEN: u64 = 6;

/// First line of every JSONL artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub run_seed: u64,
    #[serde(default)]
    pub skipped: usize,
}

pub fn write_jsonl<T: Serialize>(path: &Path, meta: &ArtifactMeta, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, meta)?;
    f.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(ArtifactMeta, Vec<T>)> {
    let f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Config(format!("missing input {}: {e}", path.display()))
    })?);
    let mut lines = f.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))??;
    let meta: ArtifactMeta = serde_json::from_str(&head)?;
    let mut items = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            items.push(serde_json::from_str(&line)?);
        }
    }
    Ok((meta, items))
}

fn check_hash(meta_hash: &str, cfg: &RunConfig, what: &str, force: bool) -> Result<()> {
    let want = cfg.hash();
    if meta_hash != want && !force {
        return Err(Error::Config(format!(
            "{what} was produced by config {meta_hash}, current config is {want}; rerun upstream stages or pass --force"
        )));
    }
    Ok(())
}

/// Order-preserving parallel map over indices; results are independent of
/// worker scheduling because every item owns its seed.
fn par_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let n = items.len();
    let mut out: Vec<Option<Result<U>>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot_chunk) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in slot_chunk.iter_mut().enumerate() {
                    let i = w * chunk + j;
                    *slot = Some(f(i, &items[i]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

/// Task-appropriate local score: exact answers for arithmetic content
/// (re-deriving the answer from the prompt when the gold is hidden, plus
/// partial credit for true worked-form steps so ties can break on chain
/// coherence), negated 3-gram repeats for completion, and the diversity
/// reward model stand-in elsewhere.
pub fn local_score(sample: &TaskSample, record: &GenerationRecord) -> Result<Score> {
    let tok = Tokenizer::new();
    let arith = |gold: &str| -> Result<Score> {
        let exact = exact_answer_reward(&record.response, gold)?;
        let steps = rewards::arith_step_reward(&record.response);
        // Confidence tie-breaker: at toy scale, equally correct responses
        // are often byte-identical across temperatures, so rank ties by the
        // sampling likelihood of the trajectory (exactly 1 under greedy).
        let confidence = if record.token_logprob.is_empty() {
            0.0
        } else {
            (record.token_logprob.iter().sum::<f64>() / record.token_logprob.len() as f64).exp()
        };
        let mut components = std::collections::BTreeMap::new();
        components.insert("exact".into(), exact);
        components.insert("steps".into(), steps);
        components.insert("confidence".into(), confidence);
        Score::with_components(exact + 0.25 * steps + 0.05 * confidence, components)
    };
    match sample.task {
        TaskTag::Arith => {
            let gold = sample
                .gold
                .as_deref()
                .ok_or_else(|| Error::Contract("arith sample lacks a gold answer".into()))?;
            arith(gold)
        }
        TaskTag::Mixed => {
            let prompt_text = tok.decode(&record.prompt);
            match data::arith_prompt_answer(&prompt_text) {
                Some(answer) => arith(&answer),
                None => diversity_reward(&record.response),
            }
        }
        TaskTag::Completion => Score::new(-ngram_repeat_rate(&record.response, 3)?),
        TaskTag::Diverse => diversity_reward(&record.response),
        TaskTag::Constrained => rewards::constrained_story_reward(&record.response),
    }
}

fn make_scorer(
    oracle: &OracleConfig,
    endpoint_override: Option<&str>,
) -> Box<dyn Fn(&TaskSample, &GenerationRecord) -> Result<Score> + Sync> {
    let remote = match (endpoint_override, oracle) {
        (Some(ep), OracleConfig::Remote { timeout_secs, .. }) => Some((ep.to_string(), *timeout_secs)),
        (Some(ep), OracleConfig::Local) => Some((ep.to_string(), 10)),
        (None, OracleConfig::Remote { endpoint, timeout_secs }) => Some((endpoint.clone(), *timeout_secs)),
        (None, OracleConfig::Local) => None,
    };
    match remote {
        Some((endpoint, timeout_secs)) => Box::new(move |_sample, record| {
            let tok = Tokenizer::new();
            remote_score(
                &endpoint,
                &tok.decode(&record.prompt),
                &tok.decode(&record.response),
                Duration::from_secs(timeout_secs),
            )
        }),
        None => Box::new(local_score),
    }
}

/// Builds one split's prompts, task by task, each with its own seed stream.
pub fn build_tasks(mix: &TaskMix, seed: u64, prefix_len: usize) -> Result<Vec<TaskSample>> {
    let mut out = Vec::with_capacity(mix.total());
    if mix.arith > 0 {
        out.extend(data::gen_arith(mix.arith, derive_seed(seed, 0, 0))?);
    }
    if mix.diverse > 0 {
        out.extend(data::gen_diverse(mix.diverse, derive_seed(seed, 1, 0))?);
    }
    if mix.constrained > 0 {
        out.extend(data::gen_constrained(mix.constrained, derive_seed(seed, 2, 0))?);
    }
    if mix.general > 0 {
        out.extend(data::gen_mixed(0, 0, mix.general, derive_seed(seed, 3, 0))?);
    }
    if mix.completion > 0 {
        out.extend(data::gen_completion(mix.completion, derive_seed(seed, 4, 0), prefix_len)?);
    }
    Ok(out)
}

/// Pretrains the base model on the synthetic corpus and writes
/// `checkpoints/base.adck`.
pub fn stage_pretrain(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let paths = cfg.paths();
    paths.ensure()?;
    let corpus = data::build_pretrain_corpus(&cfg.corpus, derive_seed(cfg.run_seed, SEED_PRETRAIN_CORPUS, 0))?;
    let mut model = BaseModel::init(cfg.model.clone(), derive_seed(cfg.run_seed, SEED_PRETRAIN_MODEL, 0))?;
    let pc = PretrainConfig {
        steps: cfg.pretrain.steps,
        learning_rate: cfg.pretrain.learning_rate,
        batch_size: cfg.pretrain.batch_size,
        max_seq_len: cfg.pretrain.max_seq_len,
        seed: derive_seed(cfg.run_seed, SEED_PRETRAIN_MODEL, 1),
    };
    crate::model::pretrain_base(&mut model, &corpus, &pc)?;
    Checkpoint::from_base(&model, pc.steps as u64, cfg.run_seed, &cfg.hash()).save(&paths.base_checkpoint())?;
    Ok(())
}

fn load_base(cfg: &RunConfig, force: bool) -> Result<BaseModel> {
    let path = cfg.paths().base_checkpoint();
    if !path.exists() {
        return Err(Error::Config(format!("missing base checkpoint {}; run pretrain first", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    check_hash(&ck.config_hash.clone(), cfg, "base checkpoint", force)?;
    ck.into_base()
}

fn fresh_head(cfg: &RunConfig) -> Result<AdaptiveDecoderHead> {
    AdaptiveDecoderHead::init(
        cfg.model.d_model,
        cfg.model.head_hidden,
        cfg.model.temperature_grid.clone(),
        derive_seed(cfg.run_seed, SEED_PRETRAIN_MODEL, 2),
    )
}

fn load_head(cfg: &RunConfig, force: bool) -> Result<AdaptiveDecoderHead> {
    let path = cfg.paths().head_checkpoint();
    if !path.exists() {
        return Err(Error::Config(format!("missing head checkpoint {}; run train-lpo first", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    check_hash(&ck.config_hash.clone(), cfg, "head checkpoint", force)?;
    ck.into_head()
}

/// Default completion-prompt prefix length (tokens).
const COMPLETION_PREFIX: usize = 50;

/// Samples N responses per training prompt with the untrained head and
/// writes the preference-pair dataset.
pub fn stage_gen_pairs(cfg: &RunConfig, endpoint_override: Option<&str>, workers: usize) -> Result<()> {
    cfg.validate()?;
    let paths = cfg.paths();
    paths.ensure()?;
    let base = load_base(cfg, false)?;
    let head = fresh_head(cfg)?;
    let samples = build_tasks(&cfg.train_tasks, derive_seed(cfg.run_seed, SEED_TRAIN_TASKS, 0), COMPLETION_PREFIX)?;
    let scorer = make_scorer(&cfg.oracle, endpoint_override);
    let run_seed = derive_seed(cfg.run_seed, SEED_PAIR_GEN, 0);
    // Parallel over prompts: each prompt's pipeline is self-contained, so
    // the merged dataset is identical to the serial one.
    let chunks: Vec<Vec<TaskSample>> = samples.iter().map(|s| vec![s.clone()]).collect();
    let per_prompt = par_map(&chunks, workers, |i, one| {
        build_one_prompt(&base, &head, &one[0], i as u64, cfg, &cfg.policy, run_seed, scorer.as_ref())
    })?;
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for p in per_prompt {
        match p {
            Some(pair) => pairs.push(pair),
            None => skipped += 1,
        }
    }
    let meta = ArtifactMeta { config_hash: cfg.hash(), run_seed: cfg.run_seed, skipped };
    write_jsonl(&paths.pair_file(), &meta, &pairs)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_one_prompt(
    base: &BaseModel,
    head: &AdaptiveDecoderHead,
    sample: &TaskSample,
    sample_id: u64,
    cfg: &RunConfig,
    policy: &DecodingPolicy,
    run_seed: u64,
    scorer: &(dyn Fn(&TaskSample, &GenerationRecord) -> Result<Score> + Sync),
) -> Result<Option<PreferencePair>> {
    // Reuse the dataset builder on a single-sample slice so pairing rules
    // and seed derivation stay in one place; the sample id offsets the
    // run seed to keep streams disjoint across prompts.
    let built = build_dataset(
        base,
        head,
        std::slice::from_ref(sample),
        cfg.n_per_prompt,
        policy,
        derive_seed(run_seed, sample_id, 0),
        scorer,
    )?;
    Ok(built.pairs.into_iter().next())
}

/// Trains the head on the pair dataset and writes `checkpoints/head.adck`
/// plus the loss curve.
pub fn stage_train_lpo(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let paths = cfg.paths();
    paths.ensure()?;
    let base = load_base(cfg, force)?;
    let (meta, pairs): (ArtifactMeta, Vec<PreferencePair>) = read_jsonl(&paths.pair_file())?;
    check_hash(&meta.config_hash, cfg, "pair dataset", force)?;
    if pairs.is_empty() {
        return Err(Error::Data("pair dataset is empty; every prompt was skipped".into()));
    }
    let mut head = fresh_head(cfg)?;
    let curve = lpo::train(&pairs, &mut head, &base, &cfg.loss)?;
    Checkpoint::from_head(&head, &cfg.model, cfg.loss.steps as u64, cfg.run_seed, &cfg.hash())
        .save(&paths.head_checkpoint())?;
    let mut csv = format!("# config_hash={} run_seed={}\n", cfg.hash(), cfg.run_seed);
    csv.push_str("step,total,margin\n");
    for (i, b) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{},{}\n", b.total, b.margin));
    }
    std::fs::write(paths.loss_curve_file(), csv)?;
    Ok(())
}

/// One evaluation generation: which policy produced it plus the task
/// context needed for scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub policy: String,
    pub task: TaskTag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constraint: Option<u32>,
    pub record: GenerationRecord,
}

fn eval_policies(cfg: &RunConfig) -> Vec<(String, DecodingPolicy)> {
    // Inference-time temperature selection is greedy.
    let mut adaptive = cfg.policy;
    adaptive.temp_selection = Some(TempSelection::Greedy);
    let mut out = vec![("adaptive".to_string(), adaptive)];
    for &tau in &cfg.model.temperature_grid {
        out.push((format!("fixed_{tau}"), DecodingPolicy::fixed(tau, cfg.policy.max_new_tokens)));
    }
    out
}

/// Generates held-out responses under the trained head and every fixed
/// grid temperature, writing `records/records.jsonl`.
pub fn stage_generate(cfg: &RunConfig, workers: usize, force: bool) -> Result<()> {
    cfg.validate()?;
    let paths = cfg.paths();
    paths.ensure()?;
    let base = load_base(cfg, force)?;
    let head = load_head(cfg, force)?;
    let samples = build_tasks(&cfg.eval_tasks, derive_seed(cfg.run_seed, SEED_EVAL_TASKS, 0), COMPLETION_PREFIX)?;
    let mut records = Vec::new();
    for (p_idx, (name, policy)) in eval_policies(cfg).into_iter().enumerate() {
        let head_ref = if matches!(policy.variant, PolicyVariant::FixedTemp(_)) {
            None
        } else {
            Some(&head)
        };
        let produced = par_map(&samples, workers, |i, s| {
            let seed = derive_seed(derive_seed(cfg.run_seed, SEED_EVAL_GEN, p_idx as u64), i as u64, 0);
            let record = generate(&base, head_ref, s, &policy, seed)?;
            Ok(EvalRecord {
                policy: name.clone(),
                task: s.task,
                gold: s.gold.clone(),
                constraint: s.constraint,
                record,
            })
        })?;
        records.extend(produced);
    }
    let meta = ArtifactMeta { config_hash: cfg.hash(), run_seed: cfg.run_seed, skipped: 0 };
    write_jsonl(&paths.record_file(), &meta, &records)?;
    Ok(())
}

fn eval_sample_from(r: &EvalRecord) -> TaskSample {
    TaskSample {
        task: r.task,
        prompt: r.record.prompt.clone(),
        gold: r.gold.clone(),
        constraint: r.constraint,
    }
}

const TASKS: [TaskTag; 5] = [
    TaskTag::Arith,
    TaskTag::Diverse,
    TaskTag::Constrained,
    TaskTag::Mixed,
    TaskTag::Completion,
];

fn task_name(t: TaskTag) -> &'static str {
    match t {
        TaskTag::Arith => "arith",
        TaskTag::Diverse => "diverse",
        TaskTag::Constrained => "constrained",
        TaskTag::Mixed => "general",
        TaskTag::Completion => "completion",
    }
}

/// Scores the generated records and writes `reports/report.json` plus a
/// metrics CSV.
pub fn stage_eval(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let paths = cfg.paths();
    paths.ensure()?;
    let (meta, records): (ArtifactMeta, Vec<EvalRecord>) = read_jsonl(&paths.record_file())?;
    check_hash(&meta.config_hash, cfg, "record file", force)?;

    let mut by_policy: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in &records {
        by_policy.entry(r.policy.clone()).or_default().push(r);
    }
    let adaptive = by_policy
        .get("adaptive")
        .ok_or_else(|| Error::Data("record file has no adaptive records".into()))?;

    let mut report = EvalReport::new(cfg.run_seed, &cfg.hash());
    for task in TASKS {
        let a_task: Vec<&&EvalRecord> = adaptive.iter().filter(|r| r.task == task).collect();
        if a_task.is_empty() {
            continue;
        }
        // Accuracy is defined where a gold answer exists.
        if task == TaskTag::Arith {
            for (policy, recs) in &by_policy {
                let t: Vec<&&EvalRecord> = recs.iter().filter(|r| r.task == task).collect();
                let correct = t
                    .iter()
                    .map(|r| {
                        exact_answer_reward(&r.record.response, r.gold.as_deref().unwrap_or_default())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let acc = correct.iter().sum::<f64>() / correct.len().max(1) as f64;
                report.accuracies.insert(format!("arith_{policy}"), acc);
            }
        }
        for (policy, recs) in &by_policy {
            if policy == "adaptive" {
                continue;
            }
            let b_task: Vec<&&EvalRecord> = recs.iter().filter(|r| r.task == task).collect();
            if b_task.len() != a_task.len() {
                return Err(Error::Data(format!(
                    "policy {policy} has {} {} records, adaptive has {}",
                    b_task.len(),
                    task_name(task),
                    a_task.len()
                )));
            }
            let w = task_winrate(task, &a_task, &b_task)?;
            report.winrates.insert(format!("{}_vs_{policy}", task_name(task)), w);
        }
        // Temperature diagnostics for the adaptive policy.
        let recs: Vec<GenerationRecord> = a_task.iter().map(|r| r.record.clone()).collect();
        let stats = temp_stats(&recs, &cfg.model.temperature_grid, SEP)?;
        report.histograms.insert(task_name(task).into(), stats.histogram.clone());
        report.positional.insert(task_name(task).into(), stats);
    }
    report.notes.insert("experiment".into(), cfg.experiment.clone());
    report.save_json(&paths.report_file())?;

    let metrics = paths.reports.join("metrics.csv");
    let mut csv = format!("# config_hash={} run_seed={}\n", cfg.hash(), cfg.run_seed);
    csv.push_str("metric,value\n");
    for (k, v) in &report.winrates {
        csv.push_str(&format!("winrate/{k},{v}\n"));
    }
    for (k, v) in &report.accuracies {
        csv.push_str(&format!("accuracy/{k},{v}\n"));
    }
    std::fs::write(metrics, csv)?;
    Ok(())
}

fn task_winrate(task: TaskTag, a: &[&&EvalRecord], b: &[&&EvalRecord]) -> Result<f64> {
    match task {
        TaskTag::Arith => {
            let correct = |rs: &[&&EvalRecord]| -> Result<Vec<bool>> {
                rs.iter()
                    .map(|r| {
                        Ok(exact_answer_reward(&r.record.response, r.gold.as_deref().unwrap_or_default())? > 0.5)
                    })
                    .collect()
            };
            winrate_correctness(&correct(a)?, &correct(b)?)
        }
        TaskTag::Constrained => {
            let keyed = |rs: &[&&EvalRecord]| -> Result<Vec<(f64, f64)>> {
                rs.iter()
                    .map(|r| {
                        let c = r
                            .constraint
                            .ok_or_else(|| Error::Contract("constrained record lacks a constraint".into()))?;
                        let rate = constraint_rate(&r.record.response, c, SEP);
                        Ok((rate, diversity_reward(&r.record.response)?.value))
                    })
                    .collect()
            };
            winrate_constrained(&keyed(a)?, &keyed(b)?)
        }
        _ => {
            let scored = |rs: &[&&EvalRecord]| -> Result<Vec<f64>> {
                rs.iter()
                    .map(|r| Ok(local_score(&eval_sample_from(r), &r.record)?.value))
                    .collect()
            };
            winrate_score(&scored(a)?, &scored(b)?)
        }
    }
}

/// Renders the report's histograms as CSV tables and SVG charts.
pub fn stage_report(cfg: &RunConfig, force: bool) -> Result<()> {
    let paths = cfg.paths();
    let report_path = paths.report_file();
    if !report_path.exists() {
        return Err(Error::Config(format!("missing report {}; run eval first", report_path.display())));
    }
    let report = EvalReport::load_json(&report_path)?;
    check_hash(&report.config_hash, cfg, "report", force)?;
    for (name, hist) in &report.histograms {
        let csv_path = paths.reports.join(format!("hist_{name}.csv"));
        let mut csv = format!("# config_hash={} run_seed={}\n", report.config_hash, report.run_seed);
        csv.push_str("temperature,mass\n");
        for (t, m) in hist.grid.iter().zip(&hist.mass) {
            csv.push_str(&format!("{t},{m}\n"));
        }
        std::fs::write(csv_path, csv)?;
        let svg = crate::eval::render_histogram_svg(hist, &format!("{} temperatures", name))?;
        let svg = format!(
            "<!-- config_hash={} run_seed={} -->\n{svg}",
            report.config_hash, report.run_seed
        );
        std::fs::write(paths.reports.join(format!("hist_{name}.svg")), svg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::ModelConfig;

    /// A 4-prompt smoke configuration small enough for an end-to-end run
    /// in a unit test.
    fn smoke_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.experiment = "smoke".into();
        cfg.model = ModelConfig {
            vocab_size: 46,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ctx_len: 128,
            head_hidden: 8,
            temperature_grid: vec![0.0, 0.5, 1.0],
        };
        cfg.corpus = crate::data::CorpusSpec { stories: 4, constrained: 4, arith: 8, copy: 2, text: 2 };
        cfg.pretrain = crate::config::PretrainSettings { steps: 300, learning_rate: 3e-3, batch_size: 4, max_seq_len: 48 };
        cfg.train_tasks = TaskMix { arith: 1, diverse: 1, constrained: 1, general: 1, completion: 0 };
        cfg.eval_tasks = TaskMix { arith: 2, diverse: 2, constrained: 2, general: 2, completion: 2 };
        cfg.policy = DecodingPolicy::adaptive_tok(TempSelection::Sample, 16);
        cfg.loss.steps = 3;
        cfg.loss.batch_size = 2;
        cfg.n_per_prompt = 8;
        cfg.run_seed = 5;
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn smoke_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        stage_pretrain(&cfg).unwrap();
        stage_gen_pairs(&cfg, None, 1).unwrap();
        stage_train_lpo(&cfg, false).unwrap();
        stage_generate(&cfg, 1, false).unwrap();
        stage_eval(&cfg, false).unwrap();
        stage_report(&cfg, false).unwrap();

        let paths = cfg.paths();
        assert!(paths.base_checkpoint().exists());
        assert!(paths.head_checkpoint().exists());
        assert!(paths.report_file().exists());
        let report = EvalReport::load_json(&paths.report_file()).unwrap();
        assert_eq!(report.config_hash, cfg.hash());
        assert!(!report.winrates.is_empty());
        assert!(report.histograms.contains_key("arith"));
        let curve = std::fs::read_to_string(paths.loss_curve_file()).unwrap();
        assert!(curve.starts_with(&format!("# config_hash={}", cfg.hash())));
        assert!(paths.reports.join("hist_arith.svg").exists());
    }

    #[test]
    fn pair_files_are_byte_identical_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        stage_pretrain(&cfg).unwrap();
        stage_gen_pairs(&cfg, None, 1).unwrap();
        let first = std::fs::read(cfg.paths().pair_file()).unwrap();
        stage_gen_pairs(&cfg, None, 2).unwrap();
        let second = std::fs::read(cfg.paths().pair_file()).unwrap();
        assert_eq!(first, second, "pair files differ across reruns/workers");
    }

    #[test]
    fn eval_without_records_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        assert!(matches!(stage_eval(&cfg, false), Err(Error::Config(_))));
        assert!(matches!(stage_generate(&cfg, 1, false), Err(Error::Config(_))));
    }

    #[test]
    fn hash_mismatch_is_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        stage_pretrain(&cfg).unwrap();
        stage_gen_pairs(&cfg, None, 1).unwrap();
        let mut changed = cfg.clone();
        changed.run_seed = 99;
        assert!(matches!(stage_train_lpo(&changed, false), Err(Error::Config(_))));
        assert!(stage_train_lpo(&changed, true).is_ok());
    }

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<u64> = (0..23).collect();
        let serial = par_map(&items, 1, |i, &x| Ok(x * 2 + i as u64)).unwrap();
        let parallel = par_map(&items, 4, |i, &x| Ok(x * 2 + i as u64)).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn local_score_dispatch() {
        let tok = Tokenizer::new();
        let mk = |prompt: &str, response: &str| GenerationRecord {
            prompt: tok.encode(prompt).unwrap(),
            response: tok.encode(response).unwrap(),
            temp_index: vec![],
            temp_logprob: vec![],
            token_logprob: vec![0.0; response.len()],
            rng_seed: 0,
        };
        // Mixed arithmetic content is scored against the re-derived answer,
        // plus small worked-step and confidence components.
        let s = TaskSample { task: TaskTag::Mixed, prompt: tok.encode("q: 12+30=? a:").unwrap(), gold: None, constraint: None };
        let right = local_score(&s, &mk("q: 12+30=? a:", " 12+30=42.")).unwrap();
        assert_eq!(right.components["exact"], 1.0);
        // Exact answer 1.0 plus confidence 0.05 (all-zero token logprobs).
        assert_eq!(right.value, 1.05);
        let wrong = local_score(&s, &mk("q: 12+30=? a:", " 12+30=41.")).unwrap();
        assert_eq!(wrong.components["exact"], 0.0);
        assert!(wrong.value < right.value);
        // Completion is scored by negated repeats.
        let s = TaskSample { task: TaskTag::Completion, prompt: vec![0], gold: None, constraint: None };
        let r = mk("x", "ababababab");
        assert!(local_score(&s, &r).unwrap().value < 0.0);
    }
}
