//! Run configuration: one JSON file drives every pipeline stage.
//!
//! Unknown keys are rejected so typos fail loudly, and the SHA-256 hash of
//! the canonical serialized config is embedded in every artifact a run
//! produces.

use crate::data::CorpusSpec;
use crate::decoding::{DecodingPolicy, TempSelection};
use crate::error::{Error, Result};
use crate::lpo::LossConfig;
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Prompt counts per task for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskMix {
    pub arith: usize,
    pub diverse: usize,
    pub constrained: usize,
    pub general: usize,
    pub completion: usize,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix { arith: 32, diverse: 32, constrained: 24, general: 32, completion: 24 }
    }
}

impl TaskMix {
    pub fn total(&self) -> usize {
        self.arith + self.diverse + self.constrained + self.general + self.completion
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings { steps: 1200, learning_rate: 1e-3, batch_size: 8, max_seq_len: 96 }
    }
}

/// Local oracles by name, or an external reward service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleConfig {
    Local,
    Remote { endpoint: String, timeout_secs: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: String,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub pretrain: PretrainSettings,
    pub train_tasks: TaskMix,
    pub eval_tasks: TaskMix,
    /// Policy used when sampling responses for preference pairs; the eval
    /// stage switches temperature selection to greedy.
    pub policy: DecodingPolicy,
    pub loss: LossConfig,
    pub oracle: OracleConfig,
    /// Responses sampled per prompt during pair generation.
    pub n_per_prompt: usize,
    pub run_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "default".into(),
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            pretrain: PretrainSettings::default(),
            train_tasks: TaskMix::default(),
            eval_tasks: TaskMix {
                arith: 16,
                diverse: 16,
                constrained: 16,
                general: 16,
                completion: 16,
            },
            policy: DecodingPolicy::adaptive_tok(TempSelection::Sample, 48),
            loss: LossConfig::default(),
            oracle: OracleConfig::Local,
            n_per_prompt: 16,
            run_seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::Config("experiment name must be nonempty".into()));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.policy.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()?;
        if self.n_per_prompt < 2 {
            return Err(Error::Config("n_per_prompt must be at least 2".into()));
        }
        if self.train_tasks.constrained > 0 && self.n_per_prompt < 8 {
            return Err(Error::Config(
                "constrained prompts need n_per_prompt >= 8 for top/bottom-4 pairing".into(),
            ));
        }
        if self.train_tasks.total() == 0 || self.eval_tasks.total() == 0 {
            return Err(Error::Config("task mixes must contain at least one prompt".into()));
        }
        if let OracleConfig::Remote { endpoint, timeout_secs } = &self.oracle {
            if endpoint.is_empty() || *timeout_secs == 0 {
                return Err(Error::Config("remote oracle needs an endpoint and a timeout".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths {
            checkpoints: self.output_dir.join("checkpoints"),
            pairs: self.output_dir.join("pairs"),
            records: self.output_dir.join("records"),
            reports: self.output_dir.join("reports"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub checkpoints: PathBuf,
    pub pairs: PathBuf,
    pub records: PathBuf,
    pub reports: PathBuf,
}

impl RunPaths {
    pub fn ensure(&self) -> Result<()> {
        for dir in [&self.checkpoints, &self.pairs, &self.records, &self.reports] {
            std::fs::create_dir_all(dir)?;
        }
        Ok(())
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("base.adck")
    }

    pub fn head_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("head.adck")
    }

    pub fn pair_file(&self) -> PathBuf {
        self.pairs.join("pairs.jsonl")
    }

    pub fn record_file(&self) -> PathBuf {
        self.records.join("records.jsonl")
    }

    pub fn report_file(&self) -> PathBuf {
        self.reports.join("report.json")
    }

    pub fn loss_curve_file(&self) -> PathBuf {
        self.reports.join("loss_curve.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_applies_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"experiment": "smoke"}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.experiment, "smoke");
        assert_eq!(cfg.n_per_prompt, 16);
        assert_eq!(cfg.loss.beta, 0.1);
        assert_eq!(cfg.model.temperature_grid, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"experiment": "x", "betta": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn grid_round_trips_and_is_validated() {
        let mut cfg = RunConfig::default();
        cfg.model.temperature_grid = vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.model.temperature_grid, cfg.model.temperature_grid);

        cfg.model.temperature_grid = vec![0.4, 0.2];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.run_seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn validation_guards() {
        let mut cfg = RunConfig::default();
        cfg.n_per_prompt = 4; // constrained prompts present by default
        assert!(cfg.validate().is_err());
        cfg.train_tasks.constrained = 0;
        cfg.validate().unwrap();
        cfg.n_per_prompt = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.oracle = OracleConfig::Remote { endpoint: String::new(), timeout_secs: 5 };
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.experiment.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_reports_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, r#"{"experiment": "ok"}"#).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap().experiment, "ok");
    }
}
