//! Run configuration: strategy list, model/bank/benchmark settings,
//! optimizer hyperparameters, and trial seeds. Parsed from TOML; every
//! violation is reported at once.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::coda::BankConfig;
use crate::data::BenchmarkSpec;
use crate::error::{Error, Result};
use crate::vit::EncoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Decomposed prompt components with attended cosine weighting,
    /// trained end-to-end.
    Decomposed,
    /// Pool of whole prompts, top-k cosine selection, clustering-style
    /// key pull loss.
    #[value(name = "pool-topk")]
    PoolTopK,
    /// One prompt per task; task id at training, closest key at
    /// inference.
    PerTask,
    /// No prompts; the encoder itself is fine-tuned per task.
    #[value(name = "finetune")]
    FineTune,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Decomposed => "decomposed",
            StrategyKind::PoolTopK => "pool-topk",
            StrategyKind::PerTask => "per-task",
            StrategyKind::FineTune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimConfig {
    /// Learning rate for prompting strategies.
    pub lr_prompt: f64,
    /// Learning rate for full fine-tuning.
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Weight of the key pull loss in the baseline strategies.
    pub pull_weight: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_prompt: 2e-2,
            lr_finetune: 1e-3,
            batch_size: 32,
            epochs_per_task: 12,
            pretrain_epochs: 10,
            pretrain_lr: 1e-3,
            pull_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PoolConfig {
    pub pool_size: usize,
    pub top_k: usize,
    pub prompt_len: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { pool_size: 10, top_k: 2, prompt_len: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub strategies: Vec<StrategyKind>,
    pub encoder: EncoderConfig,
    pub bank: BankConfig,
    pub benchmark: BenchmarkSpec,
    /// Fraction of domains removed from each task's training data
    /// (0 disables the dual-shift protocol).
    pub dual_shift_fraction: f64,
    pub optimizer: OptimConfig,
    pub pool: PoolConfig,
    pub per_task_prompt_len: usize,
    pub pretext_classes: usize,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            strategies: vec![
                StrategyKind::Decomposed,
                StrategyKind::PoolTopK,
                StrategyKind::PerTask,
                StrategyKind::FineTune,
            ],
            encoder: EncoderConfig::default(),
            bank: BankConfig::default(),
            benchmark: BenchmarkSpec::default(),
            dual_shift_fraction: 0.5,
            optimizer: OptimConfig::default(),
            pool: PoolConfig::default(),
            per_task_prompt_len: 4,
            pretext_classes: 8,
            seeds: vec![1, 2, 3],
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Validate every field, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.strategies.is_empty() {
            problems.push("at least one strategy required".to_string());
        }
        if let Err(e) = self.encoder.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.benchmark.validate() {
            problems.push(e.to_string());
        }
        if self.strategies.contains(&StrategyKind::Decomposed) {
            if let Err(e) = self.bank.validate(self.benchmark.num_tasks) {
                problems.push(e.to_string());
            }
            if self.bank.embed_dim != self.encoder.embed_dim {
                problems.push(format!(
                    "bank embed_dim {} must equal encoder embed_dim {}",
                    self.bank.embed_dim, self.encoder.embed_dim
                ));
            }
        }
        if self.encoder.image_size != self.benchmark.image_size {
            problems.push(format!(
                "encoder image_size {} must equal benchmark image_size {}",
                self.encoder.image_size, self.benchmark.image_size
            ));
        }
        if !(0.0..1.0).contains(&self.dual_shift_fraction) {
            problems.push(format!(
                "dual_shift_fraction {} must be in [0, 1)",
                self.dual_shift_fraction
            ));
        }
        if self.pool.top_k == 0 || self.pool.top_k > self.pool.pool_size {
            problems.push(format!(
                "pool top_k {} must be in [1, pool_size {}]",
                self.pool.top_k, self.pool.pool_size
            ));
        }
        if self.pool.prompt_len % 2 != 0 {
            problems.push(format!("pool prompt_len {} must be even", self.pool.prompt_len));
        }
        if self.per_task_prompt_len % 2 != 0 || self.per_task_prompt_len == 0 {
            problems.push(format!(
                "per_task_prompt_len {} must be even and positive",
                self.per_task_prompt_len
            ));
        }
        if self.pretext_classes == 0 {
            problems.push("pretext_classes must be positive".to_string());
        }
        if self.seeds.is_empty() {
            problems.push("at least one trial seed required".to_string());
        }
        if self.optimizer.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_config_lists_every_violation() {
        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        cfg.pool.top_k = 99;
        cfg.dual_shift_fraction = 1.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("seed"));
        assert!(err.contains("top_k"));
        assert!(err.contains("dual_shift_fraction"));
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
