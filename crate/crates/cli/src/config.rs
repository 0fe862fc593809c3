//! TOML configuration file. Every key is optional; a flag on the command line
//! wins over the file, which wins over the built-in default.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

use saereg_core::judge::JudgeClientConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Fallback seed for every command.
    pub seed: Option<u64>,
    pub synth: SynthSection,
    pub pretrain: SaeSection,
    pub finetune: SaeSection,
    pub explain: ExplainSection,
    pub judge: JudgeSection,
    pub train_clf: TrainClfSection,
    pub eval: EvalSection,
    pub sample_size: SampleSizeSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub dictionary: DictionarySection,
    pub spurious: SpuriousSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionarySection {
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub atoms: Option<usize>,
    pub k_true: Option<usize>,
    pub n: Option<usize>,
    pub activation_prob: Option<f64>,
    pub replace_atoms: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpuriousSection {
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub train_correlation: Option<f64>,
    pub test_correlation: Option<f64>,
    pub noise_std: Option<f64>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub probe_n: Option<usize>,
    pub probe_noise: Option<f64>,
    pub random_directions: Option<bool>,
}

/// Shared by `pretrain` and `finetune`; `features`, `k` and `preset` are
/// ignored where they do not apply.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub features: Option<usize>,
    pub k: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub l1: Option<f64>,
    pub adam_eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub norm: Option<String>,
    pub normalize_features: Option<bool>,
    pub alpha: Option<f64>,
    pub dead_k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub seed: Option<u64>,
    pub top_m: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    pub seed: Option<u64>,
    pub threshold: Option<String>,
    pub rubric: Option<String>,
    pub max_concurrent: Option<usize>,
    pub client: Option<JudgeClientConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainClfSection {
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub val_frac: Option<f64>,
    pub max_epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr_grid: Option<Vec<f64>>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSizeSection {
    pub seed: Option<u64>,
    pub p: Option<f64>,
    pub confidence: Option<f64>,
    pub rel_margin: Option<f64>,
    pub sigma: Option<f64>,
    pub exact_z: Option<bool>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        if let Some(client) = &cfg.judge.client {
            client.validate()?;
        }
        Ok(cfg)
    }

    /// Seed for a command: flag, then the section, then the top level, then 0.
    pub fn seed(&self, flag: Option<u64>, section: Option<u64>) -> u64 {
        flag.or(section).or(self.seed).unwrap_or(0)
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
