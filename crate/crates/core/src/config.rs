//! Experiment configuration files (TOML, strict schema).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_conflict_pair_with, stock_domains, ConflictPairOptions, DomainParams, DomainSpec, MixtureSpec};
use crate::error::{MoleError, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MOLE_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixtureConfig {
    /// The first `weights.len()` of the three stock domains.
    Stock {
        seed: u64,
        domain_seed: u64,
        weights: Vec<f64>,
    },
    ConflictPair {
        seed: u64,
        domain_seed: u64,
        rank_budget: usize,
        weights: Vec<f64>,
        #[serde(default)]
        options: ConflictPairOptions,
    },
    Custom {
        seed: u64,
        domains: Vec<DomainParams>,
        weights: Vec<f64>,
    },
}

impl MixtureConfig {
    pub fn seed(&self) -> u64 {
        match self {
            Self::Stock { seed, .. } | Self::ConflictPair { seed, .. } | Self::Custom { seed, .. } => *seed,
        }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            Self::Stock { weights, .. } | Self::ConflictPair { weights, .. } | Self::Custom { weights, .. } => weights,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Self::Stock { weights, .. } | Self::ConflictPair { weights, .. } | Self::Custom { weights, .. } => weights,
        }
    }

    /// Every domain the mixture draws from, regardless of weight.
    pub fn domains(&self, vocab: usize) -> Result<Vec<DomainSpec>> {
        match self {
            Self::Stock { domain_seed, weights, .. } => {
                let all = stock_domains(vocab, *domain_seed)?;
                if weights.is_empty() || weights.len() > all.len() {
                    return Err(MoleError::Config(format!(
                        "mixture.weights: stock mixtures take 1 to {} weights, got {}",
                        all.len(),
                        weights.len()
                    )));
                }
                Ok(all.into_iter().take(weights.len()).collect())
            }
            Self::ConflictPair {
                domain_seed,
                rank_budget,
                weights,
                options,
                ..
            } => {
                if weights.len() != 2 {
                    return Err(MoleError::Config(format!(
                        "mixture.weights: a conflict pair takes 2 weights, got {}",
                        weights.len()
                    )));
                }
                let (a, b) = make_conflict_pair_with(*rank_budget, *domain_seed, options)?;
                Ok(vec![a, b])
            }
            Self::Custom { domains, weights, .. } => {
                if weights.len() != domains.len() {
                    return Err(MoleError::Config(format!(
                        "mixture.weights: {} weights for {} domains",
                        weights.len(),
                        domains.len()
                    )));
                }
                domains
                    .iter()
                    .enumerate()
                    .map(|(i, p)| DomainSpec::build(i, p.clone()))
                    .collect()
            }
        }
    }

    pub fn build(&self, vocab: usize) -> Result<MixtureSpec> {
        let domains = self.domains(vocab)?;
        let weighted = domains.into_iter().zip(self.weights().iter().copied()).collect();
        MixtureSpec::new(weighted, self.seed())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Held-out instances per domain for eval loss and routing stats.
    pub eval_instances: usize,
    pub eval_seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            eval_instances: 256,
            eval_seed: 12345,
        }
    }
}

/// The conflict protocol: single-domain floors, plain mixes at growing ranks,
/// and a 2-expert MoLE at the base rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConflictConfig {
    /// Plain-LoRA mixture ranks as multiples of the base rank.
    pub rank_multipliers: Vec<usize>,
    pub moe_experts: usize,
    /// Minimum excess over the worse floor that counts as a conflict.
    pub conflict_margin: f64,
    /// Maximum excess over a floor that still counts as recovered.
    pub floor_tolerance: f64,
    /// Mixture runs use `batch_size` times the number of mixed domains, so
    /// each domain gets as many samples per step as in its single-domain run.
    pub equal_exposure: bool,
}

impl Default for ConflictConfig {
    fn default() -> Self {
        Self {
            rank_multipliers: vec![1, 2, 4],
            moe_experts: 2,
            conflict_margin: 0.25,
            floor_tolerance: 0.10,
            equal_exposure: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub mixture: MixtureConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub conflict: Option<ConflictConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MoleError::Config(e.to_string()))
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let mix = self.mixture.build(self.model.vocab)?;
        if mix.max_token() > self.model.vocab {
            return Err(MoleError::Config(format!(
                "mixture needs vocab {} but model.vocab is {}",
                mix.max_token(),
                self.model.vocab
            )));
        }
        if mix.max_sequence_len() > self.model.max_context {
            return Err(MoleError::Config(format!(
                "mixture sequences of length {} exceed model.max_context {}",
                mix.max_sequence_len(),
                self.model.max_context
            )));
        }
        if let Some(c) = &self.conflict {
            if !matches!(self.mixture, MixtureConfig::ConflictPair { .. }) {
                return Err(MoleError::Config("[conflict] requires a conflict-pair mixture".into()));
            }
            if c.rank_multipliers.is_empty() || c.rank_multipliers.contains(&0) {
                return Err(MoleError::Config("conflict.rank_multipliers must be positive".into()));
            }
            if c.moe_experts == 0 {
                return Err(MoleError::Config("conflict.moe_experts must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn build_mixture(&self) -> Result<MixtureSpec> {
        self.mixture.build(self.model.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [model]
        vocab = 30
        d_model = 8
        d_ff = 16
        layers = 1
        heads = 2
        max_context = 16

        [train]
        mode = "plain-lora"
        rank = 2
        total_steps = 10
        warmup_steps = 2

        [mixture]
        kind = "stock"
        seed = 1
        domain_seed = 2
        weights = [1.0]
    "#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.model.vocab, 30);
        assert_eq!(c.build_mixture().unwrap().domains.len(), 1);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c, back);
        assert_eq!(text, back.to_toml().unwrap());
    }

    #[test]
    fn unknown_keys_are_named() {
        let bad = MINIMAL.replace("rank = 2", "rnak = 2");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("rnak"), "{err}");
        let bad = MINIMAL.replace("domain_seed = 2", "domain_seed = 2\ncolour = 1");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn zero_weights_fail_validation() {
        let bad = MINIMAL.replace("weights = [1.0]", "weights = [0.0, 0.0]");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(MoleError::Config(_))));
    }

    #[test]
    fn conflict_section_needs_conflict_mixture() {
        let bad = format!("{MINIMAL}\n[conflict]\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }
}
