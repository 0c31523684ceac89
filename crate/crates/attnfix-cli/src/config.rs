//! JSON run configuration: one file drives every subcommand, with a few
//! flag overrides layered on top.

use std::fs;
use std::path::{Path, PathBuf};

use attnfix_core::hotpatch::HotfixMode;
use attnfix_core::model::{Modality, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::errors::{CliError, CliResult, PathCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Backdoor,
    Unfairness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Streaming,
    TwoPass,
}

impl Mode {
    pub fn to_core(self) -> HotfixMode {
        match self {
            Mode::Streaming => HotfixMode::Streaming,
            Mode::TwoPass => HotfixMode::TwoPass,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    pub modality: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub side: Option<usize>,
    #[serde(default)]
    pub patch: Option<usize>,
    #[serde(default)]
    pub vocab_sizes: Option<Vec<usize>>,
}

impl VictimConfig {
    pub fn to_core(&self) -> CliResult<ModelConfig> {
        let modality = match self.modality.as_str() {
            "image" => Modality::Image {
                side: self
                    .side
                    .ok_or_else(|| CliError::Contract("image victim needs `side`".into()))?,
                patch: self
                    .patch
                    .ok_or_else(|| CliError::Contract("image victim needs `patch`".into()))?,
            },
            "tabular" => Modality::Tabular {
                vocab_sizes: self
                    .vocab_sizes
                    .clone()
                    .ok_or_else(|| CliError::Contract("tabular victim needs `vocab_sizes`".into()))?,
            },
            other => {
                return Err(CliError::Contract(format!(
                    "unknown modality `{other}` (expected image or tabular)"
                )))
            }
        };
        let cfg = ModelConfig {
            modality,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            mlp_ratio: self.mlp_ratio,
            n_classes: self.n_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    /// Pool the debugging set is distilled from.
    pub pool: usize,
    /// Held-out pool for detector evaluation.
    pub eval_pool: usize,
    /// Maximum debugging-set pairs (backdoor; the bias builder keeps all).
    pub debug_pairs: usize,
    /// Maximum pairs in the held-out detector evaluation set.
    pub eval_pairs: usize,
    /// Clean pool for trigger inversion (backdoor only).
    #[serde(default = "default_inversion_pool")]
    pub inversion_pool: usize,
    pub seed_train: u64,
    pub seed_test: u64,
    pub seed_pool: u64,
    pub seed_eval: u64,
    #[serde(default = "default_seed_inversion_pool")]
    pub seed_inversion_pool: u64,
}

fn default_inversion_pool() -> usize {
    64
}

fn default_seed_inversion_pool() -> u64 {
    6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda_contrast: f64,
}

fn default_lambda() -> f64 {
    attnfix_core::detector::DEFAULT_LAMBDA_CONTRAST
}

/// Attack parameters; which fields apply depends on the scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub trigger_size: Option<usize>,
    #[serde(default)]
    pub target_class: Option<usize>,
    #[serde(default)]
    pub poison_rate: Option<f64>,
    #[serde(default)]
    pub seed_poison: Option<u64>,
    #[serde(default)]
    pub bias_strength: Option<f64>,
    #[serde(default = "default_lambda_sparsity")]
    pub lambda_sparsity: f64,
    #[serde(default = "default_inversion_steps")]
    pub inversion_steps: usize,
}

fn default_lambda_sparsity() -> f64 {
    attnfix_core::inversion::DEFAULT_LAMBDA_SPARSITY
}

fn default_inversion_steps() -> usize {
    300
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub victim: VictimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub detector: DetectorSection,
    pub attack: AttackConfig,
    pub tau: f64,
    pub mode: Mode,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).at(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Contract("`seeds` must be nonempty".into()));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(CliError::Contract(format!(
                "tau {} outside (0, 1)",
                self.tau
            )));
        }
        self.victim.to_core()?;
        match self.scenario {
            Scenario::Backdoor => {
                for (field, missing) in [
                    ("trigger_size", self.attack.trigger_size.is_none()),
                    ("target_class", self.attack.target_class.is_none()),
                    ("poison_rate", self.attack.poison_rate.is_none()),
                    ("seed_poison", self.attack.seed_poison.is_none()),
                ] {
                    if missing {
                        return Err(CliError::Contract(format!(
                            "backdoor scenario needs `attack.{field}`"
                        )));
                    }
                }
            }
            Scenario::Unfairness => {
                if self.attack.bias_strength.is_none() {
                    return Err(CliError::Contract(
                        "unfairness scenario needs `attack.bias_strength`".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Base seed: drives victim initialization; derived stage seeds are
    /// fixed offsets so a single value pins the whole pipeline.
    pub fn base_seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn seed_victim_train(&self) -> u64 {
        self.base_seed() + 1
    }

    pub fn seed_inversion(&self) -> u64 {
        self.base_seed() + 3
    }

    pub fn seed_ablation(&self) -> u64 {
        self.base_seed() + 7
    }

    pub fn dir_checkpoints(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    pub fn dir_debugset(&self) -> PathBuf {
        self.out.join("debugset")
    }

    pub fn dir_reports(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn dir_plots(&self) -> PathBuf {
        self.out.join("plots-data")
    }

    pub fn ensure_dirs(&self) -> CliResult<()> {
        for dir in [
            self.dir_checkpoints(),
            self.dir_debugset(),
            self.dir_reports(),
            self.dir_plots(),
        ] {
            fs::create_dir_all(&dir).at(&dir)?;
        }
        Ok(())
    }
}

/// Flag overrides applied after loading the JSON file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(tau) = self.tau {
            cfg.tau = tau;
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
    }
}
