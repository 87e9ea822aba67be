//! Run configuration files (TOML).
//!
//! Every section except `[task]` and `[reward]` is optional; omitted keys
//! take the defaults used by the acceptance experiments. Unknown keys are
//! rejected. [`RunConfigFile::resolved`] fills in every default so that the
//! copy written to a run directory is self-contained.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{enumerate, trajectory_count, Reward, RewardSpec, DEFAULT_ENUMERATION_BUDGET};
use crate::error::{LabError, Result};
use crate::oracle::SweepGrid;
use crate::policy::{Layout, PolicyParams, Vocab};
use crate::trainer::{Algorithm, Task, TrainConfig};

/// Initial policy; also used as the KL reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    /// All logits zero.
    #[default]
    Uniform,
    /// Independent `N(0, scale²)` logits.
    Random { scale: f64, seed: u64 },
}

fn default_prompts() -> usize {
    1
}
fn default_budget() -> usize {
    DEFAULT_ENUMERATION_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab_size: usize,
    /// End-of-sequence token; without one every sequence has length `horizon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos: Option<usize>,
    pub horizon: usize,
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    #[serde(default = "default_budget")]
    pub enumeration_budget: usize,
    #[serde(default)]
    pub init: InitSpec,
}

impl TaskConfig {
    pub fn layout(&self) -> Result<Arc<Layout>> {
        let vocab = Vocab::new(self.vocab_size, self.eos)?;
        Ok(Arc::new(Layout::new(vocab, self.horizon, self.prompts)?))
    }

    /// Builds the task. The trajectory spaces are enumerated when `exact`
    /// is set; otherwise only when they fit the budget.
    pub fn build(&self, reward: &RewardSpec, exact: bool) -> Result<Task> {
        let layout = self.layout()?;
        let reward = Reward::new(reward.clone(), &layout)?;
        let fits = trajectory_count(&layout) <= self.enumeration_budget as u128;
        let spaces = if exact || fits {
            Some(
                (0..layout.prompts())
                    .map(|p| enumerate(&layout, p, self.enumeration_budget))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Task { layout, reward, spaces })
    }

    pub fn init_params(&self, layout: &Arc<Layout>) -> Result<PolicyParams> {
        match self.init {
            InitSpec::Uniform => Ok(PolicyParams::zeros(layout.clone())),
            InitSpec::Random { scale, seed } => {
                if !(scale.is_finite() && scale >= 0.0) {
                    return Err(LabError::config("task.init.scale", "must be finite and non-negative"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(PolicyParams::random(layout.clone(), scale, &mut rng))
            }
        }
    }
}

fn default_samples() -> usize {
    100_000
}
fn default_pairs() -> usize {
    5
}
fn default_scale() -> f64 {
    1.0
}
fn default_drift() -> f64 {
    0.5
}
fn default_separation() -> f64 {
    10.0
}
fn default_estimators() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}
fn default_bias_group() -> usize {
    8
}

/// Monte Carlo bias study over random `(θ, θ_old)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasStudyConfig {
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Algorithm>,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_samples")]
    pub sigma_samples: usize,
    #[serde(default = "default_bias_group")]
    pub group_size: usize,
    #[serde(default)]
    pub delta: f64,
    /// Scale of the random `θ_old` logits.
    #[serde(default = "default_scale")]
    pub theta_old_scale: f64,
    /// Scale of the random offset `θ − θ_old`.
    #[serde(default = "default_drift")]
    pub drift: f64,
    /// Minimum target separation, in Monte Carlo standard errors, for a
    /// pair to count.
    #[serde(default = "default_separation")]
    pub separation_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BiasStudyConfig {
    fn default() -> Self {
        BiasStudyConfig {
            estimators: default_estimators(),
            pairs: default_pairs(),
            samples: default_samples(),
            sigma_samples: default_samples(),
            group_size: default_bias_group(),
            delta: 0.0,
            theta_old_scale: default_scale(),
            drift: default_drift(),
            separation_threshold: default_separation(),
            seed: 0,
        }
    }
}

impl BiasStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(LabError::config("bias_study.estimators", "must not be empty"));
        }
        if self.pairs == 0 {
            return Err(LabError::config("bias_study.pairs", "must be at least 1"));
        }
        if self.samples < 10_000 {
            return Err(LabError::config("bias_study.samples", "must be at least 10^4"));
        }
        if self.sigma_samples < 1000 {
            return Err(LabError::config("bias_study.sigma_samples", "must be at least 1000"));
        }
        if self.group_size < 2 {
            return Err(LabError::config("bias_study.group_size", "must be at least 2"));
        }
        for (field, v) in [
            ("bias_study.delta", self.delta),
            ("bias_study.theta_old_scale", self.theta_old_scale),
            ("bias_study.drift", self.drift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabError::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

fn default_sigma_mc() -> usize {
    20_000
}

/// Decomposition dumps along the inner-loop drift of one outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    /// Groups simulated to estimate `σ̄_G`.
    #[serde(default = "default_sigma_mc")]
    pub sigma_samples: usize,
    /// Outer steps of training before the dumped one, so `θ_old` is not
    /// the initial policy.
    #[serde(default)]
    pub warmup_outer_steps: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            sigma_samples: default_sigma_mc(),
            warmup_outer_steps: 0,
        }
    }
}

fn default_root() -> String {
    "runs".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Directory under which run directories are created.
    #[serde(default = "default_root")]
    pub output_root: String,
    pub task: TaskConfig,
    pub reward: RewardSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bias_study: BiasStudyConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default)]
    pub sweep: SweepGrid,
}

impl RunConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .unwrap_or_else(|| "<document>".into());
            LabError::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.task.layout()?;
        Reward::new(self.reward.clone(), &layout)?;
        self.task.init_params(&layout)?;
        self.train.validate()?;
        self.bias_study.validate()?;
        if self.decompose.sigma_samples < 1000 {
            return Err(LabError::config("decompose.sigma_samples", "must be at least 1000"));
        }
        self.sweep.validate()
    }

    /// Overrides every seed in the file.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.bias_study.seed = seed;
        self.sweep.base_seed = seed;
        self
    }

    pub fn resolved(&self) -> Self {
        RunConfigFile {
            train: self.train.resolved(),
            ..self.clone()
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configs serialize to TOML")
    }
}
