//! Terminal rewards and exhaustive enumeration of the trajectory space.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{Layout, PolicyParams, TokenId};
use crate::trajectory::{step_logprobs, Sequence};

/// Default cap on the number of trajectories an enumeration may produce.
pub const DEFAULT_ENUMERATION_BUDGET: usize = 100_000;

fn default_bound() -> f64 {
    1.0
}

/// Declarative reward family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSpec {
    /// 1 for the exact target sequence, 0 otherwise.
    TargetSequence {
        target: Vec<TokenId>,
        #[serde(default = "default_bound")]
        bound: f64,
    },
    /// `bound · occurrences / max_occurrences` for a (possibly overlapping)
    /// token pattern.
    SubstringCount {
        pattern: Vec<TokenId>,
        #[serde(default = "default_bound")]
        bound: f64,
    },
    /// Pseudo-random value in `[-bound, bound]` per sequence, fixed by `seed`.
    RandomTable {
        seed: u64,
        #[serde(default = "default_bound")]
        bound: f64,
    },
}

impl RewardSpec {
    pub fn bound(&self) -> f64 {
        match self {
            RewardSpec::TargetSequence { bound, .. }
            | RewardSpec::SubstringCount { bound, .. }
            | RewardSpec::RandomTable { bound, .. } => *bound,
        }
    }
}

/// A reward spec validated against a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Reward {
    spec: RewardSpec,
    max_count: usize,
    target: Option<Sequence>,
}

impl Reward {
    pub fn new(spec: RewardSpec, layout: &Layout) -> Result<Self> {
        let bound = spec.bound();
        if !(bound.is_finite() && bound > 0.0) {
            return Err(LabError::config("reward.bound", "must be positive and finite"));
        }
        let mut max_count = 1;
        let mut target = None;
        match &spec {
            RewardSpec::TargetSequence { target: tokens, bound } => {
                if *bound < 1.0 {
                    return Err(LabError::config(
                        "reward.bound",
                        "target-sequence rewards 1.0, so bound must be >= 1",
                    ));
                }
                let seq = Sequence::new(layout, 0, tokens.clone())
                    .map_err(|e| LabError::config("reward.target", e.to_string()))?;
                if !seq.is_terminal() {
                    return Err(LabError::config(
                        "reward.target",
                        "target must end in eos or reach the horizon",
                    ));
                }
                target = Some(seq);
            }
            RewardSpec::SubstringCount { pattern, .. } => {
                if pattern.is_empty() || pattern.len() > layout.horizon() {
                    return Err(LabError::config(
                        "reward.pattern",
                        "pattern length must be in 1..=horizon",
                    ));
                }
                if pattern.iter().any(|&t| t >= layout.vocab_size()) {
                    return Err(LabError::config("reward.pattern", "token outside vocabulary"));
                }
                max_count = layout.horizon() - pattern.len() + 1;
            }
            RewardSpec::RandomTable { .. } => {}
        }
        Ok(Reward {
            spec,
            max_count,
            target,
        })
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    pub fn bound(&self) -> f64 {
        self.spec.bound()
    }

    /// `r(s_T)` for a complete sequence.
    pub fn evaluate(&self, seq: &Sequence) -> Result<f64> {
        if !seq.is_terminal() {
            return Err(LabError::domain("reward requested for a non-terminal sequence"));
        }
        Ok(match &self.spec {
            RewardSpec::TargetSequence { .. } => {
                let target = self.target.as_ref().expect("validated in Reward::new");
                if seq.tokens() == target.tokens() {
                    1.0
                } else {
                    0.0
                }
            }
            RewardSpec::SubstringCount { pattern, bound } => {
                let count = seq
                    .tokens()
                    .windows(pattern.len())
                    .filter(|w| *w == pattern.as_slice())
                    .count();
                bound * count as f64 / self.max_count as f64
            }
            RewardSpec::RandomTable { seed, bound } => {
                let mut h = splitmix64(*seed ^ 0x05ee_d0f7_ab1e);
                h = splitmix64(h ^ seq.prompt() as u64);
                for &t in seq.tokens() {
                    h = splitmix64(h ^ (t as u64 + 1));
                }
                h = splitmix64(h ^ seq.len() as u64);
                // 53 high bits → uniform in [0, 1).
                let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                bound * (2.0 * u - 1.0)
            }
        })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Every terminal sequence for one prompt, each listed exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpace {
    prompt: usize,
    sequences: Vec<Sequence>,
}

impl TrajectorySpace {
    pub fn prompt(&self) -> usize {
        self.prompt
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// `log P_θ(s_T | s_0)` for every sequence, in enumeration order.
    pub fn logprobs(&self, params: &PolicyParams) -> Vec<f64> {
        self.sequences
            .iter()
            .map(|s| step_logprobs(params, s).iter().sum())
            .collect()
    }

    pub fn probabilities(&self, params: &PolicyParams) -> Vec<f64> {
        self.logprobs(params).into_iter().map(f64::exp).collect()
    }

    pub fn rewards(&self, reward: &Reward) -> Vec<f64> {
        self.sequences
            .iter()
            .map(|s| reward.evaluate(s).expect("enumerated sequences are terminal"))
            .collect()
    }
}

/// Number of terminal sequences under `layout` for one prompt.
pub fn trajectory_count(layout: &Layout) -> u128 {
    let vocab = layout.vocab();
    let t = layout.horizon() as u32;
    if vocab.eos.is_some() {
        let b = vocab.branching() as u128;
        (0..=t).fold(0u128, |acc, d| acc.saturating_add(b.saturating_pow(d)))
    } else {
        (vocab.size as u128).saturating_pow(t)
    }
}

/// Lists 𝒮_T for `prompt`: every eos-terminated sequence shorter than the
/// horizon plus every eos-free sequence of full length.
pub fn enumerate(layout: &Layout, prompt: usize, budget: usize) -> Result<TrajectorySpace> {
    if prompt >= layout.prompts() {
        return Err(LabError::domain(format!("prompt {prompt} outside layout")));
    }
    let required = trajectory_count(layout);
    if required > budget as u128 {
        return Err(LabError::Budget { required, budget });
    }
    let mut sequences = Vec::with_capacity(required as usize);
    let mut tokens = Vec::with_capacity(layout.horizon());
    let mut rows = Vec::with_capacity(layout.horizon());
    extend(
        layout,
        prompt,
        layout.root_row(prompt),
        &mut tokens,
        &mut rows,
        &mut sequences,
    );
    debug_assert_eq!(sequences.len() as u128, required);
    Ok(TrajectorySpace { prompt, sequences })
}

fn extend(
    layout: &Layout,
    prompt: usize,
    row: usize,
    tokens: &mut Vec<TokenId>,
    rows: &mut Vec<usize>,
    out: &mut Vec<Sequence>,
) {
    let depth = tokens.len();
    for tok in 0..layout.vocab_size() {
        tokens.push(tok);
        rows.push(row);
        match layout.child_row(row, depth, tok) {
            Some(child) => extend(layout, prompt, child, tokens, rows, out),
            None => {
                let seq =
                    Sequence::new(layout, prompt, tokens.clone()).expect("enumeration only builds valid sequences");
                debug_assert_eq!(seq.rows(), rows.as_slice());
                out.push(seq);
            }
        }
        tokens.pop();
        rows.pop();
    }
}
