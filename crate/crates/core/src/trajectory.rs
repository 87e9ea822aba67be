//! Token sequences, their probabilities, and autoregressive sampling.

use rand::Rng;

use crate::error::{LabError, Result};
use crate::policy::{Layout, PolicyParams, TokenId};

/// A prompt-rooted token sequence together with the policy row visited
/// before each emitted token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    prompt: usize,
    tokens: Vec<TokenId>,
    rows: Vec<usize>,
    terminal: bool,
}

impl Sequence {
    /// Validates `tokens` against the layout: in-vocabulary, nothing after
    /// eos, at most `horizon` tokens.
    pub fn new(layout: &Layout, prompt: usize, tokens: Vec<TokenId>) -> Result<Self> {
        if prompt >= layout.prompts() {
            return Err(LabError::domain(format!("prompt {prompt} outside layout")));
        }
        if tokens.len() > layout.horizon() {
            return Err(LabError::domain(format!(
                "{} tokens exceed horizon {}",
                tokens.len(),
                layout.horizon()
            )));
        }
        let mut rows = Vec::with_capacity(tokens.len());
        let mut row = Some(layout.root_row(prompt));
        for (depth, &tok) in tokens.iter().enumerate() {
            if tok >= layout.vocab_size() {
                return Err(LabError::domain(format!("token {tok} outside vocabulary")));
            }
            let current = row.ok_or_else(|| LabError::domain("token emitted after eos"))?;
            rows.push(current);
            row = layout.child_row(current, depth, tok);
        }
        let terminal = !tokens.is_empty() && row.is_none();
        Ok(Sequence {
            prompt,
            tokens,
            rows,
            terminal,
        })
    }

    pub fn prompt(&self) -> usize {
        self.prompt
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Policy row before each token; `rows()[t]` produced `tokens()[t]`.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// `|s_T|`, the emitted token count including eos.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Ended in eos or reached the horizon.
    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, TokenId)> + '_ {
        self.rows.iter().copied().zip(self.tokens.iter().copied())
    }
}

/// A sampled sequence with the per-step log-probabilities of the policy
/// that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sequence: Sequence,
    pub sampling_logprobs: Vec<f64>,
}

impl Trajectory {
    /// Pairs a sequence with the log-probabilities `params` assigns it.
    pub fn scored(params: &PolicyParams, sequence: Sequence) -> Self {
        let sampling_logprobs = step_logprobs(params, &sequence);
        Trajectory {
            sequence,
            sampling_logprobs,
        }
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn sampling_logprob(&self) -> f64 {
        self.sampling_logprobs.iter().sum()
    }
}

pub fn step_logprobs(params: &PolicyParams, seq: &Sequence) -> Vec<f64> {
    seq.steps().map(|(row, tok)| params.row_log_prob(row, tok)).collect()
}

/// `log P_θ(s_T | s_0) = Σ_t log π_θ(s_t | s_{t-1})`.
pub fn trajectory_logprob(params: &PolicyParams, seq: &Sequence) -> Result<f64> {
    let layout = params.layout();
    if seq.prompt() >= layout.prompts() || seq.rows().iter().any(|&r| r >= layout.rows()) {
        return Err(LabError::domain("sequence does not belong to this layout"));
    }
    Ok(step_logprobs(params, seq).iter().sum())
}

/// Samples tokens autoregressively from the root of `prompt` until eos or
/// the horizon, recording each step's log-probability.
pub fn sample_trajectory<R: Rng + ?Sized>(params: &PolicyParams, prompt: usize, rng: &mut R) -> Result<Trajectory> {
    let layout = params.layout();
    if prompt >= layout.prompts() {
        return Err(LabError::domain(format!("prompt {prompt} outside layout")));
    }
    let v = layout.vocab_size();
    let mut probs = vec![0.0; v];
    let mut tokens = Vec::with_capacity(layout.horizon());
    let mut rows = Vec::with_capacity(layout.horizon());
    let mut logprobs = Vec::with_capacity(layout.horizon());
    let mut row = Some(layout.root_row(prompt));
    let mut depth = 0;
    while let Some(current) = row {
        params.row_probs_into(current, &mut probs);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut token = v - 1;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                token = a;
                break;
            }
        }
        // Guard against rounding leaving `u` past the final cumulative sum
        // onto a zero-probability token.
        while probs[token] == 0.0 && token > 0 {
            token -= 1;
        }
        rows.push(current);
        tokens.push(token);
        logprobs.push(params.row_log_prob(current, token));
        row = layout.child_row(current, depth, token);
        depth += 1;
    }
    Ok(Trajectory {
        sequence: Sequence {
            prompt,
            tokens,
            rows,
            terminal: true,
        },
        sampling_logprobs: logprobs,
    })
}
