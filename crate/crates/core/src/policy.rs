//! Tabular softmax token policy.
//!
//! Every reachable non-terminal state (a prompt followed by a prefix of
//! non-eos tokens shorter than the horizon) owns one row of `V` logits.
//! Rows are laid out prompt-major, then by prefix length, then by the
//! prefix read as a base-`(V - #eos)` number, so a parameter vector has a
//! fixed, enumerable dimension `rows × V` (state-index major, token minor).

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type TokenId = usize;

/// Token alphabet. `eos`, when present, terminates a sequence early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub eos: Option<TokenId>,
}

impl Vocab {
    pub fn new(size: usize, eos: Option<TokenId>) -> Result<Self> {
        if size < 2 {
            return Err(LabError::config("vocab_size", "must be at least 2"));
        }
        if let Some(e) = eos {
            if e >= size {
                return Err(LabError::config(
                    "eos",
                    format!("token {e} outside vocabulary of size {size}"),
                ));
            }
        }
        Ok(Vocab { size, eos })
    }

    pub fn is_eos(&self, token: TokenId) -> bool {
        self.eos == Some(token)
    }

    /// Number of tokens that keep a sequence open.
    pub fn branching(&self) -> usize {
        self.size - usize::from(self.eos.is_some())
    }

    fn digit(&self, token: TokenId) -> usize {
        match self.eos {
            Some(e) if token > e => token - 1,
            _ => token,
        }
    }

    fn token_of_digit(&self, digit: usize) -> TokenId {
        match self.eos {
            Some(e) if digit >= e => digit + 1,
            _ => digit,
        }
    }
}

/// A prompt followed by the tokens generated so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub prompt: usize,
    pub tokens: Vec<TokenId>,
}

impl State {
    pub fn root(prompt: usize) -> Self {
        State {
            prompt,
            tokens: Vec::new(),
        }
    }
}

/// Shape of the tabular parameterization: vocabulary, horizon `T_max` and
/// number of prompts, plus the derived row indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    vocab: Vocab,
    horizon: usize,
    prompts: usize,
    /// `level_offsets[d]` is the first row of depth-`d` prefixes within a prompt.
    level_offsets: Vec<usize>,
    rows_per_prompt: usize,
}

impl Layout {
    pub fn new(vocab: Vocab, horizon: usize, prompts: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(LabError::config("horizon", "must be at least 1"));
        }
        if prompts == 0 {
            return Err(LabError::config("prompts", "must be at least 1"));
        }
        let b = vocab.branching();
        let mut level_offsets = Vec::with_capacity(horizon + 1);
        let mut total: usize = 0;
        let mut width: usize = 1;
        for depth in 0..horizon {
            level_offsets.push(total);
            total = total
                .checked_add(width)
                .ok_or_else(|| LabError::config("horizon", "state table overflows"))?;
            if depth + 1 < horizon {
                width = width
                    .checked_mul(b)
                    .ok_or_else(|| LabError::config("horizon", "state table overflows"))?;
            }
        }
        level_offsets.push(total);
        Ok(Layout {
            vocab,
            horizon,
            prompts,
            level_offsets,
            rows_per_prompt: total,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn rows(&self) -> usize {
        self.rows_per_prompt * self.prompts
    }

    pub fn dim(&self) -> usize {
        self.rows() * self.vocab.size
    }

    pub fn root_row(&self, prompt: usize) -> usize {
        prompt * self.rows_per_prompt
    }

    /// Row reached from `row` (at prefix length `depth`) by emitting `token`,
    /// or `None` when the token terminates the sequence.
    pub fn child_row(&self, row: usize, depth: usize, token: TokenId) -> Option<usize> {
        if self.vocab.is_eos(token) || depth + 1 >= self.horizon {
            return None;
        }
        let prompt = row / self.rows_per_prompt;
        let code = row % self.rows_per_prompt - self.level_offsets[depth];
        let child = code * self.vocab.branching() + self.vocab.digit(token);
        Some(prompt * self.rows_per_prompt + self.level_offsets[depth + 1] + child)
    }

    /// Row index of a non-terminal state.
    pub fn state_row(&self, state: &State) -> Result<usize> {
        if state.prompt >= self.prompts {
            return Err(LabError::domain(format!(
                "prompt {} outside 0..{}",
                state.prompt, self.prompts
            )));
        }
        if state.tokens.len() >= self.horizon {
            return Err(LabError::domain(format!(
                "state of length {} is terminal at horizon {}",
                state.tokens.len(),
                self.horizon
            )));
        }
        let mut row = self.root_row(state.prompt);
        for (depth, &tok) in state.tokens.iter().enumerate() {
            if tok >= self.vocab.size {
                return Err(LabError::domain(format!("token {tok} outside vocabulary")));
            }
            row = self
                .child_row(row, depth, tok)
                .ok_or_else(|| LabError::domain("state contains eos and is terminal"))?;
        }
        Ok(row)
    }

    /// Inverse of [`Layout::state_row`].
    pub fn row_state(&self, row: usize) -> State {
        let prompt = row / self.rows_per_prompt;
        let local = row % self.rows_per_prompt;
        let depth = self.level_offsets.partition_point(|&o| o <= local) - 1;
        let mut code = local - self.level_offsets[depth];
        let b = self.vocab.branching();
        let mut tokens = vec![0; depth];
        for slot in tokens.iter_mut().rev() {
            *slot = self.vocab.token_of_digit(code % b);
            code /= b;
        }
        State { prompt, tokens }
    }

    /// Prefix length of the state stored in `row`.
    pub fn row_depth(&self, row: usize) -> usize {
        let local = row % self.rows_per_prompt;
        self.level_offsets.partition_point(|&o| o <= local) - 1
    }
}

/// Logit table `θ` defining `π_θ(a|s)` for every reachable state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    layout: Arc<Layout>,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let logits = vec![0.0; layout.dim()];
        PolicyParams { layout, logits }
    }

    pub fn from_vec(layout: Arc<Layout>, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != layout.dim() {
            return Err(LabError::domain(format!(
                "parameter vector has {} entries, layout needs {}",
                logits.len(),
                layout.dim()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(LabError::domain("logits must be finite"));
        }
        Ok(PolicyParams { layout, logits })
    }

    /// Independent `N(0, scale²)` logits.
    pub fn random<R: Rng + ?Sized>(layout: Arc<Layout>, scale: f64, rng: &mut R) -> Self {
        let logits = (0..layout.dim())
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        PolicyParams { layout, logits }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.logits
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.layout.vocab_size();
        &self.logits[row * v..(row + 1) * v]
    }

    /// `θ ← θ + step · direction`.
    pub fn add_scaled(&mut self, step: f64, direction: &[f64]) {
        debug_assert_eq!(direction.len(), self.logits.len());
        for (x, d) in self.logits.iter_mut().zip(direction) {
            *x += step * d;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|x| x.is_finite())
    }

    /// Softmax of one row written into `out`.
    pub fn row_probs_into(&self, row: usize, out: &mut [f64]) {
        let logits = self.row(row);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &l) in out.iter_mut().zip(logits) {
            *o = (l - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    pub fn row_probs(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.vocab_size()];
        self.row_probs_into(row, &mut out);
        out
    }

    pub fn row_log_prob(&self, row: usize, token: TokenId) -> f64 {
        let logits = self.row(row);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits[token] - lse
    }

    /// Adds `coef · ∇_θ log π_θ(token | row)` into `grad`.
    pub fn add_row_score(&self, row: usize, token: TokenId, coef: f64, grad: &mut [f64]) {
        let v = self.layout.vocab_size();
        let mut probs = [0.0f64; 64];
        let mut heap;
        let probs: &mut [f64] = if v <= probs.len() {
            &mut probs[..v]
        } else {
            heap = vec![0.0; v];
            &mut heap
        };
        self.row_probs_into(row, probs);
        let base = row * v;
        for (a, p) in probs.iter().enumerate() {
            grad[base + a] -= coef * p;
        }
        grad[base + token] += coef;
    }

    /// Exact categorical KL `Σ_a π_θ(a|s) log(π_θ(a|s) / π_ref(a|s))` for one row.
    pub fn row_kl(&self, reference: &ReferencePolicy, row: usize) -> f64 {
        let v = self.layout.vocab_size();
        (0..v)
            .map(|a| {
                let lp = self.row_log_prob(row, a);
                lp.exp() * (lp - reference.params.row_log_prob(row, a))
            })
            .sum()
    }

    /// Adds `coef · ∇_θ KL(π_θ(·|s) ‖ π_ref(·|s))` into `grad`.
    ///
    /// For softmax logits the gradient is `p ⊙ (log p − log q − KL)`.
    pub fn add_row_kl_grad(&self, reference: &ReferencePolicy, row: usize, coef: f64, grad: &mut [f64]) {
        let v = self.layout.vocab_size();
        let diffs: Vec<(f64, f64)> = (0..v)
            .map(|a| {
                let lp = self.row_log_prob(row, a);
                (lp.exp(), lp - reference.params.row_log_prob(row, a))
            })
            .collect();
        let kl: f64 = diffs.iter().map(|(p, d)| p * d).sum();
        let base = row * v;
        for (a, (p, d)) in diffs.into_iter().enumerate() {
            grad[base + a] += coef * p * (d - kl);
        }
    }

    pub fn token_probs(&self, state: &State) -> Result<Vec<f64>> {
        let row = self.layout.state_row(state)?;
        Ok(self.row_probs(row))
    }

    pub fn log_prob(&self, state: &State, token: TokenId) -> Result<f64> {
        let row = self.layout.state_row(state)?;
        self.check_token(token)?;
        Ok(self.row_log_prob(row, token))
    }

    /// `∇_θ log π_θ(token | state)` as a full parameter-shaped vector.
    pub fn score(&self, state: &State, token: TokenId) -> Result<Vec<f64>> {
        let row = self.layout.state_row(state)?;
        self.check_token(token)?;
        let mut grad = vec![0.0; self.dim()];
        self.add_row_score(row, token, 1.0, &mut grad);
        Ok(grad)
    }

    pub fn kl_to_ref(&self, reference: &ReferencePolicy, state: &State) -> Result<f64> {
        let row = self.layout.state_row(state)?;
        Ok(self.row_kl(reference, row))
    }

    pub fn kl_grad(&self, reference: &ReferencePolicy, state: &State) -> Result<Vec<f64>> {
        let row = self.layout.state_row(state)?;
        let mut grad = vec![0.0; self.dim()];
        self.add_row_kl_grad(reference, row, 1.0, &mut grad);
        Ok(grad)
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token >= self.layout.vocab_size() {
            return Err(LabError::domain(format!("token {token} outside vocabulary")));
        }
        Ok(())
    }
}

/// Frozen policy that the KL penalty pulls towards.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    params: PolicyParams,
}

impl ReferencePolicy {
    pub fn new(params: PolicyParams) -> Self {
        ReferencePolicy { params }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}
