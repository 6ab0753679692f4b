//! Language-model scorers and the small trainable LMs.
//!
//! Everything that can assign a probability to text implements
//! [`LmScorer`]. Log-probabilities are natural logs summed over tokens.

pub mod external;
pub mod mixed;
pub mod neural;
pub mod ngram;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use external::{ExternalScorer, ExternalScorerConfig};
pub use mixed::{train_lm, train_mixed, MixConfig, MixReport};
pub use neural::{grad_check_lm, greedy_decode, NeuralLm, NeuralLmConfig, NeuralScorer};
pub use ngram::{NGramLm, NGramScorer};

use crate::corpus::count_tokens;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot compute perplexity of empty text")]
    EmptyText,
    #[error("sequence must have at least 2 tokens, got {0}")]
    SequenceTooShort(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("eps must be positive")]
    NonPositiveEps,
    #[error("{0} source is empty but its weight is positive")]
    EmptySource(&'static str),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("scorer protocol violation: {message}; line: {line:?}")]
    Protocol { message: String, line: String },
    #[error("scorer did not answer request {id} within {secs:.1} s")]
    Timeout { id: u64, secs: f64 },
    #[error("scorer process failed: {0}")]
    Child(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Sum of natural-log token probabilities and the number of tokens scored.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogProb {
    pub sum: f64,
    pub n_tokens: usize,
}

impl LogProb {
    pub fn new(sum: f64, n_tokens: usize) -> Self {
        Self { sum, n_tokens }
    }

    /// `exp(-sum / n)`.
    pub fn perplexity(&self) -> Result<f64, LmError> {
        if self.n_tokens == 0 {
            return Err(LmError::EmptyText);
        }
        Ok((-self.sum / self.n_tokens as f64).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub scorable: bool,
    pub trainable: bool,
    pub generative: bool,
}

pub trait LmScorer: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn logprob(&self, text: &str) -> Result<LogProb, LmError>;

    fn logprob_batch(&self, texts: &[&str]) -> Result<Vec<LogProb>, LmError> {
        texts.iter().map(|t| self.logprob(t)).collect()
    }

    /// Log-probability of `continuation` given `context`. The default scores
    /// the concatenation and subtracts the context.
    fn logprob_continuation(&self, context: &str, continuation: &str) -> Result<LogProb, LmError> {
        let full = self.logprob(&format!("{context}{continuation}"))?;
        let ctx = self.logprob(context)?;
        Ok(LogProb::new(full.sum - ctx.sum, full.n_tokens.saturating_sub(ctx.n_tokens)))
    }
}

pub fn perplexity(scorer: &dyn LmScorer, text: &str) -> Result<f64, LmError> {
    scorer.logprob(text)?.perplexity()
}

/// Every token has probability `1/V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl LmScorer for UniformScorer {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            scorable: true,
            ..Default::default()
        }
    }

    fn logprob(&self, text: &str) -> Result<LogProb, LmError> {
        if self.vocab_size == 0 {
            return Err(LmError::Config("vocabulary size must be positive".into()));
        }
        let n = count_tokens(text);
        Ok(LogProb::new(-(n as f64) * (self.vocab_size as f64).ln(), n))
    }
}

/// Numerically stable `ln Σ exp(x)`.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
