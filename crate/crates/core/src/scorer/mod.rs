//! The next-token scorer contract and its backends.
//!
//! Every backend answers with normalized next-token log-probabilities for a
//! prefix that starts with BOS. The unconditional head is the conditional
//! head queried with the all-zeros conditioning.

use crate::corpus::{Conditioning, TokenId, Vocabulary};
use crate::numeric;

mod ngram;
mod remote;
mod tabular;
pub mod wire;

pub use ngram::{train_ngram, Head, NGramConfig, NGramModel};
pub use remote::{RemoteError, RemoteOptions, RemoteScorer};
pub use tabular::TabularScorer;

#[derive(Debug, thiserror::Error)]
pub enum ScorerError {
    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("conditioning is not a class indicator this scorer understands")]
    UnresolvedConditioning,
    #[error("prefix {0:?} has zero probability under the requested head")]
    OutsideSupport(Vec<TokenId>),
    #[error("scorer returned {got} entries, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("scorer returned an invalid log-probability: {0}")]
    InvalidValue(String),
    #[error("training: {0}")]
    Training(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

/// Normalized next-token log-probabilities, in nats, one entry per token id.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector(Vec<f64>);

impl LogProbVector {
    /// Rejects NaN and `+inf`; `-inf` marks an impossible token.
    pub fn new(values: Vec<f64>) -> Result<Self, ScorerError> {
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(ScorerError::InvalidValue(v.to_string()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.0[id as usize]
    }

    pub fn logsumexp(&self) -> f64 {
        numeric::logsumexp(&self.0)
    }

    pub fn argmax(&self) -> Option<TokenId> {
        numeric::argmax(&self.0).map(|i| i as TokenId)
    }
}

/// A captioner: next-token distributions given a prefix and a conditioning.
pub trait Scorer: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// `prefix` starts with BOS and contains no EOS.
    fn conditional_logprobs(
        &self,
        prefix: &[TokenId],
        conditioning: &Conditioning,
    ) -> Result<LogProbVector, ScorerError>;

    /// Equivalent to [`Scorer::conditional_logprobs`] with the all-zeros conditioning.
    fn unconditional_logprobs(&self, prefix: &[TokenId]) -> Result<LogProbVector, ScorerError>;
}

/// An independently trained language model sharing the captioner's vocabulary.
///
/// The context is the prompt followed by the tokens generated so far (no
/// BOS). Backends built from caption models read the caption prefix as the
/// tokens after the last newline.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn lm_logprobs(&self, context: &[TokenId]) -> Result<LogProbVector, ScorerError>;
}

impl<T: Scorer + ?Sized> Scorer for std::sync::Arc<T> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn conditional_logprobs(&self, prefix: &[TokenId], c: &Conditioning) -> Result<LogProbVector, ScorerError> {
        (**self).conditional_logprobs(prefix, c)
    }
    fn unconditional_logprobs(&self, prefix: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        (**self).unconditional_logprobs(prefix)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn lm_logprobs(&self, context: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        (**self).lm_logprobs(context)
    }
}

pub(crate) fn check_prefix(prefix: &[TokenId], vocab: &Vocabulary) -> Result<(), ScorerError> {
    match prefix.first() {
        None => return Err(ScorerError::InvalidPrefix("empty prefix".into())),
        Some(&t) if t != vocab.bos_id() => return Err(ScorerError::InvalidPrefix("prefix must start with BOS".into())),
        _ => {}
    }
    if prefix.contains(&vocab.eos_id()) {
        return Err(ScorerError::InvalidPrefix("prefix contains EOS".into()));
    }
    if let Some(t) = prefix.iter().find(|&&t| t as usize >= vocab.size()) {
        return Err(ScorerError::InvalidPrefix(format!("token {t} outside the vocabulary")));
    }
    Ok(())
}

/// The caption prefix a caption model sees for an LM context: BOS followed
/// by the tokens after the last newline.
pub(crate) fn caption_prefix_of_context(context: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    let start = context.iter().rposition(|&t| t == vocab.newline_id()).map_or(0, |i| i + 1);
    let mut prefix = Vec::with_capacity(context.len() - start + 1);
    prefix.push(vocab.bos_id());
    prefix.extend(context[start..].iter().copied().filter(|&t| t != vocab.bos_id()));
    prefix
}
