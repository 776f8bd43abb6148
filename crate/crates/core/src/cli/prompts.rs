//! Few-shot prompts for language-model guidance.
//!
//! Captions are joined with two newline tokens each, so the language model
//! learns to end a caption with a newline (which the decoder turns into EOS).

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, TokenId, Vocabulary};

/// Ten long descriptive captions.
pub const DESCRIPTIVE: &str = include_str!("../../prompts/descriptive.txt");
/// Captions of the form "a photo of NUMBER OBJECTS".
pub const COUNTING: &str = include_str!("../../prompts/counting.txt");

/// Items that share one freshly sampled prompt in per-batch mode.
pub const DEFAULT_BATCH_ITEMS: usize = 4;

/// One caption per non-blank line.
pub fn parse_captions(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect()
}

/// Tokenizes `captions` in order, each followed by two newline tokens.
pub fn join_captions(captions: &[&str], vocab: &Vocabulary) -> Result<Vec<TokenId>, CorpusError> {
    let mut out = Vec::new();
    for c in captions {
        out.extend(vocab.encode(c)?);
        out.extend([vocab.newline_id(), vocab.newline_id()]);
    }
    Ok(out)
}

/// Token-id prompts; with `batch_items` set, item `i` uses prompt
/// `i / batch_items`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_items: Option<usize>,
    pub prompts: Vec<Vec<TokenId>>,
}

impl PromptFile {
    pub fn single(prompt: Vec<TokenId>) -> Self {
        Self { batch_items: None, prompts: vec![prompt] }
    }

    pub fn prompt_for(&self, item: usize) -> &[TokenId] {
        match self.batch_items {
            Some(b) if b > 0 => &self.prompts[(item / b) % self.prompts.len()],
            _ => &self.prompts[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptOptions {
    pub n: usize,
    pub seed: u64,
    /// Take the first `n` captions instead of sampling.
    pub in_order: bool,
    /// Per-batch mode: number of items to cover.
    pub items: Option<usize>,
    pub batch_items: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self { n: 10, seed: 0, in_order: false, items: None, batch_items: DEFAULT_BATCH_ITEMS }
    }
}

/// Builds one prompt, or one per batch of items when `options.items` is set.
pub fn build_prompts(
    captions: &[String],
    vocab: &Vocabulary,
    options: &PromptOptions,
) -> Result<PromptFile, CorpusError> {
    if options.n > captions.len() {
        return Err(CorpusError::Spec(format!(
            "asked for {} prompt captions but only {} are available",
            options.n,
            captions.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut draw = || -> Result<Vec<TokenId>, CorpusError> {
        let chosen: Vec<&str> = if options.in_order {
            captions[..options.n].iter().map(String::as_str).collect()
        } else {
            index::sample(&mut rng, captions.len(), options.n).into_iter().map(|i| captions[i].as_str()).collect()
        };
        join_captions(&chosen, vocab)
    };
    match options.items {
        None => Ok(PromptFile::single(draw()?)),
        Some(items) => {
            if options.batch_items == 0 {
                return Err(CorpusError::Spec("batch size must be positive".into()));
            }
            let batches = items.div_ceil(options.batch_items).max(1);
            let prompts = (0..batches).map(|_| draw()).collect::<Result<_, _>>()?;
            Ok(PromptFile { batch_items: Some(options.batch_items), prompts })
        }
    }
}
