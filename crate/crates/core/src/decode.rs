//! Greedy and beam decoding over fused scores.
//!
//! At every step the captioner is queried on `[BOS] ++ generated` (both
//! heads), the language model, when guidance needs one, on
//! `prompt ++ generated`, and the fused [`ScoreVector`] decides the next
//! token. Decoding stops at EOS or after `max_length` tokens.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conditioning, TokenId};
use crate::guidance::{self, GuidanceError, GuidanceSpec, ScoreVector};
use crate::scorer::{LanguageModel, Scorer, ScorerError};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("no admissible token at step {step}")]
    NoAdmissibleToken { step: usize },
    #[error("language-model guidance needs a language model")]
    MissingLanguageModel,
    #[error("language model vocabulary has {lm} tokens, captioner has {captioner}")]
    VocabMismatch { lm: usize, captioner: usize },
    #[error("invalid decode parameters: {0}")]
    Params(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_length: usize,
    pub strategy: Strategy,
    /// Items handed to a worker at a time in [`Decoder::decode_batch`].
    pub batch_size: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { max_length: 32, strategy: Strategy::Greedy, batch_size: 1 }
    }
}

impl DecodeParams {
    pub fn greedy(max_length: usize) -> Self {
        Self { max_length, ..Self::default() }
    }

    pub fn beam(max_length: usize, width: usize) -> Self {
        Self { max_length, strategy: Strategy::Beam { width }, batch_size: 1 }
    }

    fn validate(&self) -> Result<(), DecodeError> {
        if self.max_length < 1 {
            return Err(DecodeError::Params("max_length must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(DecodeError::Params("batch_size must be at least 1".into()));
        }
        if let Strategy::Beam { width } = self.strategy {
            if width < 1 {
                return Err(DecodeError::Params("beam width must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Generated tokens without BOS; ends with EOS unless truncated.
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Sum of the fused scores of the selected tokens.
    pub score: f64,
    pub terminated_by: Termination,
}

/// A configured decoding run: scorers, guidance rule and parameters.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    scorer: &'a dyn Scorer,
    lm: Option<&'a dyn LanguageModel>,
    guidance: &'a GuidanceSpec,
    params: DecodeParams,
}

impl<'a> Decoder<'a> {
    pub fn new(
        scorer: &'a dyn Scorer,
        lm: Option<&'a dyn LanguageModel>,
        guidance: &'a GuidanceSpec,
        params: DecodeParams,
    ) -> Result<Self, DecodeError> {
        params.validate()?;
        let vocab = scorer.vocab();
        guidance.validate(vocab.bos_id(), vocab.eos_id())?;
        if let GuidanceSpec::Lm { .. } = guidance {
            let lm = lm.ok_or(DecodeError::MissingLanguageModel)?;
            if lm.vocab_size() != vocab.size() {
                return Err(DecodeError::VocabMismatch { lm: lm.vocab_size(), captioner: vocab.size() });
            }
        }
        Ok(Self { scorer, lm, guidance, params })
    }

    pub fn params(&self) -> &DecodeParams {
        &self.params
    }

    pub fn guidance(&self) -> &GuidanceSpec {
        self.guidance
    }

    /// Fused scores for the next token after `generated` (BOS excluded).
    pub fn step_scores(&self, generated: &[TokenId], conditioning: &Conditioning) -> Result<ScoreVector, DecodeError> {
        let vocab = self.scorer.vocab();
        let mut prefix = Vec::with_capacity(generated.len() + 1);
        prefix.push(vocab.bos_id());
        prefix.extend_from_slice(generated);
        let scores = match self.guidance {
            GuidanceSpec::None => self.scorer.conditional_logprobs(&prefix, conditioning)?.into(),
            GuidanceSpec::Cfg { gamma } => {
                let cond = self.scorer.conditional_logprobs(&prefix, conditioning)?;
                let uncond = self.scorer.unconditional_logprobs(&prefix)?;
                guidance::cfg_fuse(&cond, &uncond, *gamma)?
            }
            GuidanceSpec::Lm { alpha, beta, prompt } => {
                let lm = self.lm.ok_or(DecodeError::MissingLanguageModel)?;
                let mut context = Vec::with_capacity(prompt.len() + generated.len());
                context.extend_from_slice(prompt);
                context.extend_from_slice(generated);
                let lm_lp = lm.lm_logprobs(&context)?;
                let cond = self.scorer.conditional_logprobs(&prefix, conditioning)?;
                let uncond = self.scorer.unconditional_logprobs(&prefix)?;
                let fused = guidance::lm_fuse(&lm_lp, &cond, &uncond, *alpha, *beta)?;
                guidance::transfer_newline_to_eos(&fused, vocab.eos_id(), vocab.newline_id())?
            }
        };
        if scores.len() != vocab.size() {
            return Err(ScorerError::WrongLength { expected: vocab.size(), got: scores.len() }.into());
        }
        Ok(scores)
    }

    fn finish(&self, tokens: Vec<TokenId>, score: f64) -> DecodeResult {
        let eos = self.scorer.vocab().eos_id();
        let terminated_by = if tokens.last() == Some(&eos) { Termination::Eos } else { Termination::MaxLength };
        let text = self.scorer.vocab().decode(&tokens);
        DecodeResult { tokens, text, score, terminated_by }
    }

    /// Per-step argmax (ties to the lowest token id).
    pub fn greedy(&self, conditioning: &Conditioning) -> Result<DecodeResult, DecodeError> {
        let eos = self.scorer.vocab().eos_id();
        let mut tokens = Vec::new();
        let mut score = 0.0;
        for step in 0..self.params.max_length {
            let scores = self.step_scores(&tokens, conditioning)?;
            let next = scores.argmax().ok_or(DecodeError::NoAdmissibleToken { step })?;
            score += scores.get(next);
            tokens.push(next);
            if next == eos {
                break;
            }
        }
        Ok(self.finish(tokens, score))
    }

    /// Beam search over cumulative fused scores without length
    /// normalization. Hypotheses that emit EOS retire; the best `width`
    /// finished (or, at the length cap, unfinished) ones are returned, best
    /// first, ties to the lexicographically smaller token sequence.
    pub fn beam(&self, conditioning: &Conditioning, width: usize) -> Result<Vec<DecodeResult>, DecodeError> {
        if width < 1 {
            return Err(DecodeError::Params("beam width must be at least 1".into()));
        }
        let eos = self.scorer.vocab().eos_id();
        let mut alive: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
        let mut pool: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for step in 0..self.params.max_length {
            let mut candidates = Vec::new();
            for (tokens, score) in &alive {
                let scores = self.step_scores(tokens, conditioning)?;
                for (id, &s) in scores.values().iter().enumerate() {
                    if s == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut next = tokens.clone();
                    next.push(id as TokenId);
                    candidates.push((next, score + s));
                }
            }
            if candidates.is_empty() {
                if pool.is_empty() {
                    return Err(DecodeError::NoAdmissibleToken { step });
                }
                alive.clear();
                break;
            }
            candidates.sort_by(hypothesis_order);
            candidates.truncate(width);
            alive = Vec::new();
            for (tokens, score) in candidates {
                if tokens.last() == Some(&eos) {
                    pool.push((tokens, score));
                } else {
                    alive.push((tokens, score));
                }
            }
            if alive.is_empty() {
                break;
            }
        }
        pool.extend(alive);
        pool.sort_by(hypothesis_order);
        pool.truncate(width);
        Ok(pool.into_iter().map(|(t, s)| self.finish(t, s)).collect())
    }

    /// Runs the configured strategy and returns the best hypothesis.
    pub fn decode(&self, conditioning: &Conditioning) -> Result<DecodeResult, DecodeError> {
        match self.params.strategy {
            Strategy::Greedy => self.greedy(conditioning),
            Strategy::Beam { width } => {
                self.beam(conditioning, width)?.into_iter().next().ok_or(DecodeError::NoAdmissibleToken { step: 0 })
            }
        }
    }

    /// Decodes every item independently on the current rayon pool. Output
    /// `i` is exactly what [`Decoder::decode`] returns for item `i`.
    pub fn decode_batch(&self, items: &[Conditioning]) -> Vec<Result<DecodeResult, DecodeError>> {
        items
            .par_chunks(self.params.batch_size)
            .flat_map_iter(|chunk| chunk.iter().map(|c| self.decode(c)).collect::<Vec<_>>())
            .collect()
    }

    /// [`Decoder::decode_batch`] on a dedicated pool of `threads` workers.
    pub fn decode_batch_on(
        &self,
        items: &[Conditioning],
        threads: usize,
    ) -> Result<Vec<Result<DecodeResult, DecodeError>>, DecodeError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| DecodeError::Pool(e.to_string()))?;
        Ok(pool.install(|| self.decode_batch(items)))
    }
}

fn hypothesis_order(a: &(Vec<TokenId>, f64), b: &(Vec<TokenId>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic_world, GroupSpec, MemberSpec, WorldSpec};
    use crate::scorer::TabularScorer;

    fn dog_world(rho: f64) -> TabularScorer {
        let spec = WorldSpec {
            groups: vec![GroupSpec {
                generic: vec!["a dog".into()],
                members: vec![
                    MemberSpec { specific: vec!["a tan corgi".into()] },
                    MemberSpec { specific: vec!["a black poodle".into()] },
                ],
            }],
            rho,
            l_max: 6,
            refs_per_item: 1,
            items_per_class: 1,
            dim: None,
        };
        TabularScorer::new(make_synthetic_world(&spec, 0).unwrap().0).unwrap()
    }

    fn decode_text(s: &TabularScorer, g: GuidanceSpec, class: u32) -> String {
        Decoder::new(s, None, &g, DecodeParams::greedy(8))
            .unwrap()
            .greedy(&Conditioning::for_class(class, 2))
            .unwrap()
            .text
    }

    #[test]
    fn guidance_scale_moves_greedy_to_specific_caption() {
        let s = dog_world(0.8);
        assert_eq!(decode_text(&s, GuidanceSpec::Cfg { gamma: 1.0 }, 0), "a dog");
        assert_eq!(decode_text(&s, GuidanceSpec::None, 0), "a dog");
        assert_eq!(decode_text(&s, GuidanceSpec::Cfg { gamma: 4.0 }, 0), "a tan corgi");
        assert_eq!(decode_text(&s, GuidanceSpec::Cfg { gamma: 4.0 }, 1), "a black poodle");
    }

    #[test]
    fn greedy_score_is_sum_of_selected_entries() {
        let s = dog_world(0.8);
        let g = GuidanceSpec::None;
        let r = Decoder::new(&s, None, &g, DecodeParams::greedy(8))
            .unwrap()
            .greedy(&Conditioning::for_class(0, 2))
            .unwrap();
        assert!((r.score - 0.8f64.ln()).abs() < 1e-12);
        assert_eq!(r.terminated_by, Termination::Eos);
    }

    #[test]
    fn max_length_truncates_without_forcing_eos() {
        let s = dog_world(0.8);
        let g = GuidanceSpec::None;
        let r = Decoder::new(&s, None, &g, DecodeParams::greedy(1))
            .unwrap()
            .greedy(&Conditioning::for_class(0, 2))
            .unwrap();
        assert_eq!(r.tokens.len(), 1);
        assert_eq!(r.terminated_by, Termination::MaxLength);
    }

    #[test]
    fn lm_guidance_requires_a_language_model() {
        let s = dog_world(0.8);
        let g = GuidanceSpec::Lm { alpha: 1.0, beta: 1.0, prompt: vec![] };
        assert!(matches!(Decoder::new(&s, None, &g, DecodeParams::default()), Err(DecodeError::MissingLanguageModel)));
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let s = dog_world(0.7);
        for gamma in [1.0, 1.5, 3.0] {
            let g = GuidanceSpec::Cfg { gamma };
            let d = Decoder::new(&s, None, &g, DecodeParams::greedy(8)).unwrap();
            let c = Conditioning::for_class(1, 2);
            assert_eq!(d.beam(&c, 1).unwrap()[0], d.greedy(&c).unwrap());
        }
    }

    #[test]
    fn beam_on_deterministic_world_finds_the_caption() {
        let spec = WorldSpec::builtin(&[1], 0.7).unwrap();
        let (mut world, _) = make_synthetic_world(&spec, 0).unwrap();
        let only = world.vocab.encode_caption("a corgi").unwrap();
        world.sequences.insert(0, vec![crate::corpus::WeightedSequence { tokens: only.clone(), p: 1.0 }]);
        let s = TabularScorer::new(world).unwrap();
        let g = GuidanceSpec::Cfg { gamma: 1.0 };
        let r = Decoder::new(&s, None, &g, DecodeParams::beam(8, 4))
            .unwrap()
            .beam(&Conditioning::for_class(0, 1), 4)
            .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].tokens, only);
        assert_eq!(r[0].score, 0.0);
    }

    #[test]
    fn batch_reports_errors_per_index() {
        let s = dog_world(0.8);
        let g = GuidanceSpec::Cfg { gamma: 2.0 };
        let d = Decoder::new(&s, None, &g, DecodeParams::greedy(8)).unwrap();
        let items = vec![Conditioning::for_class(0, 2), Conditioning::for_class(9, 10), Conditioning::for_class(1, 2)];
        let out = d.decode_batch(&items);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].as_ref().unwrap(), &d.greedy(&items[0]).unwrap());
        assert!(matches!(out[1], Err(DecodeError::Scorer(ScorerError::UnknownClass(9)))));
        assert_eq!(out[2].as_ref().unwrap(), &d.greedy(&items[2]).unwrap());
        assert!(d.decode_batch(&[]).is_empty());
    }
}
