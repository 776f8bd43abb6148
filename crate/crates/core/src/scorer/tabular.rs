use std::collections::HashMap;

use crate::corpus::{world_consistency_check, ClassRef, Conditioning, TabularWorld, TokenId, Vocabulary};
use crate::numeric::CompensatedSum;

use super::{caption_prefix_of_context, check_prefix, LanguageModel, LogProbVector, Scorer, ScorerError};

/// Next-token log-probabilities for every supported prefix of one head.
#[derive(Debug, Clone, Default)]
struct PrefixTable {
    // Keyed by the BOS-free prefix.
    next: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl PrefixTable {
    fn build<'a>(vocab_size: usize, weighted: impl Iterator<Item = (&'a [TokenId], f64)>) -> Self {
        let mut mass: HashMap<Vec<TokenId>, Vec<CompensatedSum>> = HashMap::new();
        for (tokens, p) in weighted {
            if p <= 0.0 {
                continue;
            }
            for t in 0..tokens.len() {
                mass.entry(tokens[..t].to_vec()).or_insert_with(|| vec![CompensatedSum::new(); vocab_size])
                    [tokens[t] as usize]
                    .add(p);
            }
        }
        let next = mass
            .into_iter()
            .map(|(prefix, children)| {
                let values: Vec<f64> = children.iter().map(CompensatedSum::value).collect();
                let total = crate::numeric::sum(values.iter().copied());
                let log_total = total.ln();
                let logs =
                    values.iter().map(|&m| if m > 0.0 { m.ln() - log_total } else { f64::NEG_INFINITY }).collect();
                (prefix, logs)
            })
            .collect();
        Self { next }
    }

    fn lookup(&self, prefix: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        self.next
            .get(&prefix[1..])
            .map(|v| LogProbVector(v.clone()))
            .ok_or_else(|| ScorerError::OutsideSupport(prefix.to_vec()))
    }
}

/// Exact scorer over a [`TabularWorld`]: the conditional head reads `p(x|y)`
/// and the unconditional head the marginal `p(x)`.
///
/// Conditioning is resolved as a one-hot class indicator. The scorer also
/// serves as a language model over the world's marginal.
#[derive(Debug, Clone)]
pub struct TabularScorer {
    world: TabularWorld,
    class_index: HashMap<u32, usize>,
    heads: Vec<PrefixTable>,
    marginal: PrefixTable,
}

impl TabularScorer {
    pub fn new(world: TabularWorld) -> Result<Self, ScorerError> {
        let report = world_consistency_check(&world);
        if !report.is_ok() {
            return Err(ScorerError::Training(format!("inconsistent world: {report}")));
        }
        let v = world.vocab.size();
        let class_index = world.classes.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        let heads = world
            .classes
            .iter()
            .map(|c| PrefixTable::build(v, world.sequences[&c.id].iter().map(|s| (s.tokens.as_slice(), s.p))))
            .collect();
        let marginal_seqs = world.marginal();
        let marginal = PrefixTable::build(v, marginal_seqs.iter().map(|(t, &p)| (t.as_slice(), p)));
        Ok(Self { world, class_index, heads, marginal })
    }

    pub fn world(&self) -> &TabularWorld {
        &self.world
    }

    fn class_logprobs(&self, prefix: &[TokenId], class: u32) -> Result<LogProbVector, ScorerError> {
        let &idx = self.class_index.get(&class).ok_or(ScorerError::UnknownClass(class))?;
        self.heads[idx].lookup(prefix)
    }
}

impl Scorer for TabularScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.world.vocab
    }

    fn conditional_logprobs(
        &self,
        prefix: &[TokenId],
        conditioning: &Conditioning,
    ) -> Result<LogProbVector, ScorerError> {
        check_prefix(prefix, &self.world.vocab)?;
        match conditioning.resolve_class() {
            ClassRef::Unconditional => self.marginal.lookup(prefix),
            ClassRef::Class(c) => self.class_logprobs(prefix, c),
            ClassRef::Unresolved => Err(ScorerError::UnresolvedConditioning),
        }
    }

    fn unconditional_logprobs(&self, prefix: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        check_prefix(prefix, &self.world.vocab)?;
        self.marginal.lookup(prefix)
    }
}

impl LanguageModel for TabularScorer {
    fn vocab_size(&self) -> usize {
        self.world.vocab.size()
    }

    fn lm_logprobs(&self, context: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        self.unconditional_logprobs(&caption_prefix_of_context(context, &self.world.vocab))
    }
}
