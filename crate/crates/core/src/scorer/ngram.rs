//! Class-conditional n-gram captioner with conditioning masking.
//!
//! Each training caption is counted under its class head, or under the
//! unconditional head when its conditioning is masked. Lookup backs off from
//! order `k` to the empty context. A class head that has no counts at any
//! order defers to the unconditional head, and the unconditional head tries
//! counts pooled across all heads before backing off, bottoming out at the
//! uniform distribution.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassRef, Conditioning, Corpus, CorpusError, TokenId, Vocabulary};

use super::{caption_prefix_of_context, check_prefix, LanguageModel, LogProbVector, Scorer, ScorerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Class(u32),
    Uncond,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NGramConfig {
    pub order: usize,
    /// Probability that a training caption is counted under the
    /// unconditional head instead of its class.
    pub mask_prob: f64,
    /// Additive smoothing constant.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self { order: 3, mask_prob: 0.5, smoothing: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Counts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

impl Counts {
    fn add(&mut self, token: TokenId, n: u64) {
        self.total += n;
        *self.next.entry(token).or_default() += n;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct NGramModel {
    order: usize,
    smoothing: f64,
    vocab: Vocabulary,
    classes: BTreeSet<u32>,
    counts: HashMap<(Head, Vec<TokenId>), Counts>,
    pooled: HashMap<Vec<TokenId>, Counts>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    head: Head,
    context: Vec<TokenId>,
    next: Vec<(TokenId, u64)>,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    order: usize,
    smoothing: f64,
    vocab: Vocabulary,
    classes: Vec<u32>,
    tables: Vec<RawTable>,
}

impl From<NGramModel> for RawModel {
    fn from(m: NGramModel) -> Self {
        let mut tables: Vec<RawTable> = m
            .counts
            .into_iter()
            .map(|((head, context), c)| RawTable { head, context, next: c.next.into_iter().collect() })
            .collect();
        tables.sort_by(|a, b| (a.head, &a.context).cmp(&(b.head, &b.context)));
        RawModel {
            order: m.order,
            smoothing: m.smoothing,
            vocab: m.vocab,
            classes: m.classes.into_iter().collect(),
            tables,
        }
    }
}

impl TryFrom<RawModel> for NGramModel {
    type Error = String;

    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        if raw.order < 1 || raw.smoothing.is_nan() || raw.smoothing <= 0.0 {
            return Err(format!("invalid order {} or smoothing {}", raw.order, raw.smoothing));
        }
        let mut model = NGramModel::empty(raw.order, raw.smoothing, raw.vocab);
        model.classes = raw.classes.into_iter().collect();
        for t in raw.tables {
            for (tok, n) in t.next {
                model.add_count(t.head, t.context.clone(), tok, n);
            }
        }
        Ok(model)
    }
}

impl NGramModel {
    fn empty(order: usize, smoothing: f64, vocab: Vocabulary) -> Self {
        Self { order, smoothing, vocab, classes: BTreeSet::new(), counts: HashMap::new(), pooled: HashMap::new() }
    }

    fn add_count(&mut self, head: Head, context: Vec<TokenId>, token: TokenId, n: u64) {
        self.pooled.entry(context.clone()).or_default().add(token, n);
        self.counts.entry((head, context)).or_default().add(token, n);
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().copied()
    }

    /// Raw count of `token` after `context` under `head` (context length `< order`).
    pub fn count(&self, head: Head, context: &[TokenId], token: TokenId) -> u64 {
        self.counts.get(&(head, context.to_vec())).and_then(|c| c.next.get(&token)).copied().unwrap_or(0)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text =
            fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    /// The `k - 1` token history ending at the end of `prefix`, left-padded with BOS.
    fn history(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let want = self.order - 1;
        let mut h = vec![self.vocab.bos_id(); want.saturating_sub(prefix.len())];
        h.extend_from_slice(&prefix[prefix.len().saturating_sub(want)..]);
        h
    }

    fn smoothed(&self, counts: &Counts) -> LogProbVector {
        let v = self.vocab.size();
        let denom = (counts.total as f64 + self.smoothing * v as f64).ln();
        let values = (0..v as TokenId)
            .map(|t| (counts.next.get(&t).copied().unwrap_or(0) as f64 + self.smoothing).ln() - denom)
            .collect();
        LogProbVector(values)
    }

    fn uniform(&self) -> LogProbVector {
        let v = self.vocab.size();
        LogProbVector(vec![-(v as f64).ln(); v])
    }

    fn lookup(&self, head: Head, prefix: &[TokenId]) -> LogProbVector {
        let history = self.history(prefix);
        if let Head::Class(_) = head {
            for j in 0..self.order {
                if let Some(c) = self.counts.get(&(head, history[j..].to_vec())).filter(|c| c.total > 0) {
                    return self.smoothed(c);
                }
            }
        }
        for j in 0..self.order {
            let ctx = history[j..].to_vec();
            if let Some(c) = self.counts.get(&(Head::Uncond, ctx.clone())).filter(|c| c.total > 0) {
                return self.smoothed(c);
            }
            if let Some(c) = self.pooled.get(&ctx).filter(|c| c.total > 0) {
                return self.smoothed(c);
            }
        }
        self.uniform()
    }
}

/// Counts every reference caption of `corpus` under its class head, or under
/// the unconditional head with probability `mask_prob`. Deterministic in
/// `(corpus, config)`.
pub fn train_ngram(corpus: &Corpus, vocab: &Vocabulary, config: &NGramConfig) -> Result<NGramModel, ScorerError> {
    if config.order < 1 {
        return Err(ScorerError::Training("order must be at least 1".into()));
    }
    if !config.smoothing.is_finite() || config.smoothing <= 0.0 {
        return Err(ScorerError::Training("smoothing must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.mask_prob) {
        return Err(ScorerError::Training("mask_prob must lie in [0, 1]".into()));
    }
    if corpus.is_empty() {
        return Err(ScorerError::Training("corpus is empty".into()));
    }
    let mut model = NGramModel::empty(config.order, config.smoothing, vocab.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for item in &corpus.items {
        let class = match item.conditioning.resolve_class() {
            ClassRef::Class(c) => Some(c),
            ClassRef::Unconditional => None,
            ClassRef::Unresolved => return Err(ScorerError::UnresolvedConditioning),
        };
        if let Some(c) = class {
            model.classes.insert(c);
        }
        for reference in &item.references {
            let masked = rng.random::<f64>() < config.mask_prob;
            let head = match class {
                Some(c) if !masked => Head::Class(c),
                _ => Head::Uncond,
            };
            let tokens = vocab
                .encode_caption(reference)
                .map_err(|e| ScorerError::Training(format!("item {:?}: {e}", item.id)))?;
            let mut padded = vec![vocab.bos_id(); config.order - 1];
            padded.extend_from_slice(&tokens);
            for t in config.order - 1..padded.len() {
                for len in 0..config.order {
                    model.add_count(head, padded[t - len..t].to_vec(), padded[t], 1);
                }
            }
        }
    }
    Ok(model)
}

impl Scorer for NGramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn conditional_logprobs(
        &self,
        prefix: &[TokenId],
        conditioning: &Conditioning,
    ) -> Result<LogProbVector, ScorerError> {
        check_prefix(prefix, &self.vocab)?;
        match conditioning.resolve_class() {
            ClassRef::Unconditional => Ok(self.lookup(Head::Uncond, prefix)),
            ClassRef::Class(c) if self.classes.contains(&c) => Ok(self.lookup(Head::Class(c), prefix)),
            ClassRef::Class(c) => Err(ScorerError::UnknownClass(c)),
            ClassRef::Unresolved => Err(ScorerError::UnresolvedConditioning),
        }
    }

    fn unconditional_logprobs(&self, prefix: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        check_prefix(prefix, &self.vocab)?;
        Ok(self.lookup(Head::Uncond, prefix))
    }
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn lm_logprobs(&self, context: &[TokenId]) -> Result<LogProbVector, ScorerError> {
        self.unconditional_logprobs(&caption_prefix_of_context(context, &self.vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusItem;

    fn corpus(rows: &[(u32, &str)]) -> Corpus {
        Corpus::new(
            rows.iter()
                .enumerate()
                .map(|(i, (c, text))| CorpusItem {
                    id: format!("i{i}"),
                    conditioning: Conditioning::for_class(*c, 2),
                    references: vec![text.to_string()],
                })
                .collect(),
        )
        .unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::with_words(["a", "dog", "cat"])
    }

    fn cfg(order: usize, mask_prob: f64, smoothing: f64) -> NGramConfig {
        NGramConfig { order, mask_prob, smoothing, seed: 11 }
    }

    #[test]
    fn pooled_laplace_bigram_matches_hand_count() {
        let v = vocab();
        let m = train_ngram(&corpus(&[(0, "a dog"), (1, "a cat")]), &v, &cfg(2, 0.0, 1.0)).unwrap();
        let a = v.id("a").unwrap();
        let dog = v.id("dog").unwrap();
        let lp = m.unconditional_logprobs(&[v.bos_id(), a]).unwrap();
        let expected = (2.0 / (2.0 + v.size() as f64)).ln();
        assert!((lp.get(dog) - expected).abs() < 1e-12);
        assert_eq!(m.count(Head::Uncond, &[a], dog), 0);
        assert_eq!(m.count(Head::Class(0), &[a], dog), 1);
    }

    #[test]
    fn tiny_smoothing_recovers_the_training_bigram() {
        let v = vocab();
        let m = train_ngram(&corpus(&[(0, "a dog")]), &v, &cfg(2, 0.0, 1e-9)).unwrap();
        let a = v.id("a").unwrap();
        let lp = m.conditional_logprobs(&[v.bos_id(), a], &Conditioning::for_class(0, 2)).unwrap();
        assert_eq!(lp.argmax(), v.id("dog"));
    }

    #[test]
    fn full_masking_makes_heads_identical() {
        let v = vocab();
        let m = train_ngram(&corpus(&[(0, "a dog"), (1, "a cat"), (0, "a dog")]), &v, &cfg(2, 1.0, 0.1)).unwrap();
        let a = v.id("a").unwrap();
        for prefix in [vec![v.bos_id()], vec![v.bos_id(), a]] {
            let u = m.unconditional_logprobs(&prefix).unwrap();
            for class in [0, 1] {
                assert_eq!(m.conditional_logprobs(&prefix, &Conditioning::for_class(class, 2)).unwrap(), u);
            }
        }
    }

    #[test]
    fn heads_are_normalized() {
        let v = vocab();
        let m = train_ngram(&corpus(&[(0, "a dog"), (1, "a cat"), (1, "cat")]), &v, &cfg(3, 0.5, 0.1)).unwrap();
        let prefixes = [vec![0], vec![0, 3], vec![0, 3, 4], vec![0, 5, 5, 5]];
        for p in &prefixes {
            assert!(m.unconditional_logprobs(p).unwrap().logsumexp().abs() < 1e-9);
            for c in [0, 1] {
                assert!(m.conditional_logprobs(p, &Conditioning::for_class(c, 2)).unwrap().logsumexp().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let v = vocab();
        let c = corpus(&[(0, "a dog")]);
        assert!(train_ngram(&c, &v, &cfg(0, 0.0, 0.1)).is_err());
        assert!(train_ngram(&c, &v, &cfg(2, 0.0, 0.0)).is_err());
        assert!(train_ngram(&Corpus::default(), &v, &cfg(2, 0.0, 0.1)).is_err());
    }

    #[test]
    fn training_is_deterministic_and_serializes() {
        let v = vocab();
        let c = corpus(&[(0, "a dog"), (1, "a cat"), (0, "dog"), (1, "a a cat")]);
        let m1 = train_ngram(&c, &v, &cfg(3, 0.5, 0.1)).unwrap();
        let m2 = train_ngram(&c, &v, &cfg(3, 0.5, 0.1)).unwrap();
        assert_eq!(m1, m2);
        let back: NGramModel = serde_json::from_str(&m1.to_json()).unwrap();
        assert_eq!(back, m1);
    }

    #[test]
    fn unknown_class_is_an_error() {
        let v = vocab();
        let m = train_ngram(&corpus(&[(0, "a dog")]), &v, &cfg(2, 0.0, 0.1)).unwrap();
        assert!(matches!(
            m.conditional_logprobs(&[0], &Conditioning::for_class(7, 8)),
            Err(ScorerError::UnknownClass(7))
        ));
    }
}
