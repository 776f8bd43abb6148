#![allow(dead_code)]

use guidecap::corpus::{random_world, Corpus, CorpusItem, RandomWorldParams};
use guidecap::oracle::SequenceTable;
use guidecap::{Conditioning, Decoder, TabularWorld, TokenId};

/// Replay tolerance against exact recomputed scores.
pub const REPLAY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub enum Rule {
    Cfg(f64),
    /// Language-model guidance with the world marginal as the language model.
    LmMarginal(f64, f64),
}

pub fn small_world(seed: u64) -> TabularWorld {
    random_world(&small_params(), seed).expect("random world")
}

pub fn small_params() -> RandomWorldParams {
    RandomWorldParams { content_tokens: 5, l_max: 5, classes: 3, pool_size: 12, max_support: 6 }
}

/// One item per class, items referencing the class's most likely caption.
pub fn class_corpus(world: &TabularWorld) -> Corpus {
    let dim = world.classes.len();
    let items = world
        .class_ids()
        .map(|c| {
            let best = world.sequences[&c].iter().max_by(|a, b| a.p.total_cmp(&b.p)).expect("non-empty class");
            CorpusItem {
                id: format!("c{c}"),
                conditioning: Conditioning::for_class(c, dim),
                references: vec![world.vocab.decode(&best.tokens)],
            }
        })
        .collect();
    Corpus::new(items).expect("valid corpus")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a == f64::NEG_INFINITY && b == f64::NEG_INFINITY) || (a - b).abs() <= tol
}

/// Checks every step of `tokens`: the engine's fused scores match the exact
/// recomputation from the table, and the emitted token is its argmax.
/// Returns the number of steps checked.
pub fn replay(
    table: &SequenceTable,
    decoder: &Decoder<'_>,
    class: u32,
    conditioning: &Conditioning,
    tokens: &[TokenId],
    rule: Rule,
) -> Result<usize, String> {
    for step in 0..tokens.len() {
        let prefix = &tokens[..step];
        let exact = match rule {
            Rule::Cfg(g) => table.fused_step_cfg(prefix, class, g),
            Rule::LmMarginal(a, b) => table.fused_step_lm_marginal(prefix, class, a, b),
        }
        .map_err(|e| e.to_string())?;
        let engine = decoder.step_scores(prefix, conditioning).map_err(|e| e.to_string())?;
        for (i, (&x, &e)) in exact.iter().zip(engine.values()).enumerate() {
            if !close(x, e, REPLAY_TOL) {
                return Err(format!("step {step} token {i}: exact {x} vs engine {e}"));
            }
        }
        let top = exact.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let chosen = exact[tokens[step] as usize];
        if chosen.is_nan() || chosen < top - REPLAY_TOL {
            return Err(format!("step {step}: emitted token scores {chosen}, best is {top}"));
        }
    }
    Ok(tokens.len())
}
