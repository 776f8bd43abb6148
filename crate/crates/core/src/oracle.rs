//! Brute-force ground truth over tabular worlds.
//!
//! Everything here is computed directly from the enumerated support of a
//! world, independently of the prefix tables used by the tabular scorer, so
//! it can serve as a reference for the decoding engine.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, RandomWorldParams, TabularWorld, TokenId};
use crate::numeric::{approx_tie, logaddexp, logsumexp};

/// Largest support [`enumerate_sequences`] accepts.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("support has {count} sequences, above the enumeration limit of {ENUMERATION_LIMIT}")]
    TooLarge { count: usize },
    #[error("sequence {tokens:?} is longer than the length cap {l_max}")]
    TooLong { tokens: Vec<TokenId>, l_max: usize },
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("guidance scales must be sorted ascending")]
    UnsortedGammas,
    #[error("world is inconsistent: {0}")]
    Inconsistent(String),
    #[error("monotonicity violated between gamma {from} and {to}: {detail}")]
    NotMonotone { from: f64, to: f64, detail: String },
}

/// One supported sequence with its exact log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub tokens: Vec<TokenId>,
    /// `log p(x|y)` per class, in the table's class order; `-inf` outside a
    /// class's support.
    pub log_cond: Vec<f64>,
    pub log_marginal: f64,
}

/// The enumerated support of a world, sorted by token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTable {
    pub classes: Vec<u32>,
    pub log_prior: Vec<f64>,
    pub entries: Vec<SequenceEntry>,
    pub eos_id: TokenId,
    pub newline_id: TokenId,
    pub vocab_size: usize,
}

/// Lists every supported sequence with log-space probabilities. Marginals
/// are log-sum-exps of `log p(y) + log p(x|y)`.
pub fn enumerate_sequences(world: &TabularWorld, l_max: usize) -> Result<SequenceTable, OracleError> {
    let count = world.support_size();
    if count > ENUMERATION_LIMIT {
        return Err(OracleError::TooLarge { count });
    }
    let classes: Vec<u32> = world.class_ids().collect();
    let log_prior: Vec<f64> = world.classes.iter().map(|c| c.prior.ln()).collect();
    let mut rows: std::collections::BTreeMap<Vec<TokenId>, Vec<f64>> = Default::default();
    for (ci, &class) in classes.iter().enumerate() {
        for seq in world.sequences.get(&class).map(Vec::as_slice).unwrap_or(&[]) {
            if seq.tokens.len() > l_max {
                return Err(OracleError::TooLong { tokens: seq.tokens.clone(), l_max });
            }
            if seq.p > 0.0 {
                rows.entry(seq.tokens.clone()).or_insert_with(|| vec![f64::NEG_INFINITY; classes.len()])[ci] =
                    seq.p.ln();
            }
        }
    }
    let entries = rows
        .into_iter()
        .map(|(tokens, log_cond)| {
            let joint: Vec<f64> = log_cond.iter().zip(&log_prior).map(|(c, p)| c + p).collect();
            SequenceEntry { tokens, log_marginal: logsumexp(&joint), log_cond }
        })
        .collect();
    Ok(SequenceTable {
        classes,
        log_prior,
        entries,
        eos_id: world.vocab.eos_id(),
        newline_id: world.vocab.newline_id(),
        vocab_size: world.vocab.size(),
    })
}

/// Which distribution of the world to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableHead {
    Class(u32),
    Marginal,
}

/// A maximizer and the values the tie rule looked at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Maximizer {
    pub tokens: Vec<TokenId>,
    pub objective: f64,
    pub log_cond: f64,
    pub pmi: f64,
    /// Number of sequences whose objective tied with the maximum.
    pub tied: usize,
}

impl SequenceTable {
    pub fn class_index(&self, class: u32) -> Result<usize, OracleError> {
        self.classes.iter().position(|&c| c == class).ok_or(OracleError::UnknownClass(class))
    }

    pub fn find(&self, tokens: &[TokenId]) -> Option<&SequenceEntry> {
        self.entries.binary_search_by(|e| e.tokens.as_slice().cmp(tokens)).ok().map(|i| &self.entries[i])
    }

    fn head_log(&self, entry: &SequenceEntry, head: TableHead) -> Result<f64, OracleError> {
        Ok(match head {
            TableHead::Class(c) => entry.log_cond[self.class_index(c)?],
            TableHead::Marginal => entry.log_marginal,
        })
    }

    /// Exact next-token log-probabilities after the BOS-free `generated`
    /// prefix, by summing the mass of every extending sequence.
    pub fn next_token_logprobs(&self, generated: &[TokenId], head: TableHead) -> Result<Vec<f64>, OracleError> {
        let mut per_token: Vec<Vec<f64>> = vec![Vec::new(); self.vocab_size];
        let mut all = Vec::new();
        for e in &self.entries {
            if e.tokens.len() > generated.len() && e.tokens.starts_with(generated) {
                let w = self.head_log(e, head)?;
                if w > f64::NEG_INFINITY {
                    per_token[e.tokens[generated.len()] as usize].push(w);
                    all.push(w);
                }
            }
        }
        let total = logsumexp(&all);
        Ok(per_token
            .iter()
            .map(
                |ws| {
                    if ws.is_empty() || total == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else {
                        logsumexp(ws) - total
                    }
                },
            )
            .collect())
    }

    /// Exact per-step guided scores `u + γ(c − u)`.
    pub fn fused_step_cfg(&self, generated: &[TokenId], class: u32, gamma: f64) -> Result<Vec<f64>, OracleError> {
        let c = self.next_token_logprobs(generated, TableHead::Class(class))?;
        let u = self.next_token_logprobs(generated, TableHead::Marginal)?;
        Ok(c.iter().zip(&u).map(|(&c, &u)| if c == f64::NEG_INFINITY { c } else { u + gamma * (c - u) }).collect())
    }

    /// Exact per-step scores `q + αc − βu` with the marginal as `q`,
    /// followed by moving newline mass onto EOS.
    pub fn fused_step_lm_marginal(
        &self,
        generated: &[TokenId],
        class: u32,
        alpha: f64,
        beta: f64,
    ) -> Result<Vec<f64>, OracleError> {
        let c = self.next_token_logprobs(generated, TableHead::Class(class))?;
        let u = self.next_token_logprobs(generated, TableHead::Marginal)?;
        let mut v: Vec<f64> = c
            .iter()
            .zip(&u)
            .map(|(&c, &u)| if c == f64::NEG_INFINITY { c } else { u + alpha * c - beta * u })
            .collect();
        let (eos, nl) = (self.eos_id as usize, self.newline_id as usize);
        v[eos] = logaddexp(v[eos], v[nl]);
        v[nl] = f64::NEG_INFINITY;
        Ok(v)
    }

    /// `log p(x) + γ(log p(x|y) − log p(x))` for every sequence of `class`.
    pub fn cfg_objective(&self, entry: &SequenceEntry, class_index: usize, gamma: f64) -> f64 {
        let (c, u) = (entry.log_cond[class_index], entry.log_marginal);
        if c == f64::NEG_INFINITY {
            return c;
        }
        (u - gamma * u) + gamma * c
    }

    fn argmax_by(
        &self,
        class: u32,
        objective: impl Fn(&SequenceEntry, usize) -> f64,
    ) -> Result<Maximizer, OracleError> {
        let ci = self.class_index(class)?;
        let scored: Vec<(f64, f64, &SequenceEntry)> = self
            .entries
            .iter()
            .filter(|e| e.log_cond[ci] > f64::NEG_INFINITY)
            .map(|e| (objective(e, ci), e.log_cond[ci] - e.log_marginal, e))
            .filter(|(o, _, _)| *o > f64::NEG_INFINITY)
            .collect();
        let top = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<&(f64, f64, &SequenceEntry)> = scored.iter().filter(|s| approx_tie(s.0, top)).collect();
        let best = tied
            .iter()
            .copied()
            .min_by(|a, b| match (approx_tie(a.1, b.1), a.1.partial_cmp(&b.1)) {
                (false, Some(Ordering::Greater)) => Ordering::Less,
                (false, Some(Ordering::Less)) => Ordering::Greater,
                _ => a.2.tokens.cmp(&b.2.tokens),
            })
            .ok_or_else(|| OracleError::Inconsistent(format!("class {class} has no supported sequence")))?;
        Ok(Maximizer {
            tokens: best.2.tokens.clone(),
            objective: best.0,
            log_cond: best.2.log_cond[ci],
            pmi: best.1,
            tied: tied.len(),
        })
    }

    /// Global maximizer of the guided objective; ties go to the larger pmi,
    /// then to the lexicographically smaller sequence.
    pub fn argmax_cfg(&self, class: u32, gamma: f64) -> Result<Maximizer, OracleError> {
        self.argmax_by(class, |e, ci| self.cfg_objective(e, ci, gamma))
    }

    /// Global maximizer of `log q(x) + α log p(x|y) − β log p(x)` under the
    /// same tie rule.
    pub fn argmax_lm(
        &self,
        class: u32,
        q: &dyn Fn(&[TokenId]) -> f64,
        alpha: f64,
        beta: f64,
    ) -> Result<Maximizer, OracleError> {
        self.argmax_by(class, |e, ci| {
            let c = e.log_cond[ci];
            if c == f64::NEG_INFINITY {
                return c;
            }
            (q(&e.tokens) - beta * e.log_marginal) + alpha * c
        })
    }

    /// `log p(x|y) − log p(x)`, or `-inf` when `x` is outside the support of `y`.
    pub fn pmi(&self, tokens: &[TokenId], class: u32) -> Result<f64, OracleError> {
        let ci = self.class_index(class)?;
        Ok(match self.find(tokens) {
            Some(e) if e.log_cond[ci] > f64::NEG_INFINITY => e.log_cond[ci] - e.log_marginal,
            _ => f64::NEG_INFINITY,
        })
    }

    /// `k log p(x, y) − log p(x) − log p(y)` with the same support convention.
    pub fn pmi_k(&self, tokens: &[TokenId], class: u32, k: f64) -> Result<f64, OracleError> {
        let ci = self.class_index(class)?;
        Ok(match self.find(tokens) {
            Some(e) if e.log_cond[ci] > f64::NEG_INFINITY => {
                let log_joint = self.log_prior[ci] + e.log_cond[ci];
                k * log_joint - e.log_marginal - self.log_prior[ci]
            }
            _ => f64::NEG_INFINITY,
        })
    }
}

pub fn brute_force_argmax_cfg(table: &SequenceTable, class: u32, gamma: f64) -> Result<Maximizer, OracleError> {
    table.argmax_cfg(class, gamma)
}

pub fn brute_force_argmax_lm(
    table: &SequenceTable,
    class: u32,
    q: &dyn Fn(&[TokenId]) -> f64,
    alpha: f64,
    beta: f64,
) -> Result<Maximizer, OracleError> {
    table.argmax_lm(class, q, alpha, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub gamma: f64,
    pub tokens: Vec<TokenId>,
    pub log_cond: f64,
    pub pmi: f64,
}

pub fn pareto_curve(table: &SequenceTable, class: u32, gammas: &[f64]) -> Result<Vec<ParetoPoint>, OracleError> {
    if gammas.windows(2).any(|w| w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_gt())) {
        return Err(OracleError::UnsortedGammas);
    }
    gammas
        .iter()
        .map(|&gamma| {
            let m = table.argmax_cfg(class, gamma)?;
            Ok(ParetoPoint { gamma, tokens: m.tokens, log_cond: m.log_cond, pmi: m.pmi })
        })
        .collect()
}

/// Slack for comparing values recomputed through different float paths.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Checks that pmi never falls and `log p(x*|y)` never rises along the curve.
pub fn check_monotone(curve: &[ParetoPoint]) -> Result<(), OracleError> {
    for w in curve.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.pmi < a.pmi - MONOTONE_SLACK {
            return Err(OracleError::NotMonotone {
                from: a.gamma,
                to: b.gamma,
                detail: format!("pmi fell from {} to {}", a.pmi, b.pmi),
            });
        }
        if b.log_cond > a.log_cond + MONOTONE_SLACK {
            return Err(OracleError::NotMonotone {
                from: a.gamma,
                to: b.gamma,
                detail: format!("log p(x|y) rose from {} to {}", a.log_cond, b.log_cond),
            });
        }
    }
    Ok(())
}

/// Minimum gap between the best and second-best exact step score on a
/// dominant path, so float noise cannot reorder them.
pub const DOMINANCE_MARGIN: f64 = 1e-6;

/// Whether greedy guided decoding of `class` is provably safe at `gamma`:
/// along the path of exact per-step argmaxes, each chosen continuation
/// carries more than half of the remaining guided mass, wins by at least
/// [`DOMINANCE_MARGIN`], and the path ends at the global maximizer.
pub fn is_dominant_path(table: &SequenceTable, class: u32, gamma: f64) -> Result<bool, OracleError> {
    let ci = table.class_index(class)?;
    let target = table.argmax_cfg(class, gamma)?;
    let mut path: Vec<TokenId> = Vec::new();
    loop {
        let scores = table.fused_step_cfg(&path, class, gamma)?;
        let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > f64::NEG_INFINITY).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let Some(&best) = order.first() else { return Ok(false) };
        if let Some(&second) = order.get(1) {
            if scores[best] - scores[second] < DOMINANCE_MARGIN {
                return Ok(false);
            }
        }
        let mass = |prefix: &[TokenId]| -> Vec<f64> {
            table
                .entries
                .iter()
                .filter(|e| e.tokens.starts_with(prefix))
                .map(|e| table.cfg_objective(e, ci, gamma))
                .collect()
        };
        let remaining = logsumexp(&mass(&path));
        path.push(best as TokenId);
        if logsumexp(&mass(&path)) - remaining <= 0.5f64.ln() {
            return Ok(false);
        }
        if best as TokenId == table.eos_id {
            return Ok(path == target.tokens);
        }
        if path.len() > target.tokens.len().max(64) {
            return Ok(false);
        }
    }
}

/// Draws random worlds until every class is dominant-path at every scale
/// in `gammas`. Returns the world and the seed that produced it.
pub fn sample_dominant_path_world(
    params: &RandomWorldParams,
    seed: u64,
    gammas: &[f64],
    max_attempts: usize,
) -> Result<Option<(TabularWorld, u64)>, OracleError> {
    for attempt in 0..max_attempts as u64 {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(attempt);
        let world = corpus::random_world(params, s).map_err(|e| OracleError::Inconsistent(e.to_string()))?;
        let table = enumerate_sequences(&world, params.l_max)?;
        let mut ok = true;
        'outer: for &class in &table.classes {
            for &g in gammas {
                if !is_dominant_path(&table, class, g)? {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            return Ok(Some((world, s)));
        }
    }
    Ok(None)
}

/// Serializable oracle run for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDump {
    pub class: u32,
    pub curve: Vec<ParetoPoint>,
    pub captions: Vec<String>,
    pub monotone: bool,
}

pub fn oracle_dump(world: &TabularWorld, class: u32, gammas: &[f64]) -> Result<OracleDump, OracleError> {
    let l_max = world.sequences.values().flatten().map(|s| s.tokens.len()).max().unwrap_or(0);
    let table = enumerate_sequences(world, l_max)?;
    let curve = pareto_curve(&table, class, gammas)?;
    let captions = curve.iter().map(|p| world.vocab.decode(&p.tokens)).collect();
    let monotone = check_monotone(&curve).is_ok();
    Ok(OracleDump { class, curve, captions, monotone })
}
