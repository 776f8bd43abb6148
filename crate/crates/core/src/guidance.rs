//! Logit fusion rules.
//!
//! Classifier-free guidance scores a token as `u + γ(c − u)` and
//! language-model guidance as `l + αc − βu`, both on normalized
//! log-probabilities. The per-step softmax is omitted because greedy and beam
//! selection only look at the ordering of scores.
//!
//! Both rules share one kernel, `(base − β·u) + α·c`, with classifier-free
//! guidance being the case `base = u`, `α = β = γ`. Infinite entries follow
//! extended-real arithmetic: a head with coefficient zero is ignored, a token
//! that both captioner heads rule out scores `−∞`, and opposite infinities
//! are an error.

use crate::corpus::TokenId;
use crate::numeric;
use crate::scorer::LogProbVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GuidanceError {
    #[error("guidance parameter {name}={value} is not finite")]
    NonFinite { name: &'static str, value: f64 },
    #[error("score vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("token {0} has an undefined fused score (opposite infinities)")]
    Undefined(usize),
    #[error("token id {id} out of range for {size} scores")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("eos and newline ids must differ")]
    SameIds,
    #[error("prompt contains a BOS or EOS token")]
    PromptReservedToken,
}

/// Which fusion rule the decoder applies.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceSpec {
    /// Conditional head only.
    None,
    /// Classifier-free guidance with scale `gamma`.
    Cfg { gamma: f64 },
    /// Language-model guidance; the LM sees `prompt` followed by the caption
    /// generated so far.
    Lm { alpha: f64, beta: f64, prompt: Vec<TokenId> },
}

impl GuidanceSpec {
    pub fn validate(&self, bos_id: TokenId, eos_id: TokenId) -> Result<(), GuidanceError> {
        match self {
            GuidanceSpec::None => Ok(()),
            GuidanceSpec::Cfg { gamma } => finite("gamma", *gamma),
            GuidanceSpec::Lm { alpha, beta, prompt } => {
                finite("alpha", *alpha)?;
                finite("beta", *beta)?;
                if prompt.iter().any(|&t| t == bos_id || t == eos_id) {
                    return Err(GuidanceError::PromptReservedToken);
                }
                Ok(())
            }
        }
    }

    /// Short label used in reports, e.g. `cfg(2)` or `lm(5,-2.5)`.
    pub fn label(&self) -> String {
        match self {
            GuidanceSpec::None => "none".into(),
            GuidanceSpec::Cfg { gamma } => format!("cfg({gamma})"),
            GuidanceSpec::Lm { alpha, beta, .. } => format!("lm({alpha},{beta})"),
        }
    }
}

fn finite(name: &'static str, value: f64) -> Result<(), GuidanceError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(GuidanceError::NonFinite { name, value })
    }
}

/// Fused per-token scores. `−∞` and `+∞` are allowed, NaN is not.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GuidanceError> {
        match values.iter().position(|v| v.is_nan()) {
            Some(i) => Err(GuidanceError::Undefined(i)),
            None => Ok(Self(values)),
        }
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

    /// Highest-scoring token, ties to the lowest id; `None` if every entry is `−∞`.
    pub fn argmax(&self) -> Option<TokenId> {
        numeric::argmax(&self.0).map(|i| i as TokenId)
    }

    pub fn logsumexp(&self) -> f64 {
        numeric::logsumexp(&self.0)
    }
}

impl From<LogProbVector> for ScoreVector {
    fn from(v: LogProbVector) -> Self {
        ScoreVector(v.into_values())
    }
}

/// `(base − beta·uncond) + alpha·cond` for one token, where `base_is_uncond`
/// merges the base and unconditional coefficients.
fn fuse_entry(
    base: f64,
    cond: f64,
    uncond: f64,
    alpha: f64,
    beta: f64,
    base_is_uncond: bool,
    index: usize,
) -> Result<f64, GuidanceError> {
    let ninf = f64::NEG_INFINITY;
    if cond == ninf && uncond == ninf {
        return Ok(ninf);
    }
    if base.is_finite() && cond.is_finite() && uncond.is_finite() {
        return Ok((base - beta * uncond) + alpha * cond);
    }
    // Sum of the coefficients sitting on −∞ entries decides the sign.
    let terms: [(f64, f64); 3] = if base_is_uncond {
        [(1.0 - beta, uncond), (alpha, cond), (0.0, 0.0)]
    } else {
        [(1.0, base), (-beta, uncond), (alpha, cond)]
    };
    let mut pulls_down = false;
    let mut pulls_up = false;
    let mut finite_part = 0.0;
    for (coef, value) in terms {
        if coef == 0.0 {
            continue;
        }
        if value == ninf {
            if coef > 0.0 {
                pulls_down = true;
            } else {
                pulls_up = true;
            }
        } else {
            finite_part += coef * value;
        }
    }
    match (pulls_down, pulls_up) {
        (true, true) => Err(GuidanceError::Undefined(index)),
        (true, false) => Ok(ninf),
        (false, true) => Ok(f64::INFINITY),
        (false, false) => Ok(finite_part),
    }
}

fn check_len(a: usize, b: usize) -> Result<(), GuidanceError> {
    if a == b {
        Ok(())
    } else {
        Err(GuidanceError::LengthMismatch(a, b))
    }
}

/// Classifier-free guidance: `uncond + gamma·(cond − uncond)` per token.
pub fn cfg_fuse(cond: &LogProbVector, uncond: &LogProbVector, gamma: f64) -> Result<ScoreVector, GuidanceError> {
    finite("gamma", gamma)?;
    check_len(cond.len(), uncond.len())?;
    let values = cond
        .values()
        .iter()
        .zip(uncond.values())
        .enumerate()
        .map(|(i, (&c, &u))| fuse_entry(u, c, u, gamma, gamma, true, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScoreVector(values))
}

/// Language-model guidance: `lm + alpha·cond − beta·uncond` per token.
pub fn lm_fuse(
    lm: &LogProbVector,
    cond: &LogProbVector,
    uncond: &LogProbVector,
    alpha: f64,
    beta: f64,
) -> Result<ScoreVector, GuidanceError> {
    finite("alpha", alpha)?;
    finite("beta", beta)?;
    check_len(lm.len(), cond.len())?;
    check_len(cond.len(), uncond.len())?;
    let values = (0..lm.len())
        .map(|i| fuse_entry(lm.values()[i], cond.values()[i], uncond.values()[i], alpha, beta, false, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScoreVector(values))
}

/// Moves the newline token's mass onto EOS: `eos ← logaddexp(eos, newline)`,
/// `newline ← −∞`.
pub fn transfer_newline_to_eos(
    scores: &ScoreVector,
    eos_id: TokenId,
    newline_id: TokenId,
) -> Result<ScoreVector, GuidanceError> {
    let size = scores.len();
    for id in [eos_id, newline_id] {
        if id as usize >= size {
            return Err(GuidanceError::IdOutOfRange { id, size });
        }
    }
    if eos_id == newline_id {
        return Err(GuidanceError::SameIds);
    }
    let mut values = scores.0.clone();
    values[eos_id as usize] = numeric::logaddexp(values[eos_id as usize], values[newline_id as usize]);
    values[newline_id as usize] = f64::NEG_INFINITY;
    Ok(ScoreVector(values))
}
