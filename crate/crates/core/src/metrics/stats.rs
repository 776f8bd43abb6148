//! Caption length and mention statistics.

use serde::{Deserialize, Serialize};

use super::{tokenize_for_metrics, MetricsError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = crate::numeric::sum(values.iter().copied()) / n;
        let var = crate::numeric::sum(values.iter().map(|v| (v - mean).powi(2))) / n;
        Some(Self { mean, sd: var.sqrt() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub words: MeanSd,
    pub chars: MeanSd,
}

/// Word counts come from the metric tokenizer; characters are Unicode
/// scalar values of the raw string.
pub fn length_stats(captions: &[String]) -> Result<LengthStats, MetricsError> {
    let words: Vec<f64> = captions.iter().map(|c| tokenize_for_metrics(c).len() as f64).collect();
    let chars: Vec<f64> = captions.iter().map(|c| c.chars().count() as f64).collect();
    match (MeanSd::of(&words), MeanSd::of(&chars)) {
        (Some(words), Some(chars)) => Ok(LengthStats { words, chars }),
        _ => Err(MetricsError::Empty),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MentionStats {
    pub rate: f64,
    /// `None` without truth labels or when no caption mentions a phrase.
    pub precision: Option<f64>,
}

/// Phrases found in `caption`, matched case-insensitively on whole tokens.
pub fn mentioned_phrases<'p>(caption: &str, phrases: &'p [String]) -> Vec<&'p str> {
    let tokens = tokenize_for_metrics(caption);
    phrases
        .iter()
        .filter(|p| {
            let needle = tokenize_for_metrics(p);
            !needle.is_empty() && tokens.windows(needle.len()).any(|w| w == needle.as_slice())
        })
        .map(String::as_str)
        .collect()
}

/// Fraction of captions naming any phrase, and among those the fraction that
/// name their own truth phrase.
pub fn mention_rate(
    captions: &[String],
    phrases: &[String],
    truth: Option<&[String]>,
) -> Result<MentionStats, MetricsError> {
    if phrases.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(t) = truth {
        if t.len() != captions.len() {
            return Err(MetricsError::LengthMismatch { candidates: captions.len(), references: t.len() });
        }
    }
    if captions.is_empty() {
        return Ok(MentionStats { rate: 0.0, precision: None });
    }
    let mut mentioning = 0usize;
    let mut correct = 0usize;
    for (i, c) in captions.iter().enumerate() {
        let found = mentioned_phrases(c, phrases);
        if found.is_empty() {
            continue;
        }
        mentioning += 1;
        if let Some(t) = truth {
            let want = tokenize_for_metrics(&t[i]);
            if found.iter().any(|f| tokenize_for_metrics(f) == want) {
                correct += 1;
            }
        }
    }
    let precision = match truth {
        Some(_) if mentioning > 0 => Some(correct as f64 / mentioning as f64),
        _ => None,
    };
    Ok(MentionStats { rate: mentioning as f64 / captions.len() as f64, precision })
}
