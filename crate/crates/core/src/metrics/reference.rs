//! Reference-based caption metrics: corpus BLEU-4, ROUGE-L and CIDEr.

use std::collections::{HashMap, HashSet};

use super::{tokenize_for_metrics, MetricsError};

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_shapes(candidates: &[String], references: &[Vec<String>]) -> Result<(), MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(MetricsError::NoReferences(i));
    }
    Ok(())
}

fn tokenize_all(references: &[Vec<String>]) -> Vec<Vec<Vec<String>>> {
    references.iter().map(|refs| refs.iter().map(|r| tokenize_for_metrics(r)).collect()).collect()
}

/// Corpus-level BLEU with uniform weights over 1- to 4-grams, clipped counts,
/// closest-reference brevity penalty and no smoothing.
pub fn bleu4(candidates: &[String], references: &[Vec<String>]) -> Result<f64, MetricsError> {
    check_shapes(candidates, references)?;
    let refs = tokenize_all(references);
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, item_refs) in candidates.iter().zip(&refs) {
        let cand = tokenize_for_metrics(cand);
        cand_len += cand.len();
        // closest reference length, shorter on ties
        ref_len +=
            item_refs.iter().map(Vec::len).min_by_key(|&l| (l.abs_diff(cand.len()), l)).expect("non-empty references");
        for n in 1..=4 {
            let counts = ngram_counts(&cand, n);
            let mut max_ref: HashMap<Ngram<'_>, usize> = HashMap::new();
            for r in item_refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / 4.0;
    let brevity = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(brevity * log_precision.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure weighting recall by `ROUGE_L_BETA²`.
pub const ROUGE_L_BETA: f64 = 1.2;

pub(crate) fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over items of the best LCS F-measure against any reference.
pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> Result<f64, MetricsError> {
    check_shapes(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let refs = tokenize_all(references);
    let scores: Vec<f64> = candidates
        .iter()
        .zip(&refs)
        .map(|(c, rs)| {
            let c = tokenize_for_metrics(c);
            rs.iter().map(|r| rouge_l_pair(&c, r)).fold(0.0, f64::max)
        })
        .collect();
    Ok(crate::numeric::sum(scores.iter().copied()) / scores.len() as f64)
}

/// Per-item CIDEr values (already scaled by 10) for a corpus whose reference
/// sets define the document frequencies.
pub fn cider_per_item(candidates: &[String], references: &[Vec<String>]) -> Result<Vec<f64>, MetricsError> {
    check_shapes(candidates, references)?;
    let refs = tokenize_all(references);
    let documents = refs.len() as f64;
    let mut df: [HashMap<Vec<String>, usize>; 4] = Default::default();
    for item_refs in &refs {
        for n in 1..=4 {
            let grams: HashSet<&[String]> = item_refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in grams {
                *df[n - 1].entry(g.to_vec()).or_insert(0) += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(candidates.len());
    for (cand, item_refs) in candidates.iter().zip(&refs) {
        let cand = tokenize_for_metrics(cand);
        let mut per_n = [0.0f64; 4];
        for n in 1..=4 {
            let weigh = |counts: &HashMap<Ngram<'_>, usize>| -> HashMap<Vec<String>, (f64, f64)> {
                counts
                    .iter()
                    .map(|(g, &c)| {
                        let d = df[n - 1].get(*g).copied().unwrap_or(0).max(1) as f64;
                        (g.to_vec(), (c as f64 * (documents / d).ln(), c as f64))
                    })
                    .collect()
            };
            let cv = weigh(&ngram_counts(&cand, n));
            let sims: Vec<f64> = item_refs.iter().map(|r| tfidf_cosine(&cv, &weigh(&ngram_counts(r, n)))).collect();
            per_n[n - 1] = crate::numeric::sum(sims.iter().copied()) / sims.len() as f64;
        }
        out.push(10.0 * crate::numeric::sum(per_n) / 4.0);
    }
    Ok(out)
}

/// Cosine of tf-idf vectors; when every weight on both sides is zero the
/// idf carries no information and raw term frequencies are compared instead.
fn tfidf_cosine(a: &HashMap<Vec<String>, (f64, f64)>, b: &HashMap<Vec<String>, (f64, f64)>) -> f64 {
    let cosine = |pick: fn(&(f64, f64)) -> f64| -> Option<f64> {
        let na = a.values().map(|v| pick(v).powi(2)).sum::<f64>().sqrt();
        let nb = b.values().map(|v| pick(v).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return None;
        }
        let mut keys: Vec<&Vec<String>> = a.keys().filter(|k| b.contains_key(*k)).collect();
        keys.sort();
        let dot = crate::numeric::sum(keys.iter().map(|k| pick(&a[*k]) * pick(&b[*k])));
        Some((dot / (na * nb)).clamp(0.0, 1.0))
    };
    let weights_vanish = a.values().all(|v| v.0 == 0.0) && b.values().all(|v| v.0 == 0.0);
    if weights_vanish {
        cosine(|v| v.1).unwrap_or(0.0)
    } else {
        cosine(|v| v.0).unwrap_or(0.0)
    }
}

/// Plain CIDEr (no length penalty, no clipping): mean over items of the
/// mean over n = 1..4 of the average tf-idf cosine to each reference, × 10.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<f64, MetricsError> {
    let per_item = cider_per_item(candidates, references)?;
    if per_item.is_empty() {
        return Ok(0.0);
    }
    Ok(crate::numeric::sum(per_item.iter().copied()) / per_item.len() as f64)
}
