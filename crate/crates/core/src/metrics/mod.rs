//! Caption evaluation: reference-based scores, embedding-space scores,
//! retrieval recall and caption statistics.

mod embed;
mod reference;
mod stats;

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use embed::{
    embed_score, recall_at_k, ref_combined_score, ref_only_score, synthetic_embed, Embedder, EmbeddingVector,
    SyntheticEmbedder, SYNTHETIC_DIM,
};
pub use reference::{bleu4, cider, cider_per_item, rouge_l, ROUGE_L_BETA};
pub use stats::{length_stats, mention_rate, mentioned_phrases, LengthStats, MeanSd, MentionStats};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{candidates} candidates but {references} reference entries")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("item {0} has no references")]
    NoReferences(usize),
    #[error("embedding is not unit length (norm {0})")]
    NotUnit(f64),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("score must be non-negative, got {0}")]
    Negative(f64),
    #[error("recall@{k} needs 1 <= k <= {n}")]
    InvalidK { k: usize, n: usize },
    #[error("input list is empty")]
    Empty,
}

static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").expect("static regex"));

/// Lowercases, drops Unicode punctuation and splits on whitespace.
pub fn tokenize_for_metrics(text: &str) -> Vec<String> {
    PUNCTUATION.replace_all(&text.to_lowercase(), "").split_whitespace().map(str::to_owned).collect()
}

/// Recall cut-offs reported in [`EvalReport`].
pub const REPORT_KS: [usize; 3] = [1, 5, 10];

pub const CSV_COLUMNS: [&str; 16] = [
    "label",
    "bleu4",
    "rouge_l",
    "cider",
    "embed_score",
    "ref_only",
    "ref_combined",
    "r@1",
    "r@5",
    "r@10",
    "words_mean",
    "words_sd",
    "chars_mean",
    "chars_sd",
    "mention_rate",
    "mention_precision",
];

/// All metric values for one decoding configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub embed_score: f64,
    pub ref_only: f64,
    pub ref_combined: f64,
    /// Only cut-offs not exceeding the corpus size are present.
    pub recall: BTreeMap<usize, f64>,
    pub length: LengthStats,
    pub mention_rate: Option<f64>,
    pub mention_precision: Option<f64>,
}

impl EvalReport {
    pub fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = vec![
            self.label.clone(),
            self.bleu4.to_string(),
            self.rouge_l.to_string(),
            self.cider.to_string(),
            self.embed_score.to_string(),
            self.ref_only.to_string(),
            self.ref_combined.to_string(),
        ];
        row.extend(REPORT_KS.iter().map(|k| opt(self.recall.get(k).copied())));
        row.extend([
            self.length.words.mean.to_string(),
            self.length.words.sd.to_string(),
            self.length.chars.mean.to_string(),
            self.length.chars.sd.to_string(),
            opt(self.mention_rate),
            opt(self.mention_precision),
        ]);
        row
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Writes reports as CSV with the fixed header.
pub fn write_csv<W: std::io::Write>(out: W, reports: &[EvalReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// Everything [`evaluate`] needs, positionally aligned by item.
pub struct EvalInput<'a> {
    pub label: &'a str,
    pub candidates: &'a [String],
    pub references: &'a [Vec<String>],
    /// Ground-truth image embedding per item.
    pub images: &'a [EmbeddingVector],
    pub embedder: &'a dyn Embedder,
    /// Recall cut-offs; those above the corpus size are skipped.
    pub ks: &'a [usize],
    pub phrases: Option<&'a [String]>,
    /// Correct phrase per item, for mention precision.
    pub truth: Option<&'a [String]>,
}

pub fn evaluate(input: &EvalInput<'_>) -> Result<EvalReport, MetricsError> {
    let n = input.candidates.len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    if input.images.len() != n {
        return Err(MetricsError::LengthMismatch { candidates: n, references: input.images.len() });
    }
    let bleu4 = bleu4(input.candidates, input.references)?;
    let rouge_l = rouge_l(input.candidates, input.references)?;
    let cider = cider(input.candidates, input.references)?;

    let caption_embs: Vec<EmbeddingVector> = input.candidates.iter().map(|c| input.embedder.embed(c)).collect();
    let mut embed_scores = Vec::with_capacity(n);
    let mut ref_only = Vec::with_capacity(n);
    let mut combined = Vec::with_capacity(n);
    for ((c, img), refs) in caption_embs.iter().zip(input.images).zip(input.references) {
        let e = embed_score(c, img)?;
        let ref_embs: Vec<EmbeddingVector> = refs.iter().map(|r| input.embedder.embed(r)).collect();
        let r = ref_only_score(c, &ref_embs)?;
        embed_scores.push(e);
        ref_only.push(r);
        combined.push(ref_combined_score(e, r)?);
    }
    let mean = |v: &[f64]| crate::numeric::sum(v.iter().copied()) / v.len() as f64;

    let ks: Vec<usize> = input.ks.iter().copied().filter(|&k| k <= n).collect();
    let recall = recall_at_k(&caption_embs, input.images, &ks)?.into_iter().collect();

    let (mention_rate, mention_precision) = match input.phrases {
        Some(p) => {
            let m = stats::mention_rate(input.candidates, p, input.truth)?;
            (Some(m.rate), m.precision)
        }
        None => (None, None),
    };

    Ok(EvalReport {
        label: input.label.to_owned(),
        bleu4,
        rouge_l,
        cider,
        embed_score: mean(&embed_scores),
        ref_only: mean(&ref_only),
        ref_combined: mean(&combined),
        recall,
        length: length_stats(input.candidates)?,
        mention_rate,
        mention_precision,
    })
}
