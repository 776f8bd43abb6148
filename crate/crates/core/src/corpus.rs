//! Caption corpora, vocabularies and exact tabular caption worlds.
//!
//! A [`TabularWorld`] is a finite joint distribution over (class, caption)
//! pairs. It is the ground truth the tabular scorer serves and the oracle
//! enumerates. [`make_synthetic_world`] builds worlds in which every class
//! shares a generic caption with its siblings and owns one or more specific
//! captions, so that guidance has something to trade off.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::tokenize_for_metrics;
use crate::numeric;

pub type TokenId = u32;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const NEWLINE_TOKEN: &str = "<nl>";

const PROB_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate corpus id {0:?}")]
    DuplicateId(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid conditioning: {0}")]
    Conditioning(String),
    #[error("invalid world: {0}")]
    World(String),
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Token strings with dense ids and the three reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos_id: TokenId,
    eos_id: TokenId,
    newline_id: TokenId,
}

#[derive(Serialize, Deserialize)]
struct RawVocabulary {
    tokens: Vec<String>,
    bos_id: TokenId,
    eos_id: TokenId,
    newline_id: TokenId,
}

impl TryFrom<RawVocabulary> for Vocabulary {
    type Error = CorpusError;

    fn try_from(raw: RawVocabulary) -> Result<Self, Self::Error> {
        Vocabulary::new(raw.tokens, raw.bos_id, raw.eos_id, raw.newline_id)
    }
}

impl From<Vocabulary> for RawVocabulary {
    fn from(v: Vocabulary) -> Self {
        RawVocabulary { tokens: v.tokens, bos_id: v.bos_id, eos_id: v.eos_id, newline_id: v.newline_id }
    }
}

impl Vocabulary {
    pub fn new(
        tokens: Vec<String>,
        bos_id: TokenId,
        eos_id: TokenId,
        newline_id: TokenId,
    ) -> Result<Self, CorpusError> {
        let size = tokens.len();
        for (name, id) in [("bos_id", bos_id), ("eos_id", eos_id), ("newline_id", newline_id)] {
            if id as usize >= size {
                return Err(CorpusError::Vocabulary(format!("{name}={id} out of range for size {size}")));
            }
        }
        if bos_id == eos_id || bos_id == newline_id || eos_id == newline_id {
            return Err(CorpusError::Vocabulary("bos, eos and newline ids must be distinct".into()));
        }
        let mut index = HashMap::with_capacity(size);
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(CorpusError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index, bos_id, eos_id, newline_id })
    }

    /// Reserved tokens at ids 0, 1, 2 followed by `words` in order (duplicates skipped).
    pub fn with_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = vec![BOS_TOKEN.into(), EOS_TOKEN.into(), NEWLINE_TOKEN.into()];
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.into();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Vocabulary::new(tokens, 0, 1, 2).expect("reserved ids are valid")
    }

    /// Vocabulary covering the bundled prompt files and the built-in world
    /// word lists.
    pub fn demo() -> Self {
        let mut words: Vec<String> = Vec::new();
        for text in [crate::cli::prompts::DESCRIPTIVE, crate::cli::prompts::COUNTING] {
            for line in text.lines() {
                words.extend(tokenize_for_metrics(line));
            }
        }
        words.push("a".into());
        for (generic, names) in BUILTIN_GROUPS {
            words.push((*generic).into());
            words.extend(names.iter().map(|n| n.to_string()));
        }
        Vocabulary::with_words(words)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn newline_id(&self) -> TokenId {
        self.newline_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenizes with the metrics tokenizer and maps every word to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        tokenize_for_metrics(text).into_iter().map(|w| self.id(&w).ok_or(CorpusError::UnknownToken(w))).collect()
    }

    /// Encodes a caption and appends EOS.
    pub fn encode_caption(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        let mut ids = self.encode(text)?;
        ids.push(self.eos_id);
        Ok(ids)
    }

    /// Joins content tokens with spaces; BOS and EOS are dropped and the
    /// newline token becomes `\n`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut at_line_start = true;
        for &id in ids {
            if id == self.bos_id || id == self.eos_id {
                continue;
            }
            if id == self.newline_id {
                out.push('\n');
                at_line_start = true;
                continue;
            }
            if !at_line_start {
                out.push(' ');
            }
            match self.token(id) {
                Some(t) => out.push_str(t),
                None => out.push_str(&format!("<{id}>")),
            }
            at_line_start = false;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

/// The conditioning vector handed to a scorer. The all-zeros vector is the
/// unconditional sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    vector: Vec<f64>,
    class_id: Option<u32>,
}

/// What a class-indexed backend makes of a conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRef {
    Unconditional,
    Class(u32),
    /// Not a one-hot class indicator.
    Unresolved,
}

impl Conditioning {
    pub fn from_vector(vector: Vec<f64>) -> Result<Self, CorpusError> {
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::Conditioning(format!("entry {i} is not finite")));
        }
        Ok(Self { vector, class_id: None })
    }

    /// One-hot class indicator padded to `dim`.
    pub fn for_class(class_id: u32, dim: usize) -> Self {
        let dim = dim.max(class_id as usize + 1);
        let mut vector = vec![0.0; dim];
        vector[class_id as usize] = 1.0;
        Self { vector, class_id: Some(class_id) }
    }

    pub fn unconditional(dim: usize) -> Self {
        Self { vector: vec![0.0; dim], class_id: None }
    }

    pub fn zeros_like(&self) -> Self {
        Self::unconditional(self.vector.len())
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn class_id(&self) -> Option<u32> {
        self.class_id
    }

    pub fn is_unconditional(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }

    pub fn resolve_class(&self) -> ClassRef {
        if let Some(c) = self.class_id {
            return ClassRef::Class(c);
        }
        if self.is_unconditional() {
            return ClassRef::Unconditional;
        }
        let mut hot = None;
        for (i, &v) in self.vector.iter().enumerate() {
            if v == 1.0 && hot.is_none() {
                hot = Some(i as u32);
            } else if v != 0.0 {
                return ClassRef::Unresolved;
            }
        }
        hot.map_or(ClassRef::Unresolved, ClassRef::Class)
    }

    fn padded(&self, dim: usize) -> Self {
        match self.class_id {
            Some(c) => Self::for_class(c, dim),
            None => self.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawConditioning {
    Class { class: u32 },
    Vector { vector: Vec<f64> },
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub conditioning: Conditioning,
    pub references: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawItem {
    id: String,
    conditioning: RawConditioning,
    references: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    /// Validates ids and references and pads class indicators to a common dimension.
    pub fn new(items: Vec<CorpusItem>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(CorpusError::DuplicateId(item.id.clone()));
            }
            if item.references.is_empty() {
                return Err(CorpusError::Parse { line: 0, message: format!("item {:?} has no references", item.id) });
            }
        }
        let dim = items.iter().map(|i| i.conditioning.dim()).max().unwrap_or(0);
        let items = items
            .into_iter()
            .map(|mut i| {
                i.conditioning = i.conditioning.padded(dim);
                i
            })
            .collect::<Vec<_>>();
        let vector_dims: HashSet<usize> =
            items.iter().filter(|i| i.conditioning.class_id.is_none()).map(|i| i.conditioning.dim()).collect();
        if vector_dims.len() > 1 {
            return Err(CorpusError::Conditioning(format!("mixed conditioning dimensions {vector_dims:?}")));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn conditioning_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.conditioning.dim())
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut items = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawItem =
                serde_json::from_str(line).map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
            if raw.references.is_empty() {
                return Err(CorpusError::Parse { line: line_no, message: "references must be non-empty".into() });
            }
            if !seen.insert(raw.id.clone()) {
                return Err(CorpusError::DuplicateId(raw.id));
            }
            let conditioning = match raw.conditioning {
                RawConditioning::Class { class } => Conditioning::for_class(class, 0),
                RawConditioning::Vector { vector } => Conditioning::from_vector(vector)
                    .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?,
            };
            items.push(CorpusItem { id: raw.id, conditioning, references: raw.references });
        }
        Corpus::new(items)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            let conditioning = match item.conditioning.class_id {
                Some(class) => RawConditioning::Class { class },
                None => RawConditioning::Vector { vector: item.conditioning.vector.clone() },
            };
            let raw = RawItem { id: item.id.clone(), conditioning, references: item.references.clone() };
            out.push_str(&serde_json::to_string(&raw).expect("corpus items serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_jsonl()).map_err(|e| io_err(path, e))
    }
}

/// Reads a JSON-lines corpus file.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| io_err(path, e))?);
        text.push('\n');
    }
    Corpus::parse_jsonl(&text)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    corpus.save(path)
}

// ---------------------------------------------------------------------------
// Tabular worlds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSequence {
    pub tokens: Vec<TokenId>,
    pub p: f64,
}

/// Exact finite joint distribution over (class, EOS-terminated caption).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularWorld {
    pub vocab: Vocabulary,
    pub classes: Vec<ClassEntry>,
    pub sequences: BTreeMap<u32, Vec<WeightedSequence>>,
}

impl TabularWorld {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(self.to_json().as_bytes()).map_err(|e| io_err(path, e))?;
        f.write_all(b"\n").map_err(|e| io_err(path, e))
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn prior(&self, class_id: u32) -> Option<f64> {
        self.classes.iter().find(|c| c.id == class_id).map(|c| c.prior)
    }

    /// Exact marginal `p(x) = sum_y p(y) p(x|y)` over the union of supports.
    pub fn marginal(&self) -> BTreeMap<Vec<TokenId>, f64> {
        let mut acc: BTreeMap<Vec<TokenId>, numeric::CompensatedSum> = BTreeMap::new();
        for class in &self.classes {
            for seq in self.sequences.get(&class.id).map(Vec::as_slice).unwrap_or(&[]) {
                acc.entry(seq.tokens.clone()).or_default().add(class.prior * seq.p);
            }
        }
        acc.into_iter().map(|(k, v)| (k, v.value())).collect()
    }

    /// The caption of `class_id` with the highest pointwise mutual
    /// information, ties broken by higher `p(x|y)` and then lexicographically.
    pub fn canonical_caption(&self, class_id: u32) -> Option<Vec<TokenId>> {
        let marginal = self.marginal();
        let seqs = self.sequences.get(&class_id)?;
        let mut best: Option<(f64, f64, &Vec<TokenId>)> = None;
        for s in seqs.iter().filter(|s| s.p > 0.0) {
            let pmi = s.p.ln() - marginal[&s.tokens].ln();
            let better = match best {
                None => true,
                Some((bp, bc, bt)) => {
                    if !numeric::approx_tie(pmi, bp) {
                        pmi > bp
                    } else if s.p != bc {
                        s.p > bc
                    } else {
                        &s.tokens < bt
                    }
                }
            };
            if better {
                best = Some((pmi, s.p, &s.tokens));
            }
        }
        best.map(|(_, _, t)| t.clone())
    }

    pub fn support_size(&self) -> usize {
        self.sequences.values().map(Vec::len).sum()
    }
}

/// One failed invariant found by [`world_consistency_check`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateClass(u32),
    MissingSequences(u32),
    OrphanSequences(u32),
    BadPrior { class: u32, prior: f64 },
    PriorSum(f64),
    ClassMass { class: u32, sum: f64 },
    BadProbability { class: u32, tokens: Vec<TokenId>, p: f64 },
    NotEosTerminated { class: u32, tokens: Vec<TokenId> },
    ContainsBos { class: u32, tokens: Vec<TokenId> },
    EarlyEos { class: u32, tokens: Vec<TokenId> },
    TokenOutOfRange { class: u32, tokens: Vec<TokenId> },
    DuplicateSequence { class: u32, tokens: Vec<TokenId> },
    MarginalMass(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateClass(c) => write!(f, "class {c} listed more than once"),
            Violation::MissingSequences(c) => write!(f, "class {c} has no sequence table"),
            Violation::OrphanSequences(c) => write!(f, "sequence table for undeclared class {c}"),
            Violation::BadPrior { class, prior } => write!(f, "class {class} has invalid prior {prior}"),
            Violation::PriorSum(s) => write!(f, "class priors sum to {s}"),
            Violation::ClassMass { class, sum } => write!(f, "class {class} probabilities sum to {sum}"),
            Violation::BadProbability { class, tokens, p } => {
                write!(f, "class {class} sequence {tokens:?} has invalid probability {p}")
            }
            Violation::NotEosTerminated { class, tokens } => {
                write!(f, "class {class} sequence {tokens:?} does not end with EOS")
            }
            Violation::ContainsBos { class, tokens } => write!(f, "class {class} sequence {tokens:?} contains BOS"),
            Violation::EarlyEos { class, tokens } => {
                write!(f, "class {class} sequence {tokens:?} has EOS before its end")
            }
            Violation::TokenOutOfRange { class, tokens } => {
                write!(f, "class {class} sequence {tokens:?} has a token outside the vocabulary")
            }
            Violation::DuplicateSequence { class, tokens } => {
                write!(f, "class {class} lists sequence {tokens:?} twice")
            }
            Violation::MarginalMass(s) => write!(f, "marginal probabilities sum to {s}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsistencyReport {
    pub violations: Vec<Violation>,
}

impl ConsistencyReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ConsistencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "world is consistent");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every [`TabularWorld`] invariant and lists the violations.
pub fn world_consistency_check(world: &TabularWorld) -> ConsistencyReport {
    let mut violations = Vec::new();
    let vocab = &world.vocab;
    let size = vocab.size() as TokenId;

    let mut declared = HashSet::new();
    for c in &world.classes {
        if !declared.insert(c.id) {
            violations.push(Violation::DuplicateClass(c.id));
        }
        if !c.prior.is_finite() || c.prior < 0.0 {
            violations.push(Violation::BadPrior { class: c.id, prior: c.prior });
        }
    }
    let prior_sum = numeric::sum(world.classes.iter().map(|c| c.prior));
    if (prior_sum - 1.0).abs() > PROB_TOLERANCE {
        violations.push(Violation::PriorSum(prior_sum));
    }
    for c in &world.classes {
        if !world.sequences.contains_key(&c.id) {
            violations.push(Violation::MissingSequences(c.id));
        }
    }
    for (&class, seqs) in &world.sequences {
        if !declared.contains(&class) {
            violations.push(Violation::OrphanSequences(class));
        }
        let mut seen = HashSet::new();
        for s in seqs {
            let tokens = s.tokens.clone();
            if !s.p.is_finite() || s.p < 0.0 || s.p > 1.0 + PROB_TOLERANCE {
                violations.push(Violation::BadProbability { class, tokens: tokens.clone(), p: s.p });
            }
            if s.tokens.iter().any(|&t| t >= size) {
                violations.push(Violation::TokenOutOfRange { class, tokens: tokens.clone() });
            }
            if s.tokens.last() != Some(&vocab.eos_id()) {
                violations.push(Violation::NotEosTerminated { class, tokens: tokens.clone() });
            } else if s.tokens[..s.tokens.len() - 1].contains(&vocab.eos_id()) {
                violations.push(Violation::EarlyEos { class, tokens: tokens.clone() });
            }
            if s.tokens.contains(&vocab.bos_id()) {
                violations.push(Violation::ContainsBos { class, tokens: tokens.clone() });
            }
            if !seen.insert(&s.tokens) {
                violations.push(Violation::DuplicateSequence { class, tokens });
            }
        }
        let mass = numeric::sum(seqs.iter().map(|s| s.p));
        if (mass - 1.0).abs() > PROB_TOLERANCE {
            violations.push(Violation::ClassMass { class, sum: mass });
        }
    }
    let marginal_mass = numeric::sum(world.marginal().into_values());
    if (marginal_mass - 1.0).abs() > PROB_TOLERANCE {
        violations.push(Violation::MarginalMass(marginal_mass));
    }
    ConsistencyReport { violations }
}

// ---------------------------------------------------------------------------
// Synthetic generic/specific worlds
// ---------------------------------------------------------------------------

/// Sibling classes sharing generic captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub generic: Vec<String>,
    pub members: Vec<MemberSpec>,
}

/// One class: captions only it can produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub specific: Vec<String>,
}

fn default_rho() -> f64 {
    0.7
}
fn default_l_max() -> usize {
    6
}
fn default_refs() -> usize {
    5
}
fn default_items() -> usize {
    1
}

/// Recipe for [`make_synthetic_world`]. Classes are numbered in group order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub groups: Vec<GroupSpec>,
    /// Probability mass of the generic captions within each class.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Maximum caption length in tokens, EOS included.
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default = "default_refs")]
    pub refs_per_item: usize,
    #[serde(default = "default_items")]
    pub items_per_class: usize,
    /// Conditioning dimension; defaults to the number of classes.
    #[serde(default)]
    pub dim: Option<usize>,
}

const BUILTIN_GROUPS: &[(&str, &[&str])] = &[
    (
        "dog",
        &[
            "corgi",
            "beagle",
            "poodle",
            "husky",
            "collie",
            "terrier",
            "pug",
            "boxer",
            "dalmatian",
            "greyhound",
            "labrador",
            "retriever",
            "spaniel",
            "shepherd",
            "bulldog",
            "chihuahua",
        ],
    ),
    ("cat", &["tabby", "siamese", "persian", "bengal", "sphynx", "ragdoll", "manx", "burmese"]),
    ("bird", &["crane", "heron", "robin", "finch", "parrot", "eagle", "owl", "sparrow"]),
    ("car", &["sedan", "wagon", "coupe", "jeep", "hatchback", "convertible", "limousine", "minivan"]),
];

impl WorldSpec {
    /// Built-in animal/vehicle hierarchy: group `g` has `group_sizes[g]`
    /// classes, generic caption "a <category>" and specific captions
    /// "a <breed>".
    pub fn builtin(group_sizes: &[usize], rho: f64) -> Result<Self, CorpusError> {
        if group_sizes.len() > BUILTIN_GROUPS.len() {
            return Err(CorpusError::Spec(format!("at most {} built-in groups", BUILTIN_GROUPS.len())));
        }
        let mut groups = Vec::new();
        for (&n, &(generic, names)) in group_sizes.iter().zip(BUILTIN_GROUPS) {
            if n == 0 || n > names.len() {
                return Err(CorpusError::Spec(format!("group {generic:?} supports 1..={} classes", names.len())));
            }
            groups.push(GroupSpec {
                generic: vec![format!("a {generic}")],
                members: names[..n].iter().map(|b| MemberSpec { specific: vec![format!("a {b}")] }).collect(),
            });
        }
        Ok(Self { groups, rho, l_max: default_l_max(), refs_per_item: default_refs(), items_per_class: 1, dim: None })
    }

    pub fn num_classes(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Builds the world described by `spec` and a corpus whose references are
/// sampled from each class's caption distribution. Pure in `(spec, seed)`.
pub fn make_synthetic_world(spec: &WorldSpec, seed: u64) -> Result<(TabularWorld, Corpus), CorpusError> {
    if !(spec.rho > 0.0 && spec.rho < 1.0) {
        return Err(CorpusError::Spec(format!("rho must lie in (0, 1), got {}", spec.rho)));
    }
    if spec.groups.is_empty() || spec.groups.iter().any(|g| g.members.is_empty()) {
        return Err(CorpusError::Spec("every group needs at least one member".into()));
    }
    if spec.groups.iter().any(|g| g.generic.is_empty())
        || spec.groups.iter().flat_map(|g| &g.members).any(|m| m.specific.is_empty())
    {
        return Err(CorpusError::Spec("every class needs a generic and a specific caption".into()));
    }
    if spec.refs_per_item == 0 {
        return Err(CorpusError::Spec("refs_per_item must be at least 1".into()));
    }
    let num_classes = spec.num_classes();
    let dim = spec.dim.unwrap_or(num_classes);
    if dim < num_classes {
        return Err(CorpusError::Spec(format!("dim {dim} is smaller than the class count {num_classes}")));
    }

    let all_captions =
        spec.groups.iter().flat_map(|g| g.generic.iter().chain(g.members.iter().flat_map(|m| &m.specific)));
    let vocab = Vocabulary::with_words(all_captions.flat_map(|c| tokenize_for_metrics(c)).collect::<Vec<_>>());
    let encode = |caption: &str| -> Result<Vec<TokenId>, CorpusError> {
        let ids = vocab.encode_caption(caption)?;
        if ids.len() > spec.l_max {
            return Err(CorpusError::Spec(format!("caption {caption:?} exceeds l_max={}", spec.l_max)));
        }
        if ids.len() < 2 {
            return Err(CorpusError::Spec(format!("caption {caption:?} is empty")));
        }
        Ok(ids)
    };

    let prior = 1.0 / num_classes as f64;
    let mut classes = Vec::with_capacity(num_classes);
    let mut sequences = BTreeMap::new();
    let mut owner: HashMap<Vec<TokenId>, u32> = HashMap::new();
    let mut generic_of_group: Vec<HashSet<Vec<TokenId>>> = Vec::new();
    let mut class_id = 0u32;
    for group in &spec.groups {
        let generic: Vec<Vec<TokenId>> = group.generic.iter().map(|c| encode(c)).collect::<Result<_, _>>()?;
        generic_of_group.push(generic.iter().cloned().collect());
        for member in &group.members {
            let specific: Vec<Vec<TokenId>> = member.specific.iter().map(|c| encode(c)).collect::<Result<_, _>>()?;
            let mut table: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
            for g in &generic {
                *table.entry(g.clone()).or_default() += spec.rho / generic.len() as f64;
            }
            for s in &specific {
                if let Some(prev) = owner.insert(s.clone(), class_id) {
                    if prev != class_id {
                        return Err(CorpusError::Spec(format!(
                            "specific caption {:?} is shared by classes {prev} and {class_id}",
                            vocab.decode(s)
                        )));
                    }
                }
                *table.entry(s.clone()).or_default() += (1.0 - spec.rho) / specific.len() as f64;
            }
            classes.push(ClassEntry { id: class_id, prior });
            sequences.insert(
                class_id,
                table.into_iter().map(|(tokens, p)| WeightedSequence { tokens, p }).collect::<Vec<_>>(),
            );
            class_id += 1;
        }
    }
    for generic in &generic_of_group {
        if let Some(s) = generic.iter().find(|g| owner.contains_key(*g)) {
            return Err(CorpusError::Spec(format!("caption {:?} is both generic and specific", vocab.decode(s))));
        }
    }
    let world = TabularWorld { vocab, classes, sequences };
    let report = world_consistency_check(&world);
    if !report.is_ok() {
        return Err(CorpusError::World(report.to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for class in &world.classes {
        let seqs = &world.sequences[&class.id];
        for j in 0..spec.items_per_class {
            let references =
                (0..spec.refs_per_item).map(|_| world.vocab.decode(&sample_sequence(seqs, &mut rng).tokens)).collect();
            items.push(CorpusItem {
                id: format!("c{:03}-{j}", class.id),
                conditioning: Conditioning::for_class(class.id, dim),
                references,
            });
        }
    }
    Ok((world, Corpus::new(items)?))
}

fn sample_sequence<'a, R: Rng>(seqs: &'a [WeightedSequence], rng: &mut R) -> &'a WeightedSequence {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for s in seqs {
        acc += s.p;
        if u < acc {
            return s;
        }
    }
    seqs.last().expect("non-empty class table")
}

// ---------------------------------------------------------------------------
// Random worlds
// ---------------------------------------------------------------------------

/// Shape of a randomly drawn tabular world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomWorldParams {
    /// Content tokens in addition to the three reserved ones.
    pub content_tokens: usize,
    /// Maximum sequence length, EOS included.
    pub l_max: usize,
    pub classes: usize,
    /// Distinct sequences drawn for the shared pool.
    pub pool_size: usize,
    /// Each class supports between 1 and this many pool sequences.
    pub max_support: usize,
}

impl Default for RandomWorldParams {
    fn default() -> Self {
        Self { content_tokens: 5, l_max: 5, classes: 3, pool_size: 12, max_support: 6 }
    }
}

/// Draws a world whose classes put random, skewed mass on overlapping
/// subsets of a shared sequence pool.
pub fn random_world(params: &RandomWorldParams, seed: u64) -> Result<TabularWorld, CorpusError> {
    if params.content_tokens == 0 || params.l_max < 2 || params.classes == 0 || params.pool_size == 0 {
        return Err(CorpusError::Spec(format!("degenerate random world parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::with_words((0..params.content_tokens).map(|i| format!("w{i}")));
    let first_content = 3u32;
    let max_content_len = params.l_max - 1;
    let capacity: usize = (1..=max_content_len).map(|l| params.content_tokens.pow(l as u32)).sum();
    let pool_size = params.pool_size.min(capacity);

    let mut pool: Vec<Vec<TokenId>> = Vec::with_capacity(pool_size);
    let mut seen = HashSet::new();
    while pool.len() < pool_size {
        let len = rng.random_range(1..=max_content_len);
        let mut seq: Vec<TokenId> =
            (0..len).map(|_| first_content + rng.random_range(0..params.content_tokens) as TokenId).collect();
        seq.push(vocab.eos_id());
        if seen.insert(seq.clone()) {
            pool.push(seq);
        }
    }

    let prior_weights: Vec<f64> = (0..params.classes).map(|_| rng.random_range(0.2..1.0)).collect();
    let prior_total = numeric::sum(prior_weights.iter().copied());
    let classes =
        prior_weights.iter().enumerate().map(|(i, w)| ClassEntry { id: i as u32, prior: w / prior_total }).collect();

    let mut sequences = BTreeMap::new();
    for class in 0..params.classes as u32 {
        let support = rng.random_range(1..=params.max_support.min(pool_size).max(1));
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < support {
            let i = rng.random_range(0..pool_size);
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        chosen.sort_unstable();
        let weights: Vec<f64> = chosen.iter().map(|_| rng.random_range(0.02f64..1.0).powi(3)).collect();
        let total = numeric::sum(weights.iter().copied());
        sequences.insert(
            class,
            chosen
                .iter()
                .zip(&weights)
                .map(|(&i, w)| WeightedSequence { tokens: pool[i].clone(), p: w / total })
                .collect(),
        );
    }
    Ok(TabularWorld { vocab, classes, sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dog_world_spec(rho: f64) -> WorldSpec {
        WorldSpec {
            groups: vec![GroupSpec {
                generic: vec!["a dog".into()],
                members: vec![
                    MemberSpec { specific: vec!["a tan corgi".into()] },
                    MemberSpec { specific: vec!["a black poodle".into()] },
                ],
            }],
            rho,
            l_max: 6,
            refs_per_item: 3,
            items_per_class: 1,
            dim: None,
        }
    }

    #[test]
    fn vocabulary_round_trips_and_rejects_bad_ids() {
        let v = Vocabulary::with_words(["a", "dog"]);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
            assert_eq!(v.token(i as TokenId), Some(t.as_str()));
        }
        assert!(Vocabulary::new(vec!["x".into(), "y".into()], 0, 0, 1).is_err());
        assert!(Vocabulary::new(vec!["x".into(), "y".into(), "z".into()], 0, 1, 5).is_err());
        assert!(Vocabulary::new(vec!["x".into(), "x".into(), "z".into()], 0, 1, 2).is_err());
        assert!(matches!(v.encode("a cat"), Err(CorpusError::UnknownToken(t)) if t == "cat"));
    }

    #[test]
    fn conditioning_sentinel_and_class_resolution() {
        assert!(Conditioning::unconditional(4).is_unconditional());
        assert_eq!(Conditioning::for_class(2, 4).resolve_class(), ClassRef::Class(2));
        let v = Conditioning::from_vector(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(v.resolve_class(), ClassRef::Class(1));
        assert_eq!(Conditioning::from_vector(vec![0.5, 0.5]).unwrap().resolve_class(), ClassRef::Unresolved);
        assert!(Conditioning::from_vector(vec![f64::NAN]).is_err());
    }

    #[test]
    fn corpus_parse_preserves_order() {
        let text = "{\"id\":\"b\",\"conditioning\":{\"class\":1},\"references\":[\"a dog\"]}\n\
                    {\"id\":\"a\",\"conditioning\":{\"class\":0},\"references\":[\"a cat\",\"a pet\"]}\n";
        let corpus = Corpus::parse_jsonl(text).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.items[0].id, "b");
        assert_eq!(corpus.items[1].references.len(), 2);
        assert_eq!(corpus.items[0].conditioning.dim(), 2);
        assert_eq!(Corpus::parse_jsonl(&corpus.to_jsonl()).unwrap(), corpus);
    }

    #[test]
    fn empty_corpus_is_empty() {
        assert!(Corpus::parse_jsonl("").unwrap().is_empty());
    }

    #[test]
    fn missing_references_reports_line_number() {
        let text = "{\"id\":\"a\",\"conditioning\":{\"class\":0},\"references\":[\"x\"]}\n\
                    {\"id\":\"b\",\"conditioning\":{\"class\":0}}\n";
        match Corpus::parse_jsonl(text) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = "{\"id\":\"a\",\"conditioning\":{\"class\":0},\"references\":[\"x\"]}\n\
                    {\"id\":\"a\",\"conditioning\":{\"class\":1},\"references\":[\"y\"]}\n";
        assert!(matches!(Corpus::parse_jsonl(text), Err(CorpusError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn synthetic_world_is_deterministic() {
        let spec = dog_world_spec(0.8);
        let (w1, c1) = make_synthetic_world(&spec, 7).unwrap();
        let (w2, c2) = make_synthetic_world(&spec, 7).unwrap();
        assert_eq!(w1.to_json(), w2.to_json());
        assert_eq!(c1.to_jsonl(), c2.to_jsonl());
    }

    #[test]
    fn generic_caption_carries_rho() {
        let (world, _) = make_synthetic_world(&dog_world_spec(0.8), 1).unwrap();
        let generic = world.vocab.encode_caption("a dog").unwrap();
        for class in world.class_ids() {
            let p = world.sequences[&class].iter().find(|s| s.tokens == generic).unwrap().p;
            assert_eq!(p, 0.8);
        }
        assert_eq!(world.canonical_caption(0).unwrap(), world.vocab.encode_caption("a tan corgi").unwrap());
    }

    #[test]
    fn rho_outside_unit_interval_is_rejected() {
        for rho in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(make_synthetic_world(&dog_world_spec(rho), 0), Err(CorpusError::Spec(_))));
        }
    }

    #[test]
    fn generated_worlds_are_consistent() {
        let spec = WorldSpec::builtin(&[2, 1], 0.7).unwrap();
        assert_eq!(spec.num_classes(), 3);
        let (world, corpus) = make_synthetic_world(&spec, 3).unwrap();
        assert!(world_consistency_check(&world).is_ok());
        assert_eq!(corpus.len(), 3);
        for seed in 0..20 {
            let w = random_world(&RandomWorldParams::default(), seed).unwrap();
            let report = world_consistency_check(&w);
            assert!(report.is_ok(), "seed {seed}: {report}");
            assert!(w.vocab.size() <= 8);
        }
    }

    #[test]
    fn consistency_check_names_broken_class() {
        let (mut world, _) = make_synthetic_world(&dog_world_spec(0.8), 1).unwrap();
        for s in world.sequences.get_mut(&1).unwrap() {
            s.p *= 0.9;
        }
        let report = world_consistency_check(&world);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::ClassMass { class: 1, .. })));
        assert!(!report.violations.iter().any(|v| matches!(v, Violation::ClassMass { class: 0, .. })));
    }

    #[test]
    fn consistency_check_names_unterminated_sequence() {
        let (mut world, _) = make_synthetic_world(&dog_world_spec(0.8), 1).unwrap();
        world.sequences.get_mut(&0).unwrap()[0].tokens.pop();
        let report = world_consistency_check(&world);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::NotEosTerminated { class: 0, .. })));
    }

    #[test]
    fn world_file_round_trips() {
        let (world, _) = make_synthetic_world(&dog_world_spec(0.7), 2).unwrap();
        let back: TabularWorld = serde_json::from_str(&world.to_json()).unwrap();
        assert_eq!(back, world);
    }
}
