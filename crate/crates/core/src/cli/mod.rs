//! Command-line surface. Every subcommand is also callable as a library
//! function so tests and examples can drive the same code paths.
//!
//! Exit codes: 0 success, 1 assertion failure, 2 usage or I/O error.

pub mod prompts;
pub mod sweep;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, world_consistency_check, Corpus, CorpusError, TabularWorld, Vocabulary, WorldSpec};
use crate::decode::{DecodeError, DecodeParams, DecodeResult, Decoder, Strategy};
use crate::guidance::GuidanceSpec;
use crate::metrics::{self, Embedder, EmbeddingVector, EvalInput, EvalReport, SyntheticEmbedder};
use crate::oracle::{self, OracleDump, OracleError};
use crate::scorer::{
    self, LanguageModel, NGramConfig, NGramModel, RemoteError, RemoteOptions, RemoteScorer, Scorer, ScorerError,
    TabularScorer,
};

use prompts::{PromptFile, PromptOptions};

/// The guidance grid used throughout the bench.
pub const DEFAULT_GAMMAS: [f64; 6] = [1.0, 1.2, 1.5, 2.0, 3.0, 4.0];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("assertion failed: {0}")]
    Assertion(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Assertion(_) => 1,
            _ => 2,
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )*};
}
usage_from!(
    CorpusError,
    ScorerError,
    DecodeError,
    metrics::MetricsError,
    OracleError,
    RemoteError,
    serde_json::Error,
    csv::Error
);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "guidecap", version, about = "Guided caption decoding and evaluation bench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic generic/specific world and its corpus.
    GenWorld(GenWorldArgs),
    /// Decode every corpus item, one JSON line per item.
    Decode(DecodeArgs),
    /// Build a few-shot token-id prompt file from a captions file.
    BuildPrompt(BuildPromptArgs),
    /// Score predictions against a corpus.
    Eval(EvalArgs),
    /// Decode and evaluate over a grid of guidance settings.
    Sweep(SweepArgs),
    /// Brute-force maximizers and trade-off curve of a world.
    Oracle(OracleArgs),
    /// Handshake with a scorer server and check one response.
    PingServer(PingArgs),
    /// Train a conditional n-gram scorer.
    TrainNgram(TrainNgramArgs),
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    /// World spec JSON; without it the built-in hierarchy is used.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Classes per built-in group, e.g. 16,8,4,4.
    #[arg(long, value_delimiter = ',', default_value = "16,8,4,4")]
    pub groups: Vec<usize>,
    #[arg(long, default_value_t = 0.7)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    None,
    Cfg,
    Lm,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// tabular:<world.json> | ngram:<model.json> | remote:<host:port>
    #[arg(long)]
    pub scorer: String,
    /// Vocabulary for remote scorers: a world or vocabulary JSON, or "demo".
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long, value_enum, default_value = "none")]
    pub guidance: GuidanceKind,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub beta: f64,
    /// marginal:<world.json> | ngram:<model.json> | remote:<host:port>
    #[arg(long)]
    pub lm_scorer: Option<String>,
    /// Prompt file written by build-prompt.
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub max_length: usize,
    /// Beam search with this width instead of greedy decoding.
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Remote connections to open.
    #[arg(long, default_value_t = 1)]
    pub connections: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildPromptArgs {
    /// One caption per non-blank line; "descriptive" and "counting" name the bundled files.
    #[arg(long)]
    pub captions: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the first n captions in file order.
    #[arg(long)]
    pub in_order: bool,
    /// Emit one freshly sampled prompt per batch covering this many items.
    #[arg(long)]
    pub per_batch_items: Option<usize>,
    #[arg(long, default_value_t = prompts::DEFAULT_BATCH_ITEMS)]
    pub batch_items: usize,
    /// World or vocabulary JSON, or "demo".
    #[arg(long, default_value = "demo")]
    pub vocab: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageSource {
    /// Embedding of the class's canonical specific caption (needs a world).
    Canonical,
    /// Embedding of the item's first reference.
    FirstReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Decode output (JSON lines).
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub images: Option<ImageSource>,
    #[arg(long, default_value = "synthetic")]
    pub embedder: String,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    /// Phrase list, one per line, enabling mention statistics.
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    /// Correct phrase per corpus item, one per line.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub label: String,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep configuration JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub lm_scorer: Option<String>,
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub modes: Option<Vec<sweep::Mode>>,
    #[arg(long)]
    pub max_length: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out_csv: PathBuf,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Class to analyse; all classes when omitted.
    #[arg(long)]
    pub class: Option<u32>,
    #[arg(long, value_delimiter = ',', default_value = "1,1.2,1.5,2,3,4")]
    pub gammas: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PingArgs {
    #[arg(long)]
    pub addr: String,
    #[arg(long, default_value_t = 5000)]
    pub timeout_ms: u64,
}

#[derive(Debug, Args)]
pub struct TrainNgramArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// World or vocabulary JSON, or "demo".
    #[arg(long)]
    pub vocab: String,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, default_value_t = 0.5)]
    pub mask_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    pub smoothing: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("guidecap: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenWorld(a) => cmd_gen_world(&a).map(|_| ()),
        Command::Decode(a) => cmd_decode(&a),
        Command::BuildPrompt(a) => cmd_build_prompt(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::PingServer(a) => cmd_ping_server(&a),
        Command::TrainNgram(a) => cmd_train_ngram(&a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
        }
    }
}

// ---------------------------------------------------------------------------
// Loaders
// ---------------------------------------------------------------------------

/// `demo`, or a JSON file holding a vocabulary, a world or an n-gram model.
pub fn load_vocab(source: &str) -> Result<Vocabulary, CliError> {
    if source == "demo" {
        return Ok(Vocabulary::demo());
    }
    let path = Path::new(source);
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{source}: not JSON: {e}")))?;
    let vocab_value = if value.get("tokens").is_some() { &value } else { value.get("vocab").unwrap_or(&value) };
    serde_json::from_value(vocab_value.clone())
        .map_err(|e| CliError::Usage(format!("{source}: no vocabulary found: {e}")))
}

fn split_spec(spec: &str) -> Result<(&str, &str), CliError> {
    spec.split_once(':').ok_or_else(|| CliError::Usage(format!("scorer spec {spec:?} must look like kind:target")))
}

fn remote(addr: &str, vocab: Option<Vocabulary>, connections: usize) -> Result<RemoteScorer, CliError> {
    let options = RemoteOptions { connections, vocab, ..RemoteOptions::default() };
    Ok(RemoteScorer::handshake(addr, options)?)
}

/// `tabular:<world>` | `ngram:<model>` | `remote:<addr>`.
pub fn load_scorer(spec: &str, vocab: Option<Vocabulary>, connections: usize) -> Result<Arc<dyn Scorer>, CliError> {
    let (kind, target) = split_spec(spec)?;
    Ok(match kind {
        "tabular" => Arc::new(TabularScorer::new(TabularWorld::load(Path::new(target))?)?),
        "ngram" => Arc::new(NGramModel::load(Path::new(target))?),
        "remote" => Arc::new(remote(target, vocab, connections)?),
        other => return Err(CliError::Usage(format!("unknown scorer kind {other:?}"))),
    })
}

/// `marginal:<world>` (or `tabular:`) | `ngram:<model>` | `remote:<addr>`.
pub fn load_lm(spec: &str, vocab: Option<Vocabulary>, connections: usize) -> Result<Arc<dyn LanguageModel>, CliError> {
    let (kind, target) = split_spec(spec)?;
    Ok(match kind {
        "marginal" | "tabular" => Arc::new(TabularScorer::new(TabularWorld::load(Path::new(target))?)?),
        "ngram" => Arc::new(NGramModel::load(Path::new(target))?),
        "remote" => Arc::new(remote(target, vocab, connections)?),
        other => return Err(CliError::Usage(format!("unknown language model kind {other:?}"))),
    })
}

pub fn load_prompt_file(path: &Path) -> Result<PromptFile, CliError> {
    let p: PromptFile = serde_json::from_str(&read_text(path)?)?;
    if p.prompts.is_empty() {
        return Err(CliError::Usage(format!("{}: no prompts", path.display())));
    }
    Ok(p)
}

pub fn embedder_from_spec(spec: &str) -> Result<Box<dyn Embedder>, CliError> {
    match spec {
        "synthetic" => Ok(Box::new(SyntheticEmbedder)),
        other => Err(CliError::Usage(format!("unsupported embedder {other:?}; only \"synthetic\" is built in"))),
    }
}

// ---------------------------------------------------------------------------
// gen-world
// ---------------------------------------------------------------------------

pub fn cmd_gen_world(a: &GenWorldArgs) -> Result<(PathBuf, PathBuf), CliError> {
    let spec = match &a.spec {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Io {
                    path: p.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "spec file not found"),
                });
            }
            WorldSpec::load(p)?
        }
        None => WorldSpec::builtin(&a.groups, a.rho)?,
    };
    let (world, corpus) = corpus::make_synthetic_world(&spec, a.seed)?;
    fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    let world_path = a.out_dir.join("world.json");
    let corpus_path = a.out_dir.join("corpus.jsonl");
    world.save(&world_path)?;
    corpus.save(&corpus_path)?;
    Ok((world_path, corpus_path))
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecodeLine {
    Ok {
        id: String,
        #[serde(flatten)]
        result: DecodeResult,
    },
    Err {
        id: String,
        error: String,
    },
    /// Caption-only predictions, e.g. produced by another system.
    Text {
        id: String,
        text: String,
    },
}

impl DecodeLine {
    pub fn id(&self) -> &str {
        match self {
            DecodeLine::Ok { id, .. } | DecodeLine::Err { id, .. } | DecodeLine::Text { id, .. } => id,
        }
    }

    /// Caption text; failed items count as empty captions.
    pub fn text(&self) -> &str {
        match self {
            DecodeLine::Ok { result, .. } => &result.text,
            DecodeLine::Text { text, .. } => text,
            DecodeLine::Err { .. } => "",
        }
    }
}

/// Everything needed to decode a corpus under one guidance setting.
pub struct DecodePlan<'a> {
    pub scorer: &'a dyn Scorer,
    pub lm: Option<&'a dyn LanguageModel>,
    pub guidance: GuidanceKind,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub prompts: Option<&'a PromptFile>,
    pub params: DecodeParams,
    pub threads: Option<usize>,
}

/// Decodes every item in corpus order. Errors that concern the whole run
/// (bad parameters, missing LM) are returned; per-item failures are inlined.
pub fn decode_corpus(corpus: &Corpus, plan: &DecodePlan<'_>) -> Result<Vec<DecodeLine>, CliError> {
    let conds: Vec<_> = corpus.items.iter().map(|i| i.conditioning.clone()).collect();
    // items sharing a prompt are decoded together
    let groups: Vec<(usize, usize, GuidanceSpec)> = match plan.guidance {
        GuidanceKind::None => vec![(0, conds.len(), GuidanceSpec::None)],
        GuidanceKind::Cfg => vec![(0, conds.len(), GuidanceSpec::Cfg { gamma: plan.gamma })],
        GuidanceKind::Lm => {
            let lm_spec =
                |prompt: &[u32]| GuidanceSpec::Lm { alpha: plan.alpha, beta: plan.beta, prompt: prompt.to_vec() };
            match plan.prompts {
                Some(p @ PromptFile { batch_items: Some(b), .. }) if *b > 0 => (0..conds.len())
                    .step_by(*b)
                    .map(|start| (start, (start + b).min(conds.len()), lm_spec(p.prompt_for(start))))
                    .collect(),
                Some(p) => vec![(0, conds.len(), lm_spec(p.prompt_for(0)))],
                None => vec![(0, conds.len(), lm_spec(&[]))],
            }
        }
    };
    let mut results = Vec::with_capacity(conds.len());
    for (start, end, spec) in &groups {
        let decoder = Decoder::new(plan.scorer, plan.lm, spec, plan.params)?;
        let chunk = &conds[*start..*end];
        let out = match plan.threads {
            Some(t) => decoder.decode_batch_on(chunk, t)?,
            None => decoder.decode_batch(chunk),
        };
        results.extend(out);
    }
    Ok(corpus
        .items
        .iter()
        .zip(results)
        .map(|(item, r)| match r {
            Ok(result) => DecodeLine::Ok { id: item.id.clone(), result },
            Err(e) => DecodeLine::Err { id: item.id.clone(), error: e.to_string() },
        })
        .collect())
}

pub fn decode_lines_to_jsonl(lines: &[DecodeLine]) -> String {
    lines.iter().map(|l| serde_json::to_string(l).expect("decode lines serialize") + "\n").collect()
}

pub fn parse_decode_lines(text: &str) -> Result<Vec<DecodeLine>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Usage(format!("predictions line {}: {e}", i + 1))))
        .collect()
}

pub fn decode_params(max_length: usize, beam_width: Option<usize>, batch_size: usize) -> DecodeParams {
    let strategy = match beam_width {
        Some(width) => Strategy::Beam { width },
        None => Strategy::Greedy,
    };
    DecodeParams { max_length, strategy, batch_size }
}

pub fn cmd_decode(a: &DecodeArgs) -> Result<(), CliError> {
    let corpus = corpus::load_corpus(&a.corpus)?;
    let vocab = a.vocab.as_deref().map(load_vocab).transpose()?;
    let scorer = load_scorer(&a.scorer, vocab.clone(), a.connections)?;
    let lm = match (&a.lm_scorer, a.guidance) {
        (Some(spec), GuidanceKind::Lm) => Some(load_lm(spec, Some(scorer.vocab().clone()), a.connections)?),
        (None, GuidanceKind::Lm) => return Err(CliError::Usage("--guidance lm needs --lm-scorer".into())),
        _ => None,
    };
    let prompts = a.prompt.as_deref().map(load_prompt_file).transpose()?;
    let plan = DecodePlan {
        scorer: scorer.as_ref(),
        lm: lm.as_deref(),
        guidance: a.guidance,
        gamma: a.gamma,
        alpha: a.alpha,
        beta: a.beta,
        prompts: prompts.as_ref(),
        params: decode_params(a.max_length, a.beam_width, a.batch_size),
        threads: a.threads,
    };
    let lines = decode_corpus(&corpus, &plan)?;
    emit(a.out.as_deref(), &decode_lines_to_jsonl(&lines))
}

// ---------------------------------------------------------------------------
// build-prompt
// ---------------------------------------------------------------------------

pub fn cmd_build_prompt(a: &BuildPromptArgs) -> Result<(), CliError> {
    let text = match a.captions.as_str() {
        "descriptive" => prompts::DESCRIPTIVE.to_owned(),
        "counting" => prompts::COUNTING.to_owned(),
        path => read_text(Path::new(path))?,
    };
    let captions = prompts::parse_captions(&text);
    let vocab = load_vocab(&a.vocab)?;
    let options = PromptOptions {
        n: a.n,
        seed: a.seed,
        in_order: a.in_order,
        items: a.per_batch_items,
        batch_items: a.batch_items,
    };
    let file = prompts::build_prompts(&captions, &vocab, &options)?;
    emit(a.out.as_deref(), &(serde_json::to_string(&file)? + "\n"))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Image embeddings per corpus item.
pub fn image_embeddings(
    corpus: &Corpus,
    world: Option<&TabularWorld>,
    source: ImageSource,
    embedder: &dyn Embedder,
) -> Result<Vec<EmbeddingVector>, CliError> {
    corpus
        .items
        .iter()
        .map(|item| match source {
            ImageSource::FirstReference => Ok(embedder.embed(&item.references[0])),
            ImageSource::Canonical => {
                let world = world.ok_or_else(|| CliError::Usage("canonical images need --world".into()))?;
                let class = item
                    .conditioning
                    .class_id()
                    .ok_or_else(|| CliError::Usage(format!("item {} has no class", item.id)))?;
                let caption = world
                    .canonical_caption(class)
                    .ok_or_else(|| CliError::Usage(format!("class {class} is not in the world")))?;
                Ok(embedder.embed(&world.vocab.decode(&caption)))
            }
        })
        .collect()
}

/// Shared inputs for repeated evaluation of one corpus.
pub struct EvalContext {
    pub references: Vec<Vec<String>>,
    pub images: Vec<EmbeddingVector>,
    pub embedder: Box<dyn Embedder>,
    pub ks: Vec<usize>,
    pub phrases: Option<Vec<String>>,
    pub truth: Option<Vec<String>>,
}

impl EvalContext {
    pub fn new(
        corpus: &Corpus,
        world: Option<&TabularWorld>,
        images: Option<ImageSource>,
        embedder: &str,
        ks: Vec<usize>,
        phrases: Option<&Path>,
        truth: Option<&Path>,
    ) -> Result<Self, CliError> {
        let embedder = embedder_from_spec(embedder)?;
        let source =
            images.unwrap_or(if world.is_some() { ImageSource::Canonical } else { ImageSource::FirstReference });
        let images = image_embeddings(corpus, world, source, embedder.as_ref())?;
        let read_lines = |p: &Path| read_text(p).map(|t| prompts::parse_captions(&t));
        Ok(Self {
            references: corpus.items.iter().map(|i| i.references.clone()).collect(),
            images,
            embedder,
            ks,
            phrases: phrases.map(read_lines).transpose()?,
            truth: truth.map(read_lines).transpose()?,
        })
    }

    pub fn evaluate(&self, label: &str, candidates: &[String]) -> Result<EvalReport, CliError> {
        Ok(metrics::evaluate(&EvalInput {
            label,
            candidates,
            references: &self.references,
            images: &self.images,
            embedder: self.embedder.as_ref(),
            ks: &self.ks,
            phrases: self.phrases.as_deref(),
            truth: self.truth.as_deref(),
        })?)
    }
}

/// Candidate captions aligned to corpus order by id.
pub fn align_predictions(corpus: &Corpus, lines: &[DecodeLine]) -> Result<Vec<String>, CliError> {
    let by_id: std::collections::HashMap<&str, &DecodeLine> = lines.iter().map(|l| (l.id(), l)).collect();
    corpus
        .items
        .iter()
        .map(|item| {
            by_id
                .get(item.id.as_str())
                .map(|l| l.text().to_owned())
                .ok_or_else(|| CliError::Usage(format!("no prediction for item {}", item.id)))
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let corpus = corpus::load_corpus(&a.corpus)?;
    let world = a.world.as_deref().map(TabularWorld::load).transpose()?;
    let lines = parse_decode_lines(&read_text(&a.predictions)?)?;
    let candidates = align_predictions(&corpus, &lines)?;
    let ctx = EvalContext::new(
        &corpus,
        world.as_ref(),
        a.images,
        &a.embedder,
        a.ks.clone(),
        a.phrases.as_deref(),
        a.truth.as_deref(),
    )?;
    let report = ctx.evaluate(&a.label, &candidates)?;
    let text = match a.format {
        ReportFormat::Json => report.to_json() + "\n",
        ReportFormat::Csv => {
            let mut buf = Vec::new();
            metrics::write_csv(&mut buf, &[report])?;
            String::from_utf8(buf).expect("csv output is utf-8")
        }
    };
    emit(a.out.as_deref(), &text)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut config = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => sweep::SweepConfig::default(),
    };
    if let Some(v) = &a.corpus {
        config.corpus = v.clone();
    }
    if let Some(v) = &a.scorer {
        config.scorer = v.clone();
    }
    if let Some(v) = &a.world {
        config.world = Some(v.clone());
    }
    if let Some(v) = &a.lm_scorer {
        config.lm_scorer = Some(v.clone());
    }
    if let Some(v) = &a.prompt {
        config.prompt = Some(v.clone());
    }
    if let Some(v) = &a.gammas {
        config.gammas = v.clone();
    }
    if let Some(v) = &a.alphas {
        config.alphas = v.clone();
    }
    if let Some(v) = &a.modes {
        config.modes = Some(v.clone());
    }
    if let Some(v) = a.max_length {
        config.max_length = v;
    }
    if let Some(v) = a.threads {
        config.threads = Some(v);
    }
    let out = sweep::run_sweep(&config)?;
    write_text(&a.out_csv, &out.to_csv()?)?;
    if let Some(p) = &a.out_json {
        write_text(p, &(out.curves_json() + "\n"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleOutput {
    pub violations: Vec<String>,
    pub classes: Vec<OracleDump>,
}

pub fn oracle_report(world: &TabularWorld, class: Option<u32>, gammas: &[f64]) -> Result<OracleOutput, CliError> {
    let report = world_consistency_check(world);
    let violations: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
    if !violations.is_empty() {
        return Ok(OracleOutput { violations, classes: Vec::new() });
    }
    let classes: Vec<u32> = match class {
        Some(c) => vec![c],
        None => world.class_ids().collect(),
    };
    let classes = classes.into_iter().map(|c| oracle::oracle_dump(world, c, gammas)).collect::<Result<_, _>>()?;
    Ok(OracleOutput { violations, classes })
}

pub fn cmd_oracle(a: &OracleArgs) -> Result<(), CliError> {
    let world = TabularWorld::load(&a.world)?;
    let out = oracle_report(&world, a.class, &a.gammas)?;
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&out)? + "\n"))?;
    if !out.violations.is_empty() {
        return Err(CliError::Assertion(format!("world is inconsistent: {}", out.violations.join("; "))));
    }
    if let Some(bad) = out.classes.iter().find(|d| !d.monotone) {
        return Err(CliError::Assertion(format!("trade-off curve of class {} is not monotone", bad.class)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ping-server
// ---------------------------------------------------------------------------

pub fn cmd_ping_server(a: &PingArgs) -> Result<(), CliError> {
    let options = RemoteOptions { timeout: Duration::from_millis(a.timeout_ms), ..RemoteOptions::default() };
    let remote = RemoteScorer::handshake(&a.addr, options)?;
    println!("{}", serde_json::to_string(remote.hello())?);
    let lp = remote.unconditional_logprobs(&[remote.vocab().bos_id()])?;
    let mass = lp.logsumexp();
    println!("uncond [BOS]: {} entries, logsumexp {mass}", lp.len());
    if mass.abs() > 1e-9 {
        return Err(CliError::Assertion(format!("server response is not normalized (logsumexp {mass})")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-ngram
// ---------------------------------------------------------------------------

pub fn cmd_train_ngram(a: &TrainNgramArgs) -> Result<(), CliError> {
    let corpus = corpus::load_corpus(&a.corpus)?;
    let vocab = load_vocab(&a.vocab)?;
    let config = NGramConfig { order: a.order, mask_prob: a.mask_prob, smoothing: a.smoothing, seed: a.seed };
    let model = scorer::train_ngram(&corpus, &vocab, &config)?;
    write_text(&a.out, &(model.to_json() + "\n"))
}
