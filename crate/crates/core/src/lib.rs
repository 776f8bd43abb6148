//! Guided autoregressive caption decoding.
//!
//! The crate couples a small decoding engine with an evaluation bench:
//!
//! * [`corpus`] loads caption corpora and builds exact tabular caption worlds.
//! * [`scorer`] defines the next-token scorer contract and its tabular, n-gram
//!   and remote (wire protocol) backends.
//! * [`guidance`] holds the pure logit-fusion rules: classifier-free guidance,
//!   language-model guidance and the newline-to-EOS mass transfer.
//! * [`decode`] runs greedy and beam decoding over fused scores, in batches.
//! * [`metrics`] implements BLEU-4, ROUGE-L, CIDEr, the embedding score,
//!   caption-to-image recall@k and the descriptive statistics.
//! * [`oracle`] enumerates tabular worlds and maximizes the guided objectives
//!   by brute force, which is what the decoder is checked against.
//! * [`cli`] is the command-line surface used by the `guidecap` binary.
//!
//! Runnable walkthroughs for each capability live in the crate's `examples/`
//! directory.

pub mod cli;
pub mod corpus;
pub mod decode;
pub mod guidance;
pub mod metrics;
pub mod numeric;
pub mod oracle;
pub mod scorer;

pub use corpus::{Conditioning, Corpus, CorpusItem, TabularWorld, TokenId, Vocabulary, WorldSpec};
pub use decode::{DecodeParams, DecodeResult, Decoder, Strategy, Termination};
pub use guidance::{GuidanceSpec, ScoreVector};
pub use scorer::{LanguageModel, LogProbVector, Scorer};
