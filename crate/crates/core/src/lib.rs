//! Data-preparation toolkit for bidirectional machine translation.
//!
//! The crate covers the full pre-neural side of an MT data pipeline:
//!
//! * [`corpus`] — bitext records, TSV I/O, reservoir sampling, run manifests
//! * [`cleaning`] — normalization, tokenization, and the three-step bitext filter stack
//! * [`langid`] — character n-gram language identification
//! * [`subword`] — unigram subword model (train / Viterbi encode / decode)
//! * [`ngram_lm`] — Kneser–Ney n-gram LM, ARPA serialization, score-threshold filtering
//! * [`align`] — IBM Model 1 word alignment and symmetrized link extraction
//! * [`graph_embed`] — alignment graph and multi-hop embedding re-parameterization
//! * [`tagging`] — direction/synthetic tags, synthetic-data merging, emoji escaping
//!
//! The companion `forge` binary wires these into a config-driven pipeline.

pub mod align;
pub mod cleaning;
pub mod corpus;
pub mod graph_embed;
pub mod langid;
pub mod ngram_lm;
pub mod subword;
pub mod tagging;

mod guide;
