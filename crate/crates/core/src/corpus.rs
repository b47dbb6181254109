//! Canonical data types and line-oriented corpus I/O.
//!
//! Bitext travels as TSV, one pair per line (`src \t tgt`). Sentences are
//! guaranteed free of embedded tab/CR/LF so the format stays unambiguous,
//! and every pair carries an [`Origin`] back to its file and line.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{origin}: expected exactly one tab separator, found {tabs}")]
    MalformedLine { origin: Origin, tabs: usize },
    #[error("{file}:{line}: invalid UTF-8")]
    InvalidUtf8 { file: String, line: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest stage {stage}: kept {kept} + rejected {rejected} != in {lines_in}")]
    CounterMismatch {
        stage: String,
        kept: u64,
        rejected: u64,
        lines_in: u64,
    },
}

/// One side of a bitext pair. `text` never contains tab, CR, or LF.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tokens: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lang: Option<String>,
}

impl Sentence {
    /// Builds a sentence, replacing any embedded tab/CR/LF with a space so
    /// the TSV framing can never be broken by content.
    pub fn new(text: impl Into<String>) -> Self {
        let raw: String = text.into();
        let text = if raw.contains(['\t', '\r', '\n']) {
            raw.replace(['\t', '\r', '\n'], " ")
        } else {
            raw
        };
        Sentence {
            text,
            tokens: None,
            lang: None,
        }
    }

    pub fn with_lang(mut self, lang: impl Into<String>) -> Self {
        self.lang = Some(lang.into());
        self
    }

    /// Token count, if tokenized.
    pub fn len_tokens(&self) -> Option<usize> {
        self.tokens.as_ref().map(|t| t.len())
    }
}

/// Provenance of a pair: source file plus 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub file: String,
    pub line: u64,
}

impl Origin {
    pub fn new(file: impl Into<String>, line: u64) -> Self {
        Origin {
            file: file.into(),
            line,
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

/// One bitext unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Sentence,
    pub tgt: Sentence,
    pub origin: Origin,
    pub synthetic: bool,
}

impl SentencePair {
    pub fn new(src: Sentence, tgt: Sentence, origin: Origin) -> Self {
        SentencePair {
            src,
            tgt,
            origin,
            synthetic: false,
        }
    }
}

/// Parses one TSV line into a pair. The line must contain exactly one tab.
pub fn parse_pair(line: &str, origin: Origin) -> Result<SentencePair, CorpusError> {
    let tabs = line.bytes().filter(|&b| b == b'\t').count();
    if tabs != 1 {
        return Err(CorpusError::MalformedLine { origin, tabs });
    }
    let (src, tgt) = line.split_once('\t').expect("counted one tab");
    Ok(SentencePair::new(
        Sentence::new(src),
        Sentence::new(tgt),
        origin,
    ))
}

/// Inverse of [`parse_pair`] for the text fields.
pub fn serialize_pair(pair: &SentencePair) -> String {
    format!("{}\t{}", pair.src.text, pair.tgt.text)
}

/// Reads TSV bitext from a buffered reader, validating UTF-8 per line.
pub fn read_pairs(reader: impl BufRead, file: &str) -> Result<Vec<SentencePair>, CorpusError> {
    let mut pairs = Vec::new();
    for (idx, raw) in reader.split(b'\n').enumerate() {
        let line_no = idx as u64 + 1;
        let mut bytes = raw?;
        if bytes.last() == Some(&b'\r') {
            bytes.pop();
        }
        let line = String::from_utf8(bytes).map_err(|_| CorpusError::InvalidUtf8 {
            file: file.to_string(),
            line: line_no,
        })?;
        if line.is_empty() {
            continue;
        }
        pairs.push(parse_pair(&line, Origin::new(file, line_no))?);
    }
    Ok(pairs)
}

/// Uniform reservoir sample of `n` lines, deterministic for a fixed seed.
/// Output preserves first-seen relative order.
pub fn sample_lines<I, S>(stream: I, n: usize, seed: u64) -> Vec<S>
where
    I: IntoIterator<Item = S>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<(usize, S)> = Vec::with_capacity(n.min(4096));
    for (i, item) in stream.into_iter().enumerate() {
        if n == 0 {
            break;
        }
        if i < n {
            reservoir.push((i, item));
        } else {
            let j = rng.gen_range(0..=i);
            if j < n {
                reservoir[j] = (i, item);
            }
        }
    }
    reservoir.sort_by_key(|(i, _)| *i);
    reservoir.into_iter().map(|(_, s)| s).collect()
}

/// Per-stage counters. `lines_kept` plus the rejection total must equal
/// `lines_in`; [`Manifest::check_conservation`] enforces this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub lines_in: u64,
    pub lines_kept: u64,
    pub rejections: BTreeMap<String, u64>,
    pub config_hash: String,
}

impl StageStats {
    pub fn new(stage: impl Into<String>) -> Self {
        StageStats {
            stage: stage.into(),
            lines_in: 0,
            lines_kept: 0,
            rejections: BTreeMap::new(),
            config_hash: String::new(),
        }
    }

    pub fn reject(&mut self, reason: &str) {
        *self.rejections.entry(reason.to_string()).or_insert(0) += 1;
    }

    pub fn rejected_total(&self) -> u64 {
        self.rejections.values().sum()
    }
}

/// Record of a full run: deterministic counters per stage plus volatile
/// wall-clock timings. Timings are kept apart so golden-file comparisons
/// can ignore them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub tool_version: String,
    pub stages: Vec<StageStats>,
    #[serde(default)]
    pub timings_ms: BTreeMap<String, u64>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn push_stage(&mut self, stats: StageStats) {
        self.stages.push(stats);
    }

    pub fn check_conservation(&self) -> Result<(), CorpusError> {
        for s in &self.stages {
            let rejected = s.rejected_total();
            if s.lines_kept + rejected != s.lines_in {
                return Err(CorpusError::CounterMismatch {
                    stage: s.stage.clone(),
                    kept: s.lines_kept,
                    rejected,
                    lines_in: s.lines_in,
                });
            }
        }
        Ok(())
    }

    /// JSON of the deterministic part only (no timings).
    pub fn deterministic_json(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            tool_version: &'a str,
            stages: &'a [StageStats],
        }
        serde_json::to_string_pretty(&View {
            tool_version: &self.tool_version,
            stages: &self.stages,
        })
        .expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_pair_maps_fields() {
        let p = parse_pair("hello\tshalom", Origin::new("t", 1)).unwrap();
        assert_eq!(p.src.text, "hello");
        assert_eq!(p.tgt.text, "shalom");
        assert!(!p.synthetic);
        assert_eq!(p.origin, Origin::new("t", 1));
    }

    #[test]
    fn parse_pair_rejects_extra_tabs() {
        let err = parse_pair("a\tb\tc", Origin::new("t", 1)).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedLine { tabs: 2, .. }));
    }

    #[test]
    fn parse_pair_rejects_missing_tab() {
        let err = parse_pair("only source", Origin::new("t", 1)).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedLine { tabs: 0, .. }));
    }

    #[test]
    fn read_pairs_flags_invalid_utf8() {
        let bytes: &[u8] = b"ok\tok\n\xff\xfe\tbad\n";
        let err = read_pairs(bytes, "f").unwrap_err();
        assert!(matches!(err, CorpusError::InvalidUtf8 { line: 2, .. }));
    }

    #[test]
    fn sentence_construction_strips_framing_chars() {
        let s = Sentence::new("a\tb\rc\nd");
        assert_eq!(s.text, "a b c d");
    }

    #[test]
    fn sample_zero_is_empty() {
        let out = sample_lines(vec!["a", "b", "c"], 0, 42);
        assert!(out.is_empty());
    }

    #[test]
    fn sample_n_at_least_stream_returns_all_in_order() {
        let lines: Vec<String> = (0..5).map(|i| format!("line{i}")).collect();
        let out = sample_lines(lines.clone(), 5, 99);
        assert_eq!(out, lines);
        let out = sample_lines(lines.clone(), 50, 99);
        assert_eq!(out, lines);
    }

    #[test]
    fn sample_is_deterministic_and_sized() {
        let lines: Vec<String> = (0..10_000).map(|i| format!("line {i}")).collect();
        let a = sample_lines(lines.clone(), 1_000, 7);
        let b = sample_lines(lines.clone(), 1_000, 7);
        assert_eq!(a.len(), 1_000);
        assert_eq!(a, b);
        // order preservation: sampled lines appear in original relative order
        let idx: Vec<usize> = a.iter().map(|l| l[5..].parse::<usize>().unwrap()).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let c = sample_lines(lines, 1_000, 8);
        assert_ne!(a, c, "different seeds should give different samples");
    }

    #[test]
    fn manifest_conservation() {
        let mut m = Manifest::new();
        let mut s = StageStats::new("clean");
        s.lines_in = 10;
        s.lines_kept = 7;
        s.reject("length");
        s.reject("length");
        s.reject("ratio");
        m.push_stage(s);
        m.check_conservation().unwrap();

        let mut bad = StageStats::new("broken");
        bad.lines_in = 5;
        bad.lines_kept = 5;
        bad.reject("x");
        m.push_stage(bad);
        assert!(m.check_conservation().is_err());
    }

    proptest! {
        #[test]
        fn pair_roundtrip(src in "[^\\t\\r\\n]{0,40}", tgt in "[^\\t\\r\\n]{0,40}") {
            let pair = SentencePair::new(
                Sentence::new(src),
                Sentence::new(tgt),
                Origin::new("prop", 1),
            );
            let line = serialize_pair(&pair);
            let back = parse_pair(&line, Origin::new("prop", 1)).unwrap();
            prop_assert_eq!(back.src.text, pair.src.text);
            prop_assert_eq!(back.tgt.text, pair.tgt.text);
        }

        #[test]
        fn sampling_deterministic(n in 0usize..20, seed in any::<u64>(), len in 0usize..60) {
            let lines: Vec<String> = (0..len).map(|i| i.to_string()).collect();
            let a = sample_lines(lines.clone(), n, seed);
            let b = sample_lines(lines.clone(), n, seed);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), n.min(len));
        }
    }
}
