//! Subword-level n-gram language model with interpolated Kneser–Ney
//! smoothing, ARPA serialization, and score-threshold calibration for
//! monolingual filtering.
//!
//! Estimation uses a fixed absolute discount of 0.75 per order. Lower-order
//! distributions use continuation ("adjusted") counts: the count of an
//! n-gram below the top order is the number of distinct tokens extending it
//! to the left, except for n-grams starting with BOS, which keep raw
//! counts. Probabilities and backoff weights are stored in log10, the
//! native base of the ARPA format, so write → read → write is bit-exact.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sentence, StageStats};
use crate::subword::{SubwordModel, BOS_PIECE, EOS_PIECE, UNK_PIECE};

/// Fixed absolute discount applied at every order.
pub const DISCOUNT: f64 = 0.75;
const LN10: f64 = std::f64::consts::LN_10;
/// Conventional ARPA log10 probability for the never-predicted BOS token.
const BOS_LOGPROB10: f64 = -99.0;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("model order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("cannot score an empty sentence")]
    EmptySentence,
    #[error("calibration needs at least one Good and one Bad sample")]
    NeedBothLabels,
    #[error("target bad-removal fraction must be in (0, 1], got {0}")]
    BadTarget(f64),
    #[error("malformed ARPA input: {0}")]
    MalformedArpa(String),
}

const UNK: u32 = 0;
const BOS: u32 = 1;
const EOS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    logprob10: f64,
    backoff10: Option<f64>,
}

/// Kneser–Ney smoothed backoff n-gram model.
#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    /// tables[n-1] holds the n-gram entries keyed by internal-ID sequences.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

/// Whether scores are per-token normalized or raw sentence log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Normalized,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Good,
    Bad,
}

/// A sentence score paired with its human label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub label: Label,
}

/// Calibrated cutoff: sentences scoring below it are removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub cutoff: f64,
    pub achieved_bad_removed: f64,
    pub achieved_good_retained: f64,
    pub achieved_total_retained: f64,
}

impl NGramModel {
    /// Estimates a model of the given order from tokenized sentences.
    pub fn train_tokens<S: AsRef<str>>(
        corpus: &[Vec<S>],
        order: usize,
    ) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::InvalidOrder(order));
        }
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(LmError::EmptyCorpus);
        }
        let longest = corpus.iter().map(|s| s.len()).max().unwrap_or(0);
        if order > longest + 1 {
            log::warn!(
                "LM order {order} exceeds longest sentence + 1 ({}); high orders will be sparse",
                longest + 1
            );
        }

        let mut vocab: Vec<String> = vec![
            UNK_PIECE.to_string(),
            BOS_PIECE.to_string(),
            EOS_PIECE.to_string(),
        ];
        let mut ids: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();

        // raw counts for all orders 1..=order over BOS-padded sentences
        let mut raw: Vec<HashMap<Vec<u32>, u64>> = (0..order).map(|_| HashMap::new()).collect();
        for sentence in corpus {
            if sentence.is_empty() {
                continue;
            }
            let mut padded = Vec::with_capacity(sentence.len() + 2);
            padded.push(BOS);
            for tok in sentence {
                let tok = tok.as_ref();
                let id = *ids.entry(tok.to_string()).or_insert_with(|| {
                    vocab.push(tok.to_string());
                    (vocab.len() - 1) as u32
                });
                padded.push(id);
            }
            padded.push(EOS);
            for n in 1..=order {
                for win in padded.windows(n) {
                    *raw[n - 1].entry(win.to_vec()).or_insert(0) += 1;
                }
            }
        }

        // adjusted counts: top order and BOS-initial n-grams keep raw
        // counts; everything else uses distinct-left-extension counts
        let mut adjusted: Vec<HashMap<Vec<u32>, u64>> = Vec::with_capacity(order);
        for n in 1..=order {
            if n == order {
                adjusted.push(raw[n - 1].clone());
                continue;
            }
            let mut adj: HashMap<Vec<u32>, u64> = HashMap::new();
            for key in raw[n].keys() {
                *adj.entry(key[1..].to_vec()).or_insert(0) += 1;
            }
            for (key, &c) in &raw[n - 1] {
                if key[0] == BOS {
                    adj.insert(key.clone(), c);
                }
            }
            adjusted.push(adj);
        }

        // per-context totals and distinct-extension counts
        // context_stats[n] covers contexts of length n (0 = empty context)
        let mut context_stats: Vec<HashMap<Vec<u32>, (u64, u64)>> =
            (0..order).map(|_| HashMap::new()).collect();
        for n in 1..=order {
            for (key, &a) in &adjusted[n - 1] {
                if n == 1 && key[0] == BOS {
                    continue; // BOS is never predicted
                }
                let ctx = key[..n - 1].to_vec();
                let slot = context_stats[n - 1].entry(ctx).or_insert((0, 0));
                slot.0 += a;
                slot.1 += 1;
            }
        }

        // prediction vocabulary: everything but BOS (UNK included)
        let pred_vocab_size = (vocab.len() - 1) as f64;
        let uniform = 1.0 / pred_vocab_size;

        // linear interpolated probabilities, built order by order
        let mut linear: Vec<HashMap<Vec<u32>, f64>> = (0..order).map(|_| HashMap::new()).collect();
        let (a1_total, n1_unigrams) = context_stats[0].get(&Vec::new()).copied().unwrap_or((0, 0));
        let a1_total = a1_total as f64;
        let gamma_empty = DISCOUNT * n1_unigrams as f64 / a1_total;
        for w in 0..vocab.len() as u32 {
            if w == BOS {
                continue;
            }
            let a = adjusted[0].get(&vec![w]).copied().unwrap_or(0) as f64;
            let p = (a - DISCOUNT).max(0.0) / a1_total + gamma_empty * uniform;
            linear[0].insert(vec![w], p);
        }
        for n in 2..=order {
            let keys: Vec<Vec<u32>> = adjusted[n - 1].keys().cloned().collect();
            for key in keys {
                let a = adjusted[n - 1][&key] as f64;
                let ctx = &key[..n - 1];
                let &(total, distinct) = context_stats[n - 1]
                    .get(ctx)
                    .expect("stored n-gram implies stored context stats");
                let total = total as f64;
                let gamma = DISCOUNT * distinct as f64 / total;
                let lower = linear[n - 2]
                    .get(&key[1..])
                    .copied()
                    .expect("suffix of a stored n-gram is stored");
                let p = (a - DISCOUNT).max(0.0) / total + gamma * lower;
                linear[n - 1].insert(key, p);
            }
        }

        // assemble log10 tables with backoff weights on contexts
        let mut tables: Vec<HashMap<Vec<u32>, Entry>> =
            (0..order).map(|_| HashMap::new()).collect();
        for n in 1..=order {
            for (key, &p) in &linear[n - 1] {
                tables[n - 1].insert(
                    key.clone(),
                    Entry {
                        logprob10: p.log10(),
                        backoff10: None,
                    },
                );
            }
        }
        // BOS unigram: conventional floor probability, real backoff weight
        tables[0].insert(
            vec![BOS],
            Entry {
                logprob10: BOS_LOGPROB10,
                backoff10: None,
            },
        );
        for n in 1..order {
            let stats = std::mem::take(&mut context_stats[n]);
            for (ctx, (total, distinct)) in stats {
                let gamma = DISCOUNT * distinct as f64 / total as f64;
                if let Some(entry) = tables[n - 1].get_mut(&ctx) {
                    entry.backoff10 = Some(gamma.log10());
                }
            }
        }

        Ok(NGramModel {
            order,
            vocab,
            ids,
            tables,
        })
    }

    /// Trains from subword-ID sequences, using the piece inventory for
    /// token strings.
    pub fn train_ids(
        corpus: &[Vec<u32>],
        spm: &SubwordModel,
        order: usize,
    ) -> Result<Self, LmError> {
        let tokens: Vec<Vec<String>> = corpus
            .iter()
            .map(|ids| {
                ids.iter()
                    .map(|&id| spm.piece(id).unwrap_or(UNK_PIECE).to_string())
                    .collect()
            })
            .collect();
        Self::train_tokens(&tokens, order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(|s| s.as_str())
    }

    fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    fn backoff10(&self, ctx: &[u32]) -> f64 {
        if ctx.is_empty() {
            return 0.0;
        }
        self.tables[ctx.len() - 1]
            .get(ctx)
            .and_then(|e| e.backoff10)
            .unwrap_or(0.0)
    }

    /// ARPA backoff evaluation: longest stored n-gram wins, otherwise the
    /// context's backoff weight times the lower-order estimate.
    fn logprob10(&self, ctx: &[u32], word: u32) -> f64 {
        let mut key = Vec::with_capacity(ctx.len() + 1);
        key.extend_from_slice(ctx);
        key.push(word);
        if let Some(e) = self.tables[ctx.len()].get(&key) {
            return e.logprob10;
        }
        if ctx.is_empty() {
            // every queried word is mapped into the vocabulary first, and
            // all non-BOS unigrams are stored; BOS has a floor entry
            return self.tables[0][&vec![UNK]].logprob10;
        }
        self.backoff10(ctx) + self.logprob10(&ctx[1..], word)
    }

    /// Sum of log10 probabilities of the sentence plus EOS, with BOS
    /// context padding. Unknown tokens map to UNK.
    fn sentence_logprob10<S: AsRef<str>>(&self, sentence: &[S]) -> f64 {
        let mut padded = Vec::with_capacity(sentence.len() + 1);
        padded.push(BOS);
        for tok in sentence {
            padded.push(self.id(tok.as_ref()));
        }
        let mut total = 0.0;
        for i in 1..=padded.len() {
            let word = if i == padded.len() { EOS } else { padded[i] };
            let lo = i.saturating_sub(self.order - 1).min(i);
            total += self.logprob10(&padded[lo..i], word);
        }
        total
    }

    /// Length-normalized log-probability in nats per token (including the
    /// EOS transition), always finite.
    pub fn score_tokens<S: AsRef<str>>(&self, sentence: &[S]) -> Result<f64, LmError> {
        if sentence.is_empty() {
            return Err(LmError::EmptySentence);
        }
        let log10 = self.sentence_logprob10(sentence);
        Ok(log10 * LN10 / (sentence.len() + 1) as f64)
    }

    /// Unnormalized sentence log-probability in nats.
    pub fn score_tokens_raw<S: AsRef<str>>(&self, sentence: &[S]) -> Result<f64, LmError> {
        if sentence.is_empty() {
            return Err(LmError::EmptySentence);
        }
        Ok(self.sentence_logprob10(sentence) * LN10)
    }

    pub fn score_with_mode<S: AsRef<str>>(
        &self,
        sentence: &[S],
        mode: ScoreMode,
    ) -> Result<f64, LmError> {
        match mode {
            ScoreMode::Normalized => self.score_tokens(sentence),
            ScoreMode::Raw => self.score_tokens_raw(sentence),
        }
    }

    /// Scores a subword-ID sequence.
    pub fn score_ids(&self, ids: &[u32], spm: &SubwordModel) -> Result<f64, LmError> {
        let toks: Vec<&str> = ids
            .iter()
            .map(|&id| spm.piece(id).unwrap_or(UNK_PIECE))
            .collect();
        self.score_tokens(&toks)
    }

    /// Corpus perplexity: 10^(-(Σ log10 P) / total predicted tokens).
    pub fn perplexity<S: AsRef<str>>(&self, corpus: &[Vec<S>]) -> f64 {
        let mut total_log10 = 0.0;
        let mut tokens = 0usize;
        for sentence in corpus {
            if sentence.is_empty() {
                continue;
            }
            total_log10 += self.sentence_logprob10(sentence);
            tokens += sentence.len() + 1;
        }
        10f64.powf(-total_log10 / tokens as f64)
    }

    /// Largest |Σ_w P(w|ctx) − 1| over the empty context and every stored
    /// context, summing over the full prediction vocabulary (all words but
    /// BOS). Exhaustive; intended for small models.
    pub fn max_normalization_error(&self) -> f64 {
        let mut contexts: Vec<Vec<u32>> = vec![Vec::new()];
        for n in 1..self.order {
            contexts.extend(self.tables[n - 1].keys().cloned());
        }
        let mut worst = 0.0f64;
        for ctx in &contexts {
            let mut sum = 0.0;
            for w in 0..self.vocab.len() as u32 {
                if w == BOS {
                    continue;
                }
                sum += 10f64.powf(self.logprob10(ctx, w));
            }
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    /// Serializes in the textual ARPA format. Entries are sorted
    /// lexicographically by token strings, with backoff weights written
    /// for every entry below the top order, so the output is canonical.
    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for n in 1..=self.order {
            out.push_str(&format!("ngram {}={}\n", n, self.tables[n - 1].len()));
        }
        for n in 1..=self.order {
            out.push_str(&format!("\n\\{n}-grams:\n"));
            let mut entries: Vec<(Vec<&str>, &Entry)> = self.tables[n - 1]
                .iter()
                .map(|(key, e)| {
                    let toks: Vec<&str> =
                        key.iter().map(|&id| self.vocab[id as usize].as_str()).collect();
                    (toks, e)
                })
                .collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            for (toks, e) in entries {
                out.push_str(&format!("{}", e.logprob10));
                out.push('\t');
                out.push_str(&toks.join(" "));
                if n < self.order {
                    out.push('\t');
                    out.push_str(&format!("{}", e.backoff10.unwrap_or(0.0)));
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    /// Parses an ARPA file produced by [`to_arpa`] (or any standard,
    /// tab-separated ARPA text).
    pub fn from_arpa(text: &str) -> Result<Self, LmError> {
        let mut lines = text.lines().peekable();
        let mut expected: Vec<(usize, usize)> = Vec::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| LmError::MalformedArpa("missing \\data\\ header".into()))?;
            if line.trim() == "\\data\\" {
                break;
            }
        }
        for line in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let rest = line
                .strip_prefix("ngram ")
                .ok_or_else(|| LmError::MalformedArpa(format!("bad data line: {line:?}")))?;
            let (n, count) = rest
                .split_once('=')
                .ok_or_else(|| LmError::MalformedArpa(format!("bad data line: {line:?}")))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| LmError::MalformedArpa(format!("bad order: {line:?}")))?;
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| LmError::MalformedArpa(format!("bad count: {line:?}")))?;
            expected.push((n, count));
        }
        if expected.is_empty() {
            return Err(LmError::MalformedArpa("no ngram counts declared".into()));
        }
        let order = expected.len();

        let mut vocab: Vec<String> = vec![
            UNK_PIECE.to_string(),
            BOS_PIECE.to_string(),
            EOS_PIECE.to_string(),
        ];
        let mut ids: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let mut tables: Vec<HashMap<Vec<u32>, Entry>> =
            (0..order).map(|_| HashMap::new()).collect();

        let mut current_n: Option<usize> = None;
        for line in lines {
            let line = line.trim_end_matches(['\r']);
            if line.trim().is_empty() {
                continue;
            }
            if line.trim() == "\\end\\" {
                current_n = None;
                continue;
            }
            if let Some(section) = line.trim().strip_prefix('\\').and_then(|s| s.strip_suffix("-grams:")) {
                let n: usize = section
                    .parse()
                    .map_err(|_| LmError::MalformedArpa(format!("bad section: {line:?}")))?;
                if n == 0 || n > order {
                    return Err(LmError::MalformedArpa(format!(
                        "section order {n} outside declared range"
                    )));
                }
                current_n = Some(n);
                continue;
            }
            let Some(n) = current_n else {
                return Err(LmError::MalformedArpa(format!(
                    "entry outside any section: {line:?}"
                )));
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(LmError::MalformedArpa(format!("bad entry: {line:?}")));
            }
            let logprob10: f64 = fields[0]
                .parse()
                .map_err(|_| LmError::MalformedArpa(format!("bad logprob: {line:?}")))?;
            let toks: Vec<&str> = fields[1].split(' ').collect();
            if toks.len() != n {
                return Err(LmError::MalformedArpa(format!(
                    "expected {n} tokens, got {}: {line:?}",
                    toks.len()
                )));
            }
            let backoff10 = match fields.get(2) {
                Some(b) => Some(
                    b.parse::<f64>()
                        .map_err(|_| LmError::MalformedArpa(format!("bad backoff: {line:?}")))?,
                ),
                None => None,
            };
            let key: Vec<u32> = toks
                .iter()
                .map(|t| {
                    *ids.entry(t.to_string()).or_insert_with(|| {
                        vocab.push(t.to_string());
                        (vocab.len() - 1) as u32
                    })
                })
                .collect();
            tables[n - 1].insert(key, Entry { logprob10, backoff10 });
        }
        for (n, count) in expected {
            if tables[n - 1].len() != count {
                return Err(LmError::MalformedArpa(format!(
                    "declared {count} {n}-grams, found {}",
                    tables[n - 1].len()
                )));
            }
        }
        Ok(NGramModel {
            order,
            vocab,
            ids,
            tables,
        })
    }
}

/// Chooses the cutoff that maximizes good retention subject to removing at
/// least `target_bad_removed` of the bad samples. Candidates are ±∞ and
/// the midpoints between adjacent distinct scores; a sentence is removed
/// iff its score is strictly below the cutoff. Ties prefer the smaller
/// cutoff, retaining more data.
pub fn calibrate_threshold(
    samples: &[LabeledScore],
    target_bad_removed: f64,
) -> Result<Threshold, LmError> {
    if !(target_bad_removed > 0.0 && target_bad_removed <= 1.0) {
        return Err(LmError::BadTarget(target_bad_removed));
    }
    let bad_total = samples.iter().filter(|s| s.label == Label::Bad).count();
    let good_total = samples.len() - bad_total;
    if bad_total == 0 || good_total == 0 {
        return Err(LmError::NeedBothLabels);
    }

    let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    scores.dedup();
    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    candidates.extend(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(f64::INFINITY);

    // good_retained is non-increasing and bad_removed non-decreasing in the
    // cutoff, so the smallest feasible cutoff is optimal
    let evaluate = |cutoff: f64| {
        let bad_removed = samples
            .iter()
            .filter(|s| s.label == Label::Bad && s.score < cutoff)
            .count() as f64
            / bad_total as f64;
        let good_kept = samples
            .iter()
            .filter(|s| s.label == Label::Good && s.score >= cutoff)
            .count() as f64
            / good_total as f64;
        let total_kept =
            samples.iter().filter(|s| s.score >= cutoff).count() as f64 / samples.len() as f64;
        (bad_removed, good_kept, total_kept)
    };
    for &cutoff in &candidates {
        let (bad_removed, good_kept, total_kept) = evaluate(cutoff);
        if bad_removed >= target_bad_removed {
            return Ok(Threshold {
                cutoff,
                achieved_bad_removed: bad_removed,
                achieved_good_retained: good_kept,
                achieved_total_retained: total_kept,
            });
        }
    }
    unreachable!("cutoff = +inf removes every bad sample");
}

/// Keeps exactly the sentences whose score is at or above the calibrated
/// cutoff. Unscorable sentences (nothing to encode) are removed.
pub fn filter_mono(
    stream: Vec<Sentence>,
    model: &NGramModel,
    spm: &SubwordModel,
    threshold: &Threshold,
    mode: ScoreMode,
) -> (Vec<Sentence>, StageStats) {
    let mut stats = StageStats::new("lm_filter");
    stats.lines_in = stream.len() as u64;
    let mut kept = Vec::with_capacity(stream.len());
    for sentence in stream {
        let ids = spm.encode(&sentence.text);
        let toks: Vec<&str> = ids
            .iter()
            .map(|&id| spm.piece(id).unwrap_or(UNK_PIECE))
            .collect();
        let score = if toks.is_empty() {
            f64::NEG_INFINITY
        } else {
            model
                .score_with_mode(&toks, mode)
                .expect("non-empty token sequence scores")
        };
        if score >= threshold.cutoff {
            kept.push(sentence);
        } else {
            stats.reject("lm_score");
        }
    }
    stats.lines_kept = kept.len() as u64;
    (kept, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    /// Independent interpolated-KN evaluator working directly from raw
    /// counts via the textbook recursion, with no ARPA tables.
    struct KnOracle {
        order: usize,
        adjusted: Vec<HashMap<Vec<String>, u64>>,
        pred_vocab: Vec<String>,
    }

    impl KnOracle {
        fn build(corpus: &[Vec<String>], order: usize) -> Self {
            let bos = BOS_PIECE.to_string();
            let eos = EOS_PIECE.to_string();
            let mut raw: Vec<HashMap<Vec<String>, u64>> =
                (0..order).map(|_| HashMap::new()).collect();
            let mut vocab: Vec<String> = vec![UNK_PIECE.to_string(), eos.clone()];
            for sentence in corpus {
                if sentence.is_empty() {
                    continue;
                }
                let mut padded = vec![bos.clone()];
                padded.extend(sentence.iter().cloned());
                padded.push(eos.clone());
                for tok in sentence {
                    if !vocab.contains(tok) {
                        vocab.push(tok.clone());
                    }
                }
                for n in 1..=order {
                    for win in padded.windows(n) {
                        *raw[n - 1].entry(win.to_vec()).or_insert(0) += 1;
                    }
                }
            }
            let mut adjusted: Vec<HashMap<Vec<String>, u64>> = Vec::new();
            for n in 1..=order {
                if n == order {
                    adjusted.push(raw[n - 1].clone());
                    continue;
                }
                let mut adj: HashMap<Vec<String>, u64> = HashMap::new();
                for key in raw[n].keys() {
                    *adj.entry(key[1..].to_vec()).or_insert(0) += 1;
                }
                for (key, &c) in &raw[n - 1] {
                    if key[0] == bos {
                        adj.insert(key.clone(), c);
                    }
                }
                adjusted.push(adj);
            }
            KnOracle {
                order,
                adjusted,
                pred_vocab: vocab,
            }
        }

        fn prob(&self, ctx: &[String], word: &str) -> f64 {
            if ctx.is_empty() {
                let (total, distinct) = self.context_stats(&[]);
                let a = self
                    .adjusted[0]
                    .get(&vec![word.to_string()])
                    .copied()
                    .unwrap_or(0) as f64;
                let gamma = DISCOUNT * distinct / total;
                return (a - DISCOUNT).max(0.0) / total
                    + gamma * (1.0 / self.pred_vocab.len() as f64);
            }
            let (total, distinct) = self.context_stats(ctx);
            if total == 0.0 {
                return self.prob(&ctx[1..], word);
            }
            let mut key: Vec<String> = ctx.to_vec();
            key.push(word.to_string());
            let a = self.adjusted[ctx.len()].get(&key).copied().unwrap_or(0) as f64;
            let gamma = DISCOUNT * distinct / total;
            (a - DISCOUNT).max(0.0) / total + gamma * self.prob(&ctx[1..], word)
        }

        fn context_stats(&self, ctx: &[String]) -> (f64, f64) {
            let n = ctx.len() + 1;
            let bos = BOS_PIECE;
            let mut total = 0u64;
            let mut distinct = 0u64;
            for (key, &a) in &self.adjusted[n - 1] {
                if n == 1 && key[0] == bos {
                    continue;
                }
                if &key[..n - 1] == ctx {
                    total += a;
                    distinct += 1;
                }
            }
            (total as f64, distinct as f64)
        }

        /// Same padding and growing-context scheme as the implementation.
        fn sentence_log10(&self, sentence: &[String]) -> f64 {
            let bos = BOS_PIECE.to_string();
            let eos = EOS_PIECE.to_string();
            let mut padded = vec![bos];
            let known: Vec<String> = sentence
                .iter()
                .map(|t| {
                    if self.pred_vocab.contains(t) {
                        t.clone()
                    } else {
                        UNK_PIECE.to_string()
                    }
                })
                .collect();
            padded.extend(known);
            let mut total = 0.0;
            for i in 1..=padded.len() {
                let word = if i == padded.len() { &eos } else { &padded[i] };
                let lo = i.saturating_sub(self.order - 1).min(i);
                total += self.prob(&padded[lo..i], word).log10();
            }
            total
        }

        fn perplexity(&self, corpus: &[Vec<String>]) -> f64 {
            let mut log10 = 0.0;
            let mut tokens = 0usize;
            for s in corpus {
                if s.is_empty() {
                    continue;
                }
                log10 += self.sentence_log10(s);
                tokens += s.len() + 1;
            }
            10f64.powf(-log10 / tokens as f64)
        }
    }

    fn toy_corpus(seed: u64, sentences: usize) -> Vec<Vec<String>> {
        const WORDS: &[&str] = &["a", "b", "c", "d", "e", "f"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sentences)
            .map(|_| {
                let len = rng.gen_range(1..8);
                (0..len)
                    .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_type_corpus_has_positive_eos_probability() {
        let corpus = vec![toks("a a a")];
        let model = NGramModel::train_tokens(&corpus, 1).unwrap();
        let p_a = 10f64.powf(model.logprob10(&[], model.id("a")));
        let p_eos = 10f64.powf(model.logprob10(&[], EOS));
        assert!(p_a > p_eos, "p(a)={p_a} should dominate p(EOS)={p_eos}");
        assert!(p_eos > 0.0);
    }

    #[test]
    fn bigram_contexts_are_normalized() {
        let corpus = vec![toks("a b"), toks("b a")];
        let model = NGramModel::train_tokens(&corpus, 2).unwrap();
        assert!(model.max_normalization_error() < 1e-6);
    }

    #[test]
    fn normalization_exhaustive_on_random_corpora() {
        for seed in [1, 2, 3] {
            let corpus = toy_corpus(seed, 60);
            for order in [1, 2, 3] {
                let model = NGramModel::train_tokens(&corpus, order).unwrap();
                let err = model.max_normalization_error();
                assert!(err < 1e-6, "seed {seed} order {order}: error {err}");
            }
        }
    }

    #[test]
    fn perplexity_matches_direct_summation_oracle() {
        let corpus = toy_corpus(9, 100);
        let model = NGramModel::train_tokens(&corpus, 3).unwrap();
        let oracle = KnOracle::build(&corpus, 3);
        let pp_model = model.perplexity(&corpus);
        let pp_oracle = oracle.perplexity(&corpus);
        let rel = (pp_model - pp_oracle).abs() / pp_oracle;
        assert!(
            rel < 1e-9,
            "model pp {pp_model} vs oracle pp {pp_oracle} (rel {rel})"
        );
    }

    #[test]
    fn fully_oov_sentence_scores_finite() {
        let corpus = toy_corpus(5, 30);
        let model = NGramModel::train_tokens(&corpus, 3).unwrap();
        let score = model.score_tokens(&toks("zz qq ww")).unwrap();
        assert!(score.is_finite());
    }

    #[test]
    fn empty_sentence_is_an_error() {
        let corpus = toy_corpus(5, 10);
        let model = NGramModel::train_tokens(&corpus, 2).unwrap();
        assert!(matches!(
            model.score_tokens::<String>(&[]),
            Err(LmError::EmptySentence)
        ));
    }

    #[test]
    fn in_domain_beats_gibberish() {
        let mut corpus = Vec::new();
        for _ in 0..50 {
            corpus.push(toks("the cat sat on the mat"));
            corpus.push(toks("the dog sat on the rug"));
        }
        let model = NGramModel::train_tokens(&corpus, 3).unwrap();
        let in_domain = model.score_tokens(&toks("the cat sat on the rug")).unwrap();
        let gibberish = model.score_tokens(&toks("7 7 3 9 1 4 4")).unwrap();
        assert!(in_domain > gibberish);
    }

    #[test]
    fn most_frequent_training_sentence_scores_highest() {
        let mut corpus = vec![toks("b c"), toks("c a"), toks("a b c")];
        for _ in 0..40 {
            corpus.push(toks("a b"));
        }
        let model = NGramModel::train_tokens(&corpus, 2).unwrap();
        let mut scored: Vec<(f64, String)> = corpus
            .iter()
            .map(|s| {
                (
                    model.score_tokens(s).unwrap(),
                    s.join(" "),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        assert_eq!(scored[0].1, "a b");
    }

    #[test]
    fn score_invariant_under_vocab_relabeling() {
        let corpus = toy_corpus(21, 40);
        let model = NGramModel::train_tokens(&corpus, 3).unwrap();
        // permute token names consistently
        let relabel = |t: &str| format!("w{t}");
        let relabeled: Vec<Vec<String>> = corpus
            .iter()
            .map(|s| s.iter().map(|t| relabel(t)).collect())
            .collect();
        let model2 = NGramModel::train_tokens(&relabeled, 3).unwrap();
        for s in corpus.iter().take(10) {
            let s2: Vec<String> = s.iter().map(|t| relabel(t)).collect();
            let a = model.score_tokens(s).unwrap();
            let b = model2.score_tokens(&s2).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn arpa_roundtrip_is_bit_exact() {
        let corpus = toy_corpus(33, 50);
        let model = NGramModel::train_tokens(&corpus, 3).unwrap();
        let first = model.to_arpa();
        let reread = NGramModel::from_arpa(&first).unwrap();
        let second = reread.to_arpa();
        assert_eq!(first, second);
        // and the reread model scores identically
        for s in corpus.iter().take(5) {
            assert_eq!(
                model.score_tokens(s).unwrap().to_bits(),
                reread.score_tokens(s).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn empty_corpus_and_bad_order_are_errors() {
        assert!(matches!(
            NGramModel::train_tokens::<String>(&[], 3),
            Err(LmError::EmptyCorpus)
        ));
        assert!(matches!(
            NGramModel::train_tokens(&[toks("a")], 0),
            Err(LmError::InvalidOrder(0))
        ));
    }

    fn labeled(bad: &[f64], good: &[f64]) -> Vec<LabeledScore> {
        bad.iter()
            .map(|&score| LabeledScore {
                score,
                label: Label::Bad,
            })
            .chain(good.iter().map(|&score| LabeledScore {
                score,
                label: Label::Good,
            }))
            .collect()
    }

    #[test]
    fn calibration_separable_case() {
        let samples = labeled(&[-5.0, -4.0, -3.0], &[-2.0, -1.0]);
        let t = calibrate_threshold(&samples, 0.7).unwrap();
        assert!(t.cutoff > -3.0 && t.cutoff <= -2.0, "cutoff {}", t.cutoff);
        assert_eq!(t.achieved_bad_removed, 1.0);
        assert_eq!(t.achieved_good_retained, 1.0);
    }

    #[test]
    fn calibration_interleaved_case() {
        let samples = labeled(&[-5.0, -1.0], &[-4.0, -2.0]);
        let t = calibrate_threshold(&samples, 0.5).unwrap();
        assert!(t.cutoff > -5.0 && t.cutoff <= -4.0, "cutoff {}", t.cutoff);
        assert_eq!(t.achieved_bad_removed, 0.5);
        assert_eq!(t.achieved_good_retained, 1.0);
    }

    #[test]
    fn calibration_target_one_removes_all_bad() {
        let samples = labeled(&[-5.0, -2.0], &[-3.0, -1.0]);
        let t = calibrate_threshold(&samples, 1.0).unwrap();
        assert!(t.cutoff > -2.0);
        assert_eq!(t.achieved_bad_removed, 1.0);
    }

    #[test]
    fn calibration_errors() {
        let samples = labeled(&[-1.0], &[]);
        assert!(matches!(
            calibrate_threshold(&samples, 0.5),
            Err(LmError::NeedBothLabels)
        ));
        let samples = labeled(&[-1.0], &[-2.0]);
        assert!(matches!(
            calibrate_threshold(&samples, 0.0),
            Err(LmError::BadTarget(_))
        ));
        assert!(matches!(
            calibrate_threshold(&samples, 1.5),
            Err(LmError::BadTarget(_))
        ));
    }

    /// Literal scan over every candidate cutoff, used as the calibration
    /// oracle.
    fn brute_force_calibrate(samples: &[LabeledScore], target: f64) -> Threshold {
        let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores.dedup();
        let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
        candidates.extend(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        let bad_total = samples.iter().filter(|s| s.label == Label::Bad).count() as f64;
        let good_total = samples.len() as f64 - bad_total;
        let mut best: Option<Threshold> = None;
        for &cutoff in &candidates {
            let bad_removed = samples
                .iter()
                .filter(|s| s.label == Label::Bad && s.score < cutoff)
                .count() as f64
                / bad_total;
            if bad_removed < target {
                continue;
            }
            let good_retained = samples
                .iter()
                .filter(|s| s.label == Label::Good && s.score >= cutoff)
                .count() as f64
                / good_total;
            let total_retained = samples.iter().filter(|s| s.score >= cutoff).count() as f64
                / samples.len() as f64;
            let better = match &best {
                None => true,
                Some(b) => {
                    good_retained > b.achieved_good_retained
                        || (good_retained == b.achieved_good_retained && cutoff < b.cutoff)
                }
            };
            if better {
                best = Some(Threshold {
                    cutoff,
                    achieved_bad_removed: bad_removed,
                    achieved_good_retained: good_retained,
                    achieved_total_retained: total_retained,
                });
            }
        }
        best.expect("+inf is always feasible")
    }

    proptest! {
        #[test]
        fn calibration_matches_bruteforce(
            bad in proptest::collection::vec(-100i32..100, 1..25),
            good in proptest::collection::vec(-100i32..100, 1..25),
            target_pct in 1u32..=100,
        ) {
            let samples = labeled(
                &bad.iter().map(|&x| x as f64 / 7.0).collect::<Vec<_>>(),
                &good.iter().map(|&x| x as f64 / 7.0).collect::<Vec<_>>(),
            );
            let target = target_pct as f64 / 100.0;
            let fast = calibrate_threshold(&samples, target).unwrap();
            let slow = brute_force_calibrate(&samples, target);
            prop_assert_eq!(fast.achieved_bad_removed, slow.achieved_bad_removed);
            prop_assert_eq!(fast.achieved_good_retained, slow.achieved_good_retained);
            prop_assert_eq!(fast.achieved_total_retained, slow.achieved_total_retained);
            prop_assert!(fast.achieved_bad_removed >= target);
            prop_assert_eq!(fast.cutoff, slow.cutoff);
        }
    }

    #[test]
    fn filter_keeps_scores_at_or_above_cutoff_and_is_idempotent() {
        use crate::corpus::Sentence;
        let lines = ["abab abab", "ab ab abab", "abab", "ab"];
        let train: Vec<&str> = lines.iter().cycle().take(200).copied().collect();
        let spm = crate::subword::train_unigram(train.clone(), 12, 3).unwrap();
        let encoded: Vec<Vec<u32>> = train.iter().map(|l| spm.encode(l)).collect();
        let model = NGramModel::train_ids(&encoded, &spm, 3).unwrap();

        let stream: Vec<Sentence> = ["abab abab", "ab", "zzz qqq", "abab"]
            .iter()
            .map(|s| Sentence::new(*s))
            .collect();
        let scores: Vec<f64> = stream
            .iter()
            .map(|s| {
                let ids = spm.encode(&s.text);
                model.score_ids(&ids, &spm).unwrap()
            })
            .collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cutoff = (sorted[0] + sorted[1]) / 2.0; // drop exactly the worst
        let threshold = Threshold {
            cutoff,
            achieved_bad_removed: 1.0,
            achieved_good_retained: 1.0,
            achieved_total_retained: 0.75,
        };
        let (kept, stats) = filter_mono(
            stream.clone(),
            &model,
            &spm,
            &threshold,
            ScoreMode::Normalized,
        );
        assert_eq!(stats.lines_in, 4);
        assert_eq!(kept.len(), 3);
        assert!(!kept.iter().any(|s| s.text == "zzz qqq"));

        let (again, stats2) = filter_mono(kept.clone(), &model, &spm, &threshold, ScoreMode::Normalized);
        assert_eq!(again, kept);
        assert_eq!(stats2.rejected_total(), 0);
    }

    #[test]
    fn empty_stream_filters_to_empty() {
        let corpus = toy_corpus(2, 10);
        let model = NGramModel::train_tokens(&corpus, 2).unwrap();
        let lines = ["a b c"];
        let spm = crate::subword::train_unigram(lines, 12, 2).unwrap();
        let threshold = Threshold {
            cutoff: 0.0,
            achieved_bad_removed: 1.0,
            achieved_good_retained: 1.0,
            achieved_total_retained: 1.0,
        };
        let (kept, stats) = filter_mono(vec![], &model, &spm, &threshold, ScoreMode::Normalized);
        assert!(kept.is_empty());
        assert_eq!(stats.lines_in, 0);
    }
}
