//! Unigram subword model: training by hard (Viterbi) EM with loss-based
//! pruning, maximum-probability encoding, and lossless decoding.
//!
//! Words are prefixed with the `▁` boundary marker before segmentation, so
//! decoding is plain concatenation with `▁` mapped back to a space. The
//! first six IDs are reserved: UNK, BOS, EOS, and the direction tags
//! `2he` / `2en` / `2syn`. Tag words encode to their reserved IDs and are
//! never produced by segmenting ordinary text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const TAG_2HE_ID: u32 = 3;
pub const TAG_2EN_ID: u32 = 4;
pub const TAG_2SYN_ID: u32 = 5;

pub const UNK_PIECE: &str = "<unk>";
pub const BOS_PIECE: &str = "<s>";
pub const EOS_PIECE: &str = "</s>";
pub const SPECIAL_PIECES: [&str; 6] = [UNK_PIECE, BOS_PIECE, EOS_PIECE, "2he", "2en", "2syn"];
pub const DIRECTION_TAGS: [&str; 3] = ["2he", "2en", "2syn"];

/// Word-boundary marker (U+2581), prepended to every word.
pub const WORD_BOUNDARY: char = '\u{2581}';

const UNK_PENALTY: f64 = 10.0;
const EM_ITERS_PER_ROUND: usize = 2;
const PRUNE_FRACTION: f64 = 0.2;
/// Pseudo-count floor keeping required single-character pieces finite.
const CHAR_FLOOR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab size {requested} is below the floor of {floor} (specials + single characters)")]
    VocabTooSmall { requested: usize, floor: usize },
    #[error("piece ID {0} is outside the model")]
    UnknownId(u32),
    #[error("malformed model file: {0}")]
    MalformedModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum PieceKind {
    /// Single character observed in training data; never pruned.
    Char,
    /// Learned multi-character piece.
    Learned,
}

#[derive(Debug, Clone)]
struct Piece {
    text: String,
    logprob: f64,
}

/// A trained unigram piece inventory with log-probabilities.
#[derive(Debug, Clone)]
pub struct SubwordModel {
    pieces: Vec<Piece>,
    lookup: HashMap<String, u32>,
    max_piece_chars: usize,
    unk_logprob: f64,
}

/// Corpus log-likelihood per EM iteration, grouped by pruning round.
#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    pub rounds: Vec<Vec<f64>>,
}

impl TrainingTrace {
    /// True when every round's log-likelihood is non-decreasing within
    /// `rel_tol` relative tolerance.
    pub fn is_monotone(&self, rel_tol: f64) -> bool {
        self.rounds.iter().all(|round| {
            round.windows(2).all(|w| {
                let slack = w[0].abs().max(1.0) * rel_tol;
                w[1] >= w[0] - slack
            })
        })
    }
}

fn marked_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| format!("{WORD_BOUNDARY}{w}"))
}

/// Mutable training state over a fixed candidate piece set.
struct Trainer {
    texts: Vec<String>,
    kinds: Vec<PieceKind>,
    logprobs: Vec<f64>,
    lookup: HashMap<String, usize>,
    max_chars: usize,
    /// (word chars, frequency), sorted by word for determinism
    words: Vec<(Vec<char>, u64)>,
}

impl Trainer {
    /// Viterbi segmentation of `chars[..]` using current logprobs, with
    /// piece `skip` treated as absent. Returns (piece indices, score), or
    /// None when no finite-score path exists.
    fn viterbi(&self, chars: &[char], skip: Option<usize>) -> Option<(Vec<usize>, f64)> {
        let n = chars.len();
        if n == 0 {
            return Some((Vec::new(), 0.0));
        }
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back: Vec<Option<(usize, usize)>> = vec![None; n + 1];
        best[0] = 0.0;
        let mut buf = String::new();
        for end in 1..=n {
            let lo = end.saturating_sub(self.max_chars);
            for start in lo..end {
                if !best[start].is_finite() {
                    continue;
                }
                buf.clear();
                buf.extend(&chars[start..end]);
                let Some(&idx) = self.lookup.get(buf.as_str()) else {
                    continue;
                };
                if skip == Some(idx) {
                    continue;
                }
                let lp = self.logprobs[idx];
                if !lp.is_finite() {
                    continue;
                }
                let score = best[start] + lp;
                if score > best[end] {
                    best[end] = score;
                    back[end] = Some((start, idx));
                }
            }
        }
        if !best[n].is_finite() {
            return None;
        }
        let mut ids = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let (start, idx) = back[pos].expect("finite path has backpointers");
            ids.push(idx);
            pos = start;
        }
        ids.reverse();
        Some((ids, best[n]))
    }

    /// One hard-EM iteration: Viterbi E-step, exact ML M-step.
    /// Returns (corpus log-likelihood under the pre-update parameters,
    /// per-piece usage counts).
    fn em_iteration(&mut self) -> (f64, Vec<f64>) {
        let mut counts = vec![0.0f64; self.texts.len()];
        let mut ll = 0.0;
        for (chars, freq) in &self.words {
            let (ids, score) = self
                .viterbi(chars, None)
                .expect("training words always have a finite path");
            ll += score * *freq as f64;
            for idx in ids {
                counts[idx] += *freq as f64;
            }
        }
        let total: f64 = counts.iter().sum();
        for (lp, &c) in self.logprobs.iter_mut().zip(&counts) {
            *lp = if c > 0.0 { (c / total).ln() } else { f64::NEG_INFINITY };
        }
        (ll, counts)
    }

    /// Restores a proper, fully-finite distribution at the start of a
    /// round: pieces unused in the last E-step get a small pseudo-count.
    fn reseed_distribution(&mut self, counts: &[f64]) {
        let mut probs: Vec<f64> = counts
            .iter()
            .map(|&c| if c > 0.0 { c } else { CHAR_FLOOR })
            .collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        self.logprobs = probs.into_iter().map(|p| p.ln()).collect();
    }

    fn remove_pieces(&mut self, to_remove: &[usize]) {
        let remove: std::collections::HashSet<usize> = to_remove.iter().copied().collect();
        let mut texts = Vec::with_capacity(self.texts.len() - remove.len());
        let mut kinds = Vec::with_capacity(texts.capacity());
        let mut logprobs = Vec::with_capacity(texts.capacity());
        for i in 0..self.texts.len() {
            if remove.contains(&i) {
                continue;
            }
            texts.push(std::mem::take(&mut self.texts[i]));
            kinds.push(self.kinds[i]);
            logprobs.push(self.logprobs[i]);
        }
        self.texts = texts;
        self.kinds = kinds;
        self.logprobs = logprobs;
        self.lookup = self
            .texts
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.max_chars = self.texts.iter().map(|t| t.chars().count()).max().unwrap_or(1);
    }
}

/// Trains a unigram subword model.
///
/// The seed vocabulary holds every observed character plus the most
/// frequent substrings up to `seed_max_len` characters, capped at four
/// times `vocab_size`. Each round runs two hard-EM iterations and then
/// prunes the 20% of learned pieces with the lowest likelihood loss
/// (never single characters) until `vocab_size` pieces remain.
pub fn train_unigram<'a, I>(
    corpus: I,
    vocab_size: usize,
    seed_max_len: usize,
) -> Result<SubwordModel, SubwordError>
where
    I: IntoIterator<Item = &'a str>,
{
    train_unigram_traced(corpus, vocab_size, seed_max_len).map(|(model, _)| model)
}

/// As [`train_unigram`], also returning the per-iteration log-likelihood
/// trace used by the EM-monotonicity checks.
pub fn train_unigram_traced<'a, I>(
    corpus: I,
    vocab_size: usize,
    seed_max_len: usize,
) -> Result<(SubwordModel, TrainingTrace), SubwordError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for w in marked_words(line) {
            *word_counts.entry(w).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }

    // substring counts, orders 1..=seed_max_len
    let mut substr_counts: HashMap<String, u64> = HashMap::new();
    for (word, freq) in &word_counts {
        let chars: Vec<char> = word.chars().collect();
        for len in 1..=seed_max_len.max(1) {
            if len > chars.len() {
                break;
            }
            for win in chars.windows(len) {
                *substr_counts.entry(win.iter().collect()).or_insert(0) += freq;
            }
        }
    }

    let mut chars: Vec<(String, u64)> = Vec::new();
    let mut multi: Vec<(String, u64)> = Vec::new();
    for (s, c) in substr_counts {
        if s.chars().count() == 1 {
            chars.push((s, c));
        } else {
            multi.push((s, c));
        }
    }
    let floor = SPECIAL_PIECES.len() + chars.len();
    if vocab_size < floor {
        return Err(SubwordError::VocabTooSmall {
            requested: vocab_size,
            floor,
        });
    }

    // keep the most frequent substrings, capped at 4x the target size
    multi.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let budget = (4 * vocab_size).saturating_sub(floor);
    multi.truncate(budget);
    chars.sort_by(|a, b| a.0.cmp(&b.0));

    let mut texts = Vec::with_capacity(chars.len() + multi.len());
    let mut kinds = Vec::with_capacity(texts.capacity());
    let mut seed_counts = Vec::with_capacity(texts.capacity());
    for (s, c) in chars {
        texts.push(s);
        kinds.push(PieceKind::Char);
        seed_counts.push(c as f64);
    }
    for (s, c) in multi {
        texts.push(s);
        kinds.push(PieceKind::Learned);
        seed_counts.push(c as f64);
    }
    let total: f64 = seed_counts.iter().sum();
    let logprobs: Vec<f64> = seed_counts.iter().map(|c| (c / total).ln()).collect();
    let lookup = texts
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    let max_chars = texts.iter().map(|t| t.chars().count()).max().unwrap_or(1);

    let mut words: Vec<(Vec<char>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.chars().collect(), c))
        .collect();
    words.sort();

    let mut trainer = Trainer {
        texts,
        kinds,
        logprobs,
        lookup,
        max_chars,
        words,
    };

    let target_scored = vocab_size - SPECIAL_PIECES.len();
    let mut trace = TrainingTrace::default();
    let mut last_counts;
    loop {
        let mut round_ll = Vec::with_capacity(EM_ITERS_PER_ROUND);
        let mut counts = Vec::new();
        for _ in 0..EM_ITERS_PER_ROUND {
            let (ll, c) = trainer.em_iteration();
            round_ll.push(ll);
            counts = c;
        }
        trace.rounds.push(round_ll);
        last_counts = counts;

        let excess = trainer.texts.len().saturating_sub(target_scored);
        if excess == 0 {
            break;
        }
        // rank learned pieces by likelihood loss if removed
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for idx in 0..trainer.texts.len() {
            if trainer.kinds[idx] != PieceKind::Learned {
                continue;
            }
            let usage = last_counts[idx];
            let loss = if usage == 0.0 {
                0.0
            } else {
                let own = trainer.logprobs[idx];
                let chars: Vec<char> = trainer.texts[idx].chars().collect();
                match trainer.viterbi(&chars, Some(idx)) {
                    Some((_, alt)) => usage * (own - alt),
                    None => f64::INFINITY,
                }
            };
            candidates.push((loss, idx));
        }
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("losses are never NaN")
                .then_with(|| trainer.texts[a.1].cmp(&trainer.texts[b.1]))
        });
        let prune_n = ((trainer.texts.len() as f64 * PRUNE_FRACTION) as usize)
            .clamp(1, excess)
            .min(candidates.len());
        if prune_n == 0 {
            break; // nothing prunable: every remaining piece is a single char
        }
        let removed: Vec<usize> = candidates[..prune_n].iter().map(|&(_, i)| i).collect();
        let keep_counts: Vec<f64> = (0..trainer.texts.len())
            .filter(|i| !removed.contains(i))
            .map(|i| last_counts[i])
            .collect();
        trainer.remove_pieces(&removed);
        trainer.reseed_distribution(&keep_counts);
    }

    // final renormalization: floor single-character pieces so the full
    // training charset stays encodable, then convert counts to logprobs
    let floored: Vec<f64> = last_counts
        .iter()
        .zip(&trainer.kinds)
        .map(|(&c, &k)| {
            if c > 0.0 {
                c
            } else if k == PieceKind::Char {
                CHAR_FLOOR
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = floored.iter().sum();
    let mut scored: Vec<Piece> = trainer
        .texts
        .iter()
        .zip(&trainer.kinds)
        .zip(&floored)
        .map(|((text, _), &c)| Piece {
            text: text.clone(),
            logprob: if c > 0.0 { (c / total).ln() } else { f64::NEG_INFINITY },
        })
        .collect();
    scored.sort_by(|a, b| {
        b.logprob
            .partial_cmp(&a.logprob)
            .expect("logprobs are never NaN")
            .then_with(|| a.text.cmp(&b.text))
    });

    Ok((SubwordModel::from_scored_pieces(scored), trace))
}

impl SubwordModel {
    fn from_scored_pieces(scored: Vec<Piece>) -> Self {
        let mut pieces: Vec<Piece> = SPECIAL_PIECES
            .iter()
            .map(|s| Piece {
                text: s.to_string(),
                logprob: 0.0,
            })
            .collect();
        pieces.extend(scored);
        let lookup = pieces
            .iter()
            .enumerate()
            .skip(SPECIAL_PIECES.len())
            .map(|(i, p)| (p.text.clone(), i as u32))
            .collect();
        let max_piece_chars = pieces
            .iter()
            .skip(SPECIAL_PIECES.len())
            .map(|p| p.text.chars().count())
            .max()
            .unwrap_or(1);
        let min_finite = pieces
            .iter()
            .skip(SPECIAL_PIECES.len())
            .map(|p| p.logprob)
            .filter(|lp| lp.is_finite())
            .fold(f64::INFINITY, f64::min);
        SubwordModel {
            pieces,
            lookup,
            max_piece_chars,
            unk_logprob: min_finite - UNK_PENALTY,
        }
    }

    /// Total number of pieces, specials included.
    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(|p| p.text.as_str())
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.lookup.get(piece).copied()
    }

    pub fn logprob(&self, id: u32) -> Option<f64> {
        self.pieces.get(id as usize).map(|p| p.logprob)
    }

    /// Scored (non-special) pieces as (id, text, logprob).
    pub fn scored_pieces(&self) -> impl Iterator<Item = (u32, &str, f64)> {
        self.pieces
            .iter()
            .enumerate()
            .skip(SPECIAL_PIECES.len())
            .map(|(i, p)| (i as u32, p.text.as_str(), p.logprob))
    }

    /// Sum of piece probabilities; 1.0 for a well-formed model.
    pub fn total_probability(&self) -> f64 {
        self.scored_pieces().map(|(_, _, lp)| lp.exp()).sum()
    }

    /// Viterbi-segments one marker-prefixed word. Characters absent from
    /// the inventory become UNK at a fixed penalty below the worst piece.
    pub fn segment_word(&self, marked_word: &str) -> (Vec<u32>, f64) {
        let chars: Vec<char> = marked_word.chars().collect();
        let n = chars.len();
        if n == 0 {
            return (Vec::new(), 0.0);
        }
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back: Vec<(usize, u32)> = vec![(0, UNK_ID); n + 1];
        best[0] = 0.0;
        let mut buf = String::new();
        for end in 1..=n {
            // UNK covers exactly one character
            let unk_score = best[end - 1] + self.unk_logprob;
            if unk_score > best[end] {
                best[end] = unk_score;
                back[end] = (end - 1, UNK_ID);
            }
            let lo = end.saturating_sub(self.max_piece_chars);
            for start in lo..end {
                if !best[start].is_finite() {
                    continue;
                }
                buf.clear();
                buf.extend(&chars[start..end]);
                if let Some(&id) = self.lookup.get(buf.as_str()) {
                    let lp = self.pieces[id as usize].logprob;
                    if !lp.is_finite() {
                        continue;
                    }
                    let score = best[start] + lp;
                    if score > best[end] {
                        best[end] = score;
                        back[end] = (start, id);
                    }
                }
            }
        }
        let mut ids = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let (start, id) = back[pos];
            ids.push(id);
            pos = start;
        }
        ids.reverse();
        (ids, best[n])
    }

    /// Encodes text to piece IDs. Words equal to a direction tag map to
    /// their reserved ID; everything else is marker-prefixed and
    /// Viterbi-segmented.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            if let Some(tag_idx) = DIRECTION_TAGS.iter().position(|t| *t == word) {
                ids.push(TAG_2HE_ID + tag_idx as u32);
                continue;
            }
            let marked = format!("{WORD_BOUNDARY}{word}");
            let (word_ids, _) = self.segment_word(&marked);
            ids.extend(word_ids);
        }
        ids
    }

    /// Inverse of [`encode`] on trained-charset text: concatenates pieces
    /// and turns boundary markers back into spaces. UNK decodes to
    /// `<unk>`. Direction tags are followed by a space when more pieces
    /// follow.
    pub fn decode(&self, ids: &[u32]) -> Result<String, SubwordError> {
        let mut out = String::new();
        for &id in ids {
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or(SubwordError::UnknownId(id))?;
            if (TAG_2HE_ID..=TAG_2SYN_ID).contains(&id) && !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&piece.text);
        }
        let replaced: String = out
            .chars()
            .map(|c| if c == WORD_BOUNDARY { ' ' } else { c })
            .collect();
        Ok(replaced.trim_start().to_string())
    }

    /// Serializes as a JSON header line (specials) followed by
    /// `piece \t logprob` lines in ID order.
    pub fn to_model_string(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            specials: &'a [&'a str],
            word_boundary: char,
        }
        let header = serde_json::to_string(&Header {
            specials: &SPECIAL_PIECES,
            word_boundary: WORD_BOUNDARY,
        })
        .expect("header serializes");
        let mut out = String::new();
        out.push_str(&header);
        out.push('\n');
        for (_, text, lp) in self.scored_pieces() {
            out.push_str(text);
            out.push('\t');
            out.push_str(&format!("{lp}"));
            out.push('\n');
        }
        out
    }

    pub fn from_model_string(data: &str) -> Result<Self, SubwordError> {
        #[derive(Deserialize)]
        struct Header {
            specials: Vec<String>,
        }
        let mut lines = data.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| SubwordError::MalformedModel("empty file".into()))?;
        let header: Header = serde_json::from_str(header_line)
            .map_err(|e| SubwordError::MalformedModel(format!("bad header: {e}")))?;
        if header.specials != SPECIAL_PIECES {
            return Err(SubwordError::MalformedModel(
                "special piece list does not match this version".into(),
            ));
        }
        let mut scored = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (text, lp) = line.split_once('\t').ok_or_else(|| {
                SubwordError::MalformedModel(format!("line {}: missing tab", i + 2))
            })?;
            let logprob: f64 = lp.parse().map_err(|_| {
                SubwordError::MalformedModel(format!("line {}: bad logprob {lp:?}", i + 2))
            })?;
            scored.push(Piece {
                text: text.to_string(),
                logprob,
            });
        }
        Ok(SubwordModel::from_scored_pieces(scored))
    }
}
