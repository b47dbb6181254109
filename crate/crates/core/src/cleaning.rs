//! Bitext cleaning: normalization, tokenization, and the three-step filter
//! stack (length / overlap / ratio / dedup, then off-target and ambiguous
//! mappings).
//!
//! Normalization and tokenization follow an explicit fixed rule table (see
//! the guide's "Cleaning rules" chapter) rather than reproducing any
//! particular toolkit bug-for-bug. All numeric filters use strict
//! inequalities: a pair is rejected only when it is *longer than*, *over*,
//! or *exceeding* its threshold.

use std::collections::HashMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{SentencePair, StageStats};
use crate::langid::{self, LangProfileSet};

#[derive(Debug, Error)]
pub enum CleanError {
    #[error("pair is missing tokens on the {0} side; tokenize first")]
    MissingTokens(&'static str),
    #[error("pair has an empty {0} side")]
    EmptySide(&'static str),
    #[error("no language profile for expected language {0:?}")]
    UnknownLanguage(String),
}

/// Thresholds for the step-2/step-3 filters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanConfig {
    pub max_tokens: usize,
    pub overlap_threshold: f64,
    pub max_ratio: f64,
    pub ratio_symmetric: bool,
    /// Expected (source, target) language codes for the off-target filter.
    pub expected_langs: (String, String),
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            max_tokens: 256,
            overlap_threshold: 0.75,
            max_ratio: 1.5,
            ratio_symmetric: true,
            expected_langs: ("en".to_string(), "he".to_string()),
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_tokens == 0 {
            return Err("max_tokens must be > 0".into());
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err("overlap_threshold must be in (0, 1]".into());
        }
        if self.max_ratio < 1.0 {
            return Err("max_ratio must be >= 1".into());
        }
        Ok(())
    }
}

/// Why a pair was dropped. `as_str` values key the manifest's rejection map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    Empty,
    Length,
    Overlap,
    Ratio,
    Dedup,
    Ambiguous,
    Offtarget,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Empty => "empty",
            RejectReason::Length => "length",
            RejectReason::Overlap => "overlap",
            RejectReason::Ratio => "ratio",
            RejectReason::Dedup => "dedup",
            RejectReason::Ambiguous => "ambiguous",
            RejectReason::Offtarget => "offtarget",
        }
    }
}

/// Outcome of a per-pair filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

// Unicode Cf (format) character ranges, fixed table. Cc is covered by
// char::is_control.
const FORMAT_RANGES: &[(u32, u32)] = &[
    (0x00AD, 0x00AD),
    (0x0600, 0x0605),
    (0x061C, 0x061C),
    (0x06DD, 0x06DD),
    (0x070F, 0x070F),
    (0x0890, 0x0891),
    (0x08E2, 0x08E2),
    (0x180E, 0x180E),
    (0x200B, 0x200F),
    (0x202A, 0x202E),
    (0x2060, 0x2064),
    (0x2066, 0x206F),
    (0xFEFF, 0xFEFF),
    (0xFFF9, 0xFFFB),
    (0x110BD, 0x110BD),
    (0x110CD, 0x110CD),
    (0x13430, 0x1343F),
    (0x1BCA0, 0x1BCA3),
    (0x1D173, 0x1D17A),
    (0xE0001, 0xE0001),
    (0xE0020, 0xE007F),
];

fn is_format_char(c: char) -> bool {
    let cp = c as u32;
    FORMAT_RANGES
        .iter()
        .any(|&(lo, hi)| cp >= lo && cp <= hi)
}

/// Punctuation normalization table: curly/angle quotes to straight quotes,
/// dash variants to ASCII hyphen, ellipsis to three dots, NBSP to space.
/// Outputs are never inputs of the table, which keeps `normalize` idempotent.
fn normalize_punct(c: char) -> Option<&'static str> {
    Some(match c {
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2039}' | '\u{203A}' => "'",
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{00AB}' | '\u{00BB}' => "\"",
        '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' | '\u{2015}' => "-",
        '\u{2026}' => "...",
        '\u{00A0}' => " ",
        _ => return None,
    })
}

/// Decodes the five named XML entities plus numeric character references.
/// Runs to a fixpoint so nested escapes ("&amp;amp;") collapse fully; this
/// is what makes `normalize` idempotent. Invalid references pass through.
fn decode_entities(text: &str) -> String {
    let mut cur = text.to_string();
    loop {
        let next = decode_entities_once(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn decode_entities_once(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'&' {
            let ch_len = utf8_len(bytes[i]);
            out.push_str(&text[i..i + ch_len]);
            i += ch_len;
            continue;
        }
        // find terminating ';' within a short window
        let window_end = (i + 12).min(bytes.len());
        let semi = (i + 1..window_end).find(|&j| bytes[j] == b';');
        let Some(semi) = semi else {
            out.push('&');
            i += 1;
            continue;
        };
        let body = &text[i + 1..semi];
        let decoded: Option<String> = match body {
            "amp" => Some("&".to_string()),
            "lt" => Some("<".to_string()),
            "gt" => Some(">".to_string()),
            "quot" => Some("\"".to_string()),
            "apos" => Some("'".to_string()),
            _ => decode_numeric_entity(body),
        };
        match decoded {
            Some(s) => {
                out.push_str(&s);
                i = semi + 1;
            }
            None => {
                out.push('&');
                i += 1;
            }
        }
    }
    out
}

fn decode_numeric_entity(body: &str) -> Option<String> {
    let rest = body.strip_prefix('#')?;
    let cp = if let Some(hex) = rest.strip_prefix(['x', 'X']) {
        if hex.is_empty() {
            return None;
        }
        u32::from_str_radix(hex, 16).ok()?
    } else {
        if rest.is_empty() {
            return None;
        }
        rest.parse::<u32>().ok()?
    };
    char::from_u32(cp).map(|c| c.to_string())
}

fn utf8_len(first_byte: u8) -> usize {
    match first_byte {
        b if b < 0x80 => 1,
        b if b >= 0xF0 => 4,
        b if b >= 0xE0 => 3,
        _ => 2,
    }
}

/// Cleaning Step 1 normalization: XML entity decoding, control/format
/// character removal, punctuation normalization, whitespace collapsing.
/// Total and idempotent.
pub fn normalize(text: &str) -> String {
    let decoded = decode_entities(text);
    let mut cleaned = String::with_capacity(decoded.len());
    for c in decoded.chars() {
        if c.is_control() || is_format_char(c) {
            cleaned.push(' ');
        } else if let Some(rep) = normalize_punct(c) {
            cleaned.push_str(rep);
        } else {
            cleaned.push(c);
        }
    }
    let mut out = String::with_capacity(cleaned.len());
    for word in cleaned.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

fn is_protected(c: char, prev: Option<char>, next: Option<char>) -> bool {
    match c {
        '.' => {
            prev.map_or(false, |p| p.is_numeric()) && next.map_or(false, |n| n.is_numeric())
        }
        '\'' | '-' => {
            prev.map_or(false, |p| p.is_alphabetic())
                && next.map_or(false, |n| n.is_alphabetic())
        }
        _ => false,
    }
}

/// Splits normalized text into tokens: whitespace-separated words with
/// punctuation detached, except decimal points between digits and
/// apostrophes/hyphens between letters. Runs of the same punctuation
/// character stay together ("..." is one token).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut current = String::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let prev = if i > 0 { Some(chars[i - 1]) } else { None };
            let next = chars.get(i + 1).copied();
            if c.is_alphanumeric() || is_protected(c, prev, next) {
                current.push(c);
                i += 1;
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                let mut run = String::from(c);
                let mut j = i + 1;
                while j < chars.len() && chars[j] == c {
                    run.push(c);
                    j += 1;
                }
                tokens.push(run);
                i = j;
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Normalizes and tokenizes both sides of a pair in place.
pub fn prepare_pair(pair: &mut SentencePair) {
    pair.src.text = normalize(&pair.src.text);
    pair.tgt.text = normalize(&pair.tgt.text);
    pair.src.tokens = Some(tokenize(&pair.src.text));
    pair.tgt.tokens = Some(tokenize(&pair.tgt.text));
}

fn tokens_of(pair: &SentencePair) -> Result<(&[String], &[String]), CleanError> {
    let src = pair
        .src
        .tokens
        .as_deref()
        .ok_or(CleanError::MissingTokens("source"))?;
    let tgt = pair
        .tgt
        .tokens
        .as_deref()
        .ok_or(CleanError::MissingTokens("target"))?;
    Ok((src, tgt))
}

/// Rejects pairs with more than `max_tokens` tokens on either side.
pub fn filter_length(pair: &SentencePair, cfg: &CleanConfig) -> Result<Verdict, CleanError> {
    let (src, tgt) = tokens_of(pair)?;
    if src.len() > cfg.max_tokens || tgt.len() > cfg.max_tokens {
        Ok(Verdict::Reject(RejectReason::Length))
    } else {
        Ok(Verdict::Keep)
    }
}

/// Multiset token intersection size.
fn multiset_intersection(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in a {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut shared = 0;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                shared += 1;
            }
        }
    }
    shared
}

/// Rejects pairs where over `overlap_threshold` of the tokens on *both*
/// sides are identical (multiset intersection over each side's length).
pub fn filter_overlap(pair: &SentencePair, cfg: &CleanConfig) -> Result<Verdict, CleanError> {
    let (src, tgt) = tokens_of(pair)?;
    if src.is_empty() || tgt.is_empty() {
        return Ok(Verdict::Keep);
    }
    let shared = multiset_intersection(src, tgt) as f64;
    let src_frac = shared / src.len() as f64;
    let tgt_frac = shared / tgt.len() as f64;
    if src_frac > cfg.overlap_threshold && tgt_frac > cfg.overlap_threshold {
        Ok(Verdict::Reject(RejectReason::Overlap))
    } else {
        Ok(Verdict::Keep)
    }
}

/// Rejects pairs whose token-count ratio exceeds `max_ratio`. Symmetric by
/// default; with `ratio_symmetric=false`, only source-to-target is checked.
pub fn filter_ratio(pair: &SentencePair, cfg: &CleanConfig) -> Result<Verdict, CleanError> {
    let (src, tgt) = tokens_of(pair)?;
    if src.is_empty() {
        return Err(CleanError::EmptySide("source"));
    }
    if tgt.is_empty() {
        return Err(CleanError::EmptySide("target"));
    }
    let fwd = src.len() as f64 / tgt.len() as f64;
    let ratio = if cfg.ratio_symmetric {
        fwd.max(tgt.len() as f64 / src.len() as f64)
    } else {
        fwd
    };
    if ratio > cfg.max_ratio {
        Ok(Verdict::Reject(RejectReason::Ratio))
    } else {
        Ok(Verdict::Keep)
    }
}

/// 128-bit content key for a pair's (src, tgt) text, length-framed so
/// ("ab","c") and ("a","bc") cannot collide.
fn pair_key(pair: &SentencePair) -> u128 {
    let mut h = Sha256::new();
    h.update((pair.src.text.len() as u64).to_le_bytes());
    h.update(pair.src.text.as_bytes());
    h.update(pair.tgt.text.as_bytes());
    let digest = h.finalize();
    u128::from_le_bytes(digest[..16].try_into().expect("16 bytes"))
}

fn text_key(text: &str) -> u128 {
    let digest = Sha256::digest(text.as_bytes());
    u128::from_le_bytes(digest[..16].try_into().expect("16 bytes"))
}

/// Removes exact duplicate pairs (same src and tgt text), keeping the first
/// occurrence. Returns (kept, rejected).
pub fn dedup(stream: Vec<SentencePair>) -> (Vec<SentencePair>, Vec<SentencePair>) {
    let mut seen = std::collections::HashSet::with_capacity(stream.len());
    let mut kept = Vec::with_capacity(stream.len());
    let mut rejected = Vec::new();
    for pair in stream {
        if seen.insert(pair_key(&pair)) {
            kept.push(pair);
        } else {
            rejected.push(pair);
        }
    }
    (kept, rejected)
}

#[derive(Clone, Copy, PartialEq)]
enum MappingState {
    Single(u128),
    Multi,
}

/// Drops every pair participating in a one-to-many or many-to-one mapping:
/// a source text with two or more distinct targets (or vice versa) removes
/// all its pairs. Two passes; survivor order is preserved.
pub fn remove_ambiguous(stream: Vec<SentencePair>) -> (Vec<SentencePair>, Vec<SentencePair>) {
    let mut by_src: HashMap<u128, MappingState> = HashMap::new();
    let mut by_tgt: HashMap<u128, MappingState> = HashMap::new();
    for pair in &stream {
        let s = text_key(&pair.src.text);
        let t = text_key(&pair.tgt.text);
        update_mapping(&mut by_src, s, t);
        update_mapping(&mut by_tgt, t, s);
    }
    let mut kept = Vec::with_capacity(stream.len());
    let mut rejected = Vec::new();
    for pair in stream {
        let s = text_key(&pair.src.text);
        let t = text_key(&pair.tgt.text);
        let src_ok = by_src.get(&s) != Some(&MappingState::Multi);
        let tgt_ok = by_tgt.get(&t) != Some(&MappingState::Multi);
        if src_ok && tgt_ok {
            kept.push(pair);
        } else {
            rejected.push(pair);
        }
    }
    (kept, rejected)
}

fn update_mapping(map: &mut HashMap<u128, MappingState>, key: u128, value: u128) {
    match map.get(&key) {
        None => {
            map.insert(key, MappingState::Single(value));
        }
        Some(MappingState::Single(v)) if *v != value => {
            map.insert(key, MappingState::Multi);
        }
        _ => {}
    }
}

/// Rejects pairs whose classified language differs from the expected pair.
pub fn filter_offtarget(
    pair: &SentencePair,
    profiles: &LangProfileSet,
    cfg: &CleanConfig,
) -> Result<Verdict, CleanError> {
    let (want_src, want_tgt) = (&cfg.expected_langs.0, &cfg.expected_langs.1);
    for lang in [want_src, want_tgt] {
        if profiles.get(lang).is_none() {
            return Err(CleanError::UnknownLanguage(lang.clone()));
        }
    }
    let src_lang = match langid::classify(&pair.src.text, profiles) {
        Ok((lang, _)) => lang,
        Err(_) => return Ok(Verdict::Reject(RejectReason::Offtarget)),
    };
    if &src_lang != want_src {
        return Ok(Verdict::Reject(RejectReason::Offtarget));
    }
    let tgt_lang = match langid::classify(&pair.tgt.text, profiles) {
        Ok((lang, _)) => lang,
        Err(_) => return Ok(Verdict::Reject(RejectReason::Offtarget)),
    };
    if &tgt_lang != want_tgt {
        return Ok(Verdict::Reject(RejectReason::Offtarget));
    }
    Ok(Verdict::Keep)
}

/// Full cleaning pass over a batch of raw pairs: Step 1 (normalize +
/// tokenize, dropping pairs left empty), Step 2 (length, overlap, ratio,
/// dedup), Step 3 (off-target, ambiguous mappings). The first filter to
/// fire records the rejection reason.
pub fn run_clean(
    pairs: Vec<SentencePair>,
    cfg: &CleanConfig,
    profiles: Option<&LangProfileSet>,
) -> Result<(Vec<SentencePair>, Vec<(SentencePair, RejectReason)>, StageStats), CleanError> {
    let mut stats = StageStats::new("clean");
    stats.lines_in = pairs.len() as u64;
    let mut rejected: Vec<(SentencePair, RejectReason)> = Vec::new();
    let mut survivors: Vec<SentencePair> = Vec::new();

    for mut pair in pairs {
        prepare_pair(&mut pair);
        if pair.src.text.is_empty() || pair.tgt.text.is_empty() {
            rejected.push((pair, RejectReason::Empty));
            continue;
        }
        let verdict = filter_length(&pair, cfg)?;
        if let Verdict::Reject(r) = verdict {
            rejected.push((pair, r));
            continue;
        }
        let verdict = filter_overlap(&pair, cfg)?;
        if let Verdict::Reject(r) = verdict {
            rejected.push((pair, r));
            continue;
        }
        let verdict = filter_ratio(&pair, cfg)?;
        if let Verdict::Reject(r) = verdict {
            rejected.push((pair, r));
            continue;
        }
        survivors.push(pair);
    }

    let (survivors, dup) = dedup(survivors);
    rejected.extend(dup.into_iter().map(|p| (p, RejectReason::Dedup)));

    let mut after_lang = Vec::with_capacity(survivors.len());
    if let Some(profiles) = profiles {
        for pair in survivors {
            match filter_offtarget(&pair, profiles, cfg)? {
                Verdict::Keep => after_lang.push(pair),
                Verdict::Reject(r) => rejected.push((pair, r)),
            }
        }
    } else {
        after_lang = survivors;
    }

    let (kept, ambiguous) = remove_ambiguous(after_lang);
    rejected.extend(ambiguous.into_iter().map(|p| (p, RejectReason::Ambiguous)));

    for (_, reason) in &rejected {
        stats.reject(reason.as_str());
    }
    stats.lines_kept = kept.len() as u64;
    Ok((kept, rejected, stats))
}
