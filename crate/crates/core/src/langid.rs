//! Character n-gram language identification.
//!
//! A [`LangProfile`] is an add-one-smoothed character n-gram model (n = 1..4)
//! over NFC-normalized, lowercased text. Classification is the argmax of
//! length-normalized log-likelihood across profiles; ties break toward the
//! lexicographically smaller language code, so the result never depends on
//! profile iteration order.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum LangIdError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("text contains no characters after normalization")]
    EmptyText,
    #[error("classification needs at least two profiles, got {0}")]
    NeedTwoProfiles(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OrderTable {
    logprobs: BTreeMap<String, f64>,
    /// Log-probability of the single pooled unseen-n-gram bucket.
    unseen_logprob: f64,
}

/// Add-one-smoothed character n-gram model for one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangProfile {
    pub lang: String,
    orders: Vec<OrderTable>,
}

fn normalize_chars(text: &str) -> Vec<char> {
    text.nfc()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| !c.is_whitespace())
        .collect()
}

fn ngrams_of(chars: &[char], n: usize) -> impl Iterator<Item = String> + '_ {
    chars.windows(n).map(|w| w.iter().collect())
}

/// Trains a profile for `lang` from monolingual text.
pub fn train_profile<'a, I>(corpus: I, lang: &str) -> Result<LangProfile, LangIdError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: Vec<HashMap<String, u64>> = (0..MAX_ORDER).map(|_| HashMap::new()).collect();
    let mut saw_text = false;
    for line in corpus {
        let chars = normalize_chars(line);
        if !chars.is_empty() {
            saw_text = true;
        }
        for n in 1..=MAX_ORDER {
            for gram in ngrams_of(&chars, n) {
                *counts[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    if !saw_text {
        return Err(LangIdError::EmptyCorpus);
    }
    let orders = counts
        .into_iter()
        .map(|table| {
            let total: u64 = table.values().sum();
            let distinct = table.len() as u64;
            // one extra type pools all unseen n-grams, so the observed
            // probabilities plus the unseen bucket sum to exactly 1
            let denom = (total + distinct + 1) as f64;
            let logprobs = table
                .into_iter()
                .map(|(gram, c)| (gram, ((c + 1) as f64 / denom).ln()))
                .collect();
            OrderTable {
                logprobs,
                unseen_logprob: (1.0 / denom).ln(),
            }
        })
        .collect();
    Ok(LangProfile {
        lang: lang.to_string(),
        orders,
    })
}

impl LangProfile {
    fn gram_logprob(&self, n: usize, gram: &str) -> f64 {
        let table = &self.orders[n - 1];
        table
            .logprobs
            .get(gram)
            .copied()
            .unwrap_or(table.unseen_logprob)
    }

    /// Length-normalized log-likelihood of `chars` (nats per n-gram).
    fn score(&self, chars: &[char]) -> f64 {
        let mut total = 0.0;
        let mut grams = 0usize;
        for n in 1..=MAX_ORDER {
            for gram in ngrams_of(chars, n) {
                total += self.gram_logprob(n, &gram);
                grams += 1;
            }
        }
        if grams == 0 {
            f64::NEG_INFINITY
        } else {
            total / grams as f64
        }
    }

    /// Checks that for each order the observed probabilities plus the
    /// unseen bucket sum to 1 within `tol`.
    pub fn check_normalization(&self, tol: f64) -> bool {
        self.orders.iter().all(|t| {
            let sum: f64 = t.logprobs.values().map(|lp| lp.exp()).sum::<f64>()
                + t.unseen_logprob.exp();
            (sum - 1.0).abs() <= tol
        })
    }
}

/// A set of trained profiles keyed by language code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LangProfileSet {
    profiles: BTreeMap<String, LangProfile>,
}

impl LangProfileSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, profile: LangProfile) {
        self.profiles.insert(profile.lang.clone(), profile);
    }

    pub fn get(&self, lang: &str) -> Option<&LangProfile> {
        self.profiles.get(lang)
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LangProfile> {
        self.profiles.values()
    }
}

/// Classifies text, returning the winning language and the log-odds margin
/// over the runner-up (nats per n-gram).
pub fn classify(text: &str, profiles: &LangProfileSet) -> Result<(String, f64), LangIdError> {
    if profiles.len() < 2 {
        return Err(LangIdError::NeedTwoProfiles(profiles.len()));
    }
    let chars = normalize_chars(text);
    if chars.is_empty() {
        return Err(LangIdError::EmptyText);
    }
    let mut best: Option<(&str, f64)> = None;
    let mut second = f64::NEG_INFINITY;
    // BTreeMap iteration is sorted by language code: on an exact score tie
    // the smaller code wins, independent of insertion order.
    for profile in profiles.iter() {
        let score = profile.score(&chars);
        match best {
            None => best = Some((&profile.lang, score)),
            Some((_, b)) if score > b => {
                second = b;
                best = Some((&profile.lang, score));
            }
            Some(_) => {
                if score > second {
                    second = score;
                }
            }
        }
    }
    let (lang, score) = best.expect("at least two profiles");
    Ok((lang.to_string(), score - second))
}
