//! The six per-user behavioral statistics and their normalization.
//!
//! | component         | definition                                               |
//! |-------------------|----------------------------------------------------------|
//! | `p_original`      | original tweets / all tweets                             |
//! | `p_late_night`    | tweets with clock time in `[00:00, 06:00)` / all tweets  |
//! | `posts_per_week`  | tweet count / (max(span_days, 1) / 7)                    |
//! | `posting_time_sd` | population SD of time-of-day, in minutes                 |
//! | `p_negative`      | tweets whose negativity exceeds a threshold / all tweets |
//! | `image_freq`      | tweets with images / all tweets                          |
//!
//! Every statistic of an empty timeline is 0.

use std::collections::{HashMap, HashSet};
use std::fmt;

use chrono::Timelike;
use serde::{Deserialize, Serialize};

use crate::corpus::{Tweet, UserRecord};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const NUM_FEATURES: usize = 6;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "p_original",
    "p_late_night",
    "posts_per_week",
    "posting_time_sd",
    "p_negative",
    "image_freq",
];
pub const DEFAULT_NEGATIVITY_THRESHOLD: f64 = 0.5;
pub const STD_FLOOR: f64 = 1e-8;

const LATE_NIGHT_END_SECS: u32 = 6 * 3600;
const SECONDS_PER_DAY: f64 = 86_400.0;
const DEFAULT_LEXICON: &str = include_str!("../data/negative_lexicon.txt");

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StatFeatureVector {
    pub p_original: f64,
    pub p_late_night: f64,
    pub posts_per_week: f64,
    /// Minutes.
    pub posting_time_sd: f64,
    pub p_negative: f64,
    pub image_freq: f64,
}

impl StatFeatureVector {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.p_original,
            self.p_late_night,
            self.posts_per_week,
            self.posting_time_sd,
            self.p_negative,
            self.image_freq,
        ]
    }

    pub fn from_array(a: [f64; NUM_FEATURES]) -> Self {
        Self {
            p_original: a[0],
            p_late_night: a[1],
            posts_per_week: a[2],
            posting_time_sd: a[3],
            p_negative: a[4],
            image_freq: a[5],
        }
    }
}

fn fraction(tweets: &[Tweet], pred: impl Fn(&Tweet) -> bool) -> f64 {
    if tweets.is_empty() {
        return 0.0;
    }
    tweets.iter().filter(|t| pred(t)).count() as f64 / tweets.len() as f64
}

pub fn proportion_original(tweets: &[Tweet]) -> f64 {
    fraction(tweets, |t| t.is_original)
}

/// Fraction of tweets posted in `[00:00:00, 06:00:00)` local time.
pub fn proportion_late_night(tweets: &[Tweet]) -> f64 {
    fraction(tweets, |t| {
        t.posting_time.num_seconds_from_midnight() < LATE_NIGHT_END_SECS
    })
}

pub fn image_frequency(tweets: &[Tweet]) -> f64 {
    fraction(tweets, |t| t.has_images)
}

/// Tweets per week over the observed span, with the span floored at one day.
pub fn posts_per_week(tweets: &[Tweet]) -> f64 {
    let (Some(first), Some(last)) = (
        tweets.iter().map(|t| t.posting_time).min(),
        tweets.iter().map(|t| t.posting_time).max(),
    ) else {
        return 0.0;
    };
    let span_days = (last - first).num_seconds() as f64 / SECONDS_PER_DAY;
    let weeks = span_days.max(1.0) / 7.0;
    tweets.len() as f64 / weeks
}

/// Population standard deviation of posting time-of-day, in minutes.
pub fn posting_time_sd(tweets: &[Tweet]) -> f64 {
    if tweets.len() < 2 {
        return 0.0;
    }
    let minutes: Vec<f64> = tweets
        .iter()
        .map(|t| t.posting_time.num_seconds_from_midnight() as f64 / 60.0)
        .collect();
    let n = minutes.len() as f64;
    let mean = minutes.iter().sum::<f64>() / n;
    let var = minutes.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Fraction of tweets whose negativity score is strictly above `threshold`.
pub fn proportion_negative(
    tweets: &[Tweet],
    scorer: &dyn SentimentScorer,
    threshold: f64,
) -> Result<f64> {
    if tweets.is_empty() {
        return Ok(0.0);
    }
    let mut negative = 0usize;
    for (index, t) in tweets.iter().enumerate() {
        let score = scorer.score(&t.text).map_err(|e| Error::Feature {
            index,
            reason: format!("scorer {}: {e}", scorer.name()),
        })?;
        if score > threshold {
            negative += 1;
        }
    }
    Ok(negative as f64 / tweets.len() as f64)
}

pub fn extract_features(
    user: &UserRecord,
    scorer: &dyn SentimentScorer,
    threshold: f64,
) -> Result<StatFeatureVector> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "negativity threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let tweets = &user.tweets;
    Ok(StatFeatureVector {
        p_original: proportion_original(tweets),
        p_late_night: proportion_late_night(tweets),
        posts_per_week: posts_per_week(tweets),
        posting_time_sd: posting_time_sd(tweets),
        p_negative: proportion_negative(tweets, scorer, threshold)?,
        image_freq: image_frequency(tweets),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreError(pub String);

impl fmt::Display for ScoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Negativity of a single text, in `[0, 1]`.
///
/// Implementations must be deterministic for a fixed text.
pub trait SentimentScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, text: &str) -> Result<f64, ScoreError>;
}

/// Token-ratio scorer over a list of negative terms.
///
/// Terms are tokenized with the same rules as the text pipeline, so a
/// multi-character Chinese term matches a contiguous run of single-character
/// tokens. The score is the share of tokens covered by a matched term.
#[derive(Debug, Clone)]
pub struct LexiconScorer {
    name: String,
    // first token -> candidate term token sequences, longest first
    terms: HashMap<String, Vec<Vec<String>>>,
    size: usize,
}

impl LexiconScorer {
    pub fn new<I, S>(name: &str, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut unique = HashSet::new();
        let mut map: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for term in terms {
            let toks = tokenize(term.as_ref());
            if toks.is_empty() || !unique.insert(toks.clone()) {
                continue;
            }
            map.entry(toks[0].clone()).or_default().push(toks);
        }
        if unique.is_empty() {
            return Err(Error::Config("sentiment lexicon is empty".into()));
        }
        for seqs in map.values_mut() {
            seqs.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        }
        Ok(Self {
            name: name.to_string(),
            terms: map,
            size: unique.len(),
        })
    }

    /// Parse the lexicon file format: one term per line, `#` starts a comment line.
    pub fn from_lexicon_text(name: &str, text: &str) -> Result<Self> {
        Self::new(
            name,
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    /// The shipped lexicon.
    pub fn default_lexicon() -> Self {
        Self::from_lexicon_text("default-lexicon", DEFAULT_LEXICON)
            .expect("shipped lexicon is non-empty")
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Number of tokens covered by lexicon terms, matching greedily left to
    /// right with the longest term first.
    pub fn hits(&self, tokens: &[String]) -> usize {
        let mut hits = 0;
        let mut i = 0;
        while i < tokens.len() {
            let matched = self.terms.get(&tokens[i]).and_then(|cands| {
                cands
                    .iter()
                    .find(|seq| tokens[i..].starts_with(seq))
                    .map(|seq| seq.len())
            });
            match matched {
                Some(len) => {
                    hits += len;
                    i += len;
                }
                None => i += 1,
            }
        }
        hits
    }

    pub fn lexicon_score(&self, text: &str) -> f64 {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return 0.0;
        }
        self.hits(&tokens) as f64 / tokens.len() as f64
    }
}

impl SentimentScorer for LexiconScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, text: &str) -> Result<f64, ScoreError> {
        Ok(self.lexicon_score(text))
    }
}

/// Per-component z-score parameters fitted on training vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Default for FeatureNormalizer {
    /// Identity transform.
    fn default() -> Self {
        Self {
            mean: [0.0; NUM_FEATURES],
            std: [1.0; NUM_FEATURES],
        }
    }
}

impl FeatureNormalizer {
    /// Population mean and standard deviation per component; std floored at
    /// [`STD_FLOOR`].
    pub fn fit(vectors: &[[f64; NUM_FEATURES]]) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::Config(format!(
                "feature normalizer needs at least 2 vectors, got {}",
                vectors.len()
            )));
        }
        let n = vectors.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            mean[j] = vectors.iter().map(|v| v[j]).sum::<f64>() / n;
            let var = vectors
                .iter()
                .map(|v| (v[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n;
            std[j] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|j| (v[j] - self.mean[j]) / self.std[j])
    }

    pub fn invert(&self, z: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|j| z[j] * self.std[j] + self.mean[j])
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mean.iter().all(|m| m.is_finite())
            && self.std.iter().all(|s| s.is_finite() && *s >= STD_FLOOR);
        if ok {
            Ok(())
        } else {
            Err(Error::Format(
                "normalizer has non-finite mean or std below floor".into(),
            ))
        }
    }
}
