//! Seeded generator of labeled synthetic timelines.
//!
//! Each class has its own late-night, negative-word, original-post and image
//! rates, so all six behavioral features carry signal. Words are drawn from a
//! neutral pool or a negative pool; the negative pool is a subset of the
//! default lexicon and the neutral pool shares no term (nor, for Chinese, any
//! character) with it.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::corpus::{Gender, Label, Tweet, UserRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, SplitMix64};

const NEUTRAL_WORDS: &[&str] = &[
    "weather", "coffee", "music", "friend", "movie", "lunch", "city", "train", "book", "game",
    "cat", "dog", "photo", "walk", "weekend", "garden", "river", "market", "tea", "bread", "sunny",
    "today", "morning", "class", "work", "team", "project", "travel", "song", "dinner", "今天",
    "天气", "咖啡", "音乐", "朋友", "电影", "午饭", "城市", "周末", "公园", "散步", "照片", "学习",
    "工作", "旅行", "晚饭", "猫咪", "花园",
];

const NEGATIVE_WORDS: &[&str] = &[
    "lonely",
    "hopeless",
    "tired",
    "empty",
    "sad",
    "worthless",
    "crying",
    "exhausted",
    "numb",
    "despair",
    "孤独",
    "绝望",
    "痛苦",
    "难过",
    "失眠",
    "崩溃",
    "疲惫",
    "空虚",
    "心累",
    "无助",
];

/// Behavioral rates for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub late_night_rate: f64,
    pub negative_word_rate: f64,
    pub original_rate: f64,
    pub image_rate: f64,
}

impl ClassProfile {
    pub fn depressed() -> Self {
        Self {
            late_night_rate: 0.8,
            negative_word_rate: 0.7,
            original_rate: 0.9,
            image_rate: 0.2,
        }
    }

    pub fn normal() -> Self {
        Self {
            late_night_rate: 0.1,
            negative_word_rate: 0.1,
            original_rate: 0.5,
            image_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub normal: ClassProfile,
    pub depressed: ClassProfile,
    /// Inclusive range.
    pub tweets_per_user: (u64, u64),
    /// Inclusive range of timeline lengths in days.
    pub span_days: (u64, u64),
    /// Inclusive range.
    pub words_per_tweet: (u64, u64),
    pub start_date: NaiveDate,
    pub neutral_pool: Vec<String>,
    pub negative_pool: Vec<String>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            normal: ClassProfile::normal(),
            depressed: ClassProfile::depressed(),
            tweets_per_user: (20, 40),
            span_days: (14, 28),
            words_per_tweet: (4, 10),
            start_date: NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date"),
            neutral_pool: NEUTRAL_WORDS.iter().map(|s| s.to_string()).collect(),
            negative_pool: NEGATIVE_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SynthParams {
    pub fn profile(&self, label: Label) -> &ClassProfile {
        match label {
            Label::Normal => &self.normal,
            Label::Depressed => &self.depressed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (class, p) in [("normal", &self.normal), ("depressed", &self.depressed)] {
            for (name, v) in [
                ("late_night_rate", p.late_night_rate),
                ("negative_word_rate", p.negative_word_rate),
                ("original_rate", p.original_rate),
                ("image_rate", p.image_rate),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "{class}.{name} must lie in [0, 1], got {v}"
                    )));
                }
            }
        }
        for (name, (lo, hi)) in [
            ("tweets_per_user", self.tweets_per_user),
            ("span_days", self.span_days),
            ("words_per_tweet", self.words_per_tweet),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!(
                    "{name} must be a non-empty range of positive values, got {lo}..={hi}"
                )));
            }
        }
        if self.neutral_pool.is_empty() || self.negative_pool.is_empty() {
            return Err(Error::Config("word pools must be non-empty".into()));
        }
        if self
            .neutral_pool
            .iter()
            .chain(&self.negative_pool)
            .any(|w| w.trim().is_empty())
        {
            return Err(Error::Config(
                "word pools must not contain blank words".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub n_per_class: usize,
    pub seed: u64,
    pub params: SynthParams,
}

impl SynthDatasetSpec {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            seed,
            params: SynthParams::default(),
        }
    }
}

fn pick<'a>(rng: &mut SplitMix64, pool: &'a [String]) -> &'a str {
    &pool[rng.below(pool.len() as u64) as usize]
}

const LATE_NIGHT_SECS: u64 = 6 * 3600;
const DAY_SECS: u64 = 24 * 3600;

/// One user of class `label`. Tweets are returned sorted by posting time.
pub fn generate_user(
    label: Label,
    params: &SynthParams,
    rng: &mut SplitMix64,
    user_id: &str,
) -> UserRecord {
    let profile = params.profile(label);
    let n_tweets = rng.range_inclusive(params.tweets_per_user.0, params.tweets_per_user.1);
    let span = rng.range_inclusive(params.span_days.0, params.span_days.1);
    let start = params
        .start_date
        .and_hms_opt(0, 0, 0)
        .expect("midnight is valid");

    let mut tweets: Vec<Tweet> = (0..n_tweets)
        .map(|_| {
            let day = rng.below(span);
            let secs = if rng.bernoulli(profile.late_night_rate) {
                rng.below(LATE_NIGHT_SECS)
            } else {
                LATE_NIGHT_SECS + rng.below(DAY_SECS - LATE_NIGHT_SECS)
            };
            let posting_time: NaiveDateTime =
                start + Duration::days(day as i64) + Duration::seconds(secs as i64);
            let n_words = rng.range_inclusive(params.words_per_tweet.0, params.words_per_tweet.1);
            let words: Vec<&str> = (0..n_words)
                .map(|_| {
                    if rng.bernoulli(profile.negative_word_rate) {
                        pick(rng, &params.negative_pool)
                    } else {
                        pick(rng, &params.neutral_pool)
                    }
                })
                .collect();
            Tweet {
                text: words.join(" "),
                posting_time,
                has_images: rng.bernoulli(profile.image_rate),
                num_likes: rng.below(50),
                num_forwards: rng.below(10),
                num_comments: rng.below(20),
                is_original: rng.bernoulli(profile.original_rate),
            }
        })
        .collect();
    tweets.sort_by_key(|t| t.posting_time);

    let profile_words: Vec<&str> = (0..3).map(|_| pick(rng, &params.neutral_pool)).collect();
    UserRecord {
        user_id: user_id.to_string(),
        nickname: format!("user {}", pick(rng, &params.neutral_pool)),
        gender: if rng.bernoulli(0.5) {
            Gender::Female
        } else {
            Gender::Male
        },
        profile: profile_words.join(" "),
        birthday: None,
        num_followers: rng.below(1000),
        num_followings: rng.below(1000),
        label,
        tweets,
    }
}

/// `n_per_class` users of each label in a seeded order, with ids
/// `synth-00000`, `synth-00001`, ... by position.
pub fn generate_dataset(spec: &SynthDatasetSpec) -> Result<Vec<UserRecord>> {
    spec.params.validate()?;
    if spec.n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let mut seeds = SplitMix64::derive(spec.seed, stream::SYNTH_USERS);
    let mut slots: Vec<(Label, u64)> = [Label::Normal, Label::Depressed]
        .into_iter()
        .flat_map(|l| std::iter::repeat_n(l, spec.n_per_class))
        .map(|l| (l, seeds.next_u64()))
        .collect();
    SplitMix64::derive(spec.seed, stream::SYNTH_ORDER).shuffle(&mut slots);
    Ok(slots
        .into_iter()
        .enumerate()
        .map(|(i, (label, sub_seed))| {
            let mut rng = SplitMix64::new(sub_seed);
            generate_user(label, &spec.params, &mut rng, &format!("synth-{i:05}"))
        })
        .collect())
}
