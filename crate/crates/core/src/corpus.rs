//! User-timeline data model, JSON Lines ingestion and stratified splitting.
//!
//! One corpus line holds one user:
//!
//! ```text
//! {"user_id":str, "nickname":str, "gender":"m"|"f"|"unknown", "profile":str,
//!  "birthday":str|null, "num_followers":int, "num_followings":int, "label":0|1,
//!  "tweets":[{"text":str, "posting_time":"YYYY-MM-DD HH:MM:SS", "has_images":bool,
//!             "num_likes":int, "num_forwards":int, "num_comments":int,
//!             "is_original":bool}]}
//! ```
//!
//! Malformed lines are reported as [`ParseIssue`]s and skipped; only an
//! unreadable source is fatal.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rng::{stream, SplitMix64};

pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal = 0,
    Depressed = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u64) -> Option<Self> {
        match i {
            0 => Some(Label::Normal),
            1 => Some(Label::Depressed),
            _ => None,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "m")]
    Male,
    #[serde(rename = "f")]
    Female,
    #[serde(rename = "unknown")]
    Unknown,
}

fn serialize_time<S: Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&t.format(TIME_FORMAT))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tweet {
    pub text: String,
    /// Naive local time, second precision.
    #[serde(serialize_with = "serialize_time")]
    pub posting_time: NaiveDateTime,
    pub has_images: bool,
    pub num_likes: u64,
    pub num_forwards: u64,
    pub num_comments: u64,
    pub is_original: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserRecord {
    pub user_id: String,
    pub nickname: String,
    pub gender: Gender,
    pub profile: String,
    pub birthday: Option<String>,
    pub num_followers: u64,
    pub num_followings: u64,
    pub label: Label,
    pub tweets: Vec<Tweet>,
}

impl UserRecord {
    /// Serialize as one corpus line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("user records always serialize")
    }

    /// Stable sort of the timeline by posting time; ties keep input order.
    pub fn sort_tweets(&mut self) {
        self.tweets.sort_by_key(|t| t.posting_time);
    }
}

/// A skipped corpus line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseIssue {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

/// Parse a JSON Lines corpus.
///
/// Records come back in file order with their tweets sorted by posting time.
/// Whitespace-only lines are ignored. A repeated `user_id` is reported on the
/// later line and that record is dropped.
pub fn parse_corpus<R: BufRead>(mut source: R) -> Result<(Vec<UserRecord>, Vec<ParseIssue>)> {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if source.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let line = match std::str::from_utf8(&buf) {
            Ok(s) => s,
            Err(e) => {
                issues.push(ParseIssue {
                    line: line_no,
                    reason: format!("invalid UTF-8: {e}"),
                });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line) {
            Ok(record) => {
                if !seen.insert(record.user_id.clone()) {
                    issues.push(ParseIssue {
                        line: line_no,
                        reason: format!("duplicate user_id: {}", record.user_id),
                    });
                } else {
                    records.push(record);
                }
            }
            Err(reason) => issues.push(ParseIssue {
                line: line_no,
                reason,
            }),
        }
    }
    Ok((records, issues))
}

pub fn write_corpus<W: Write>(mut out: W, records: &[UserRecord]) -> Result<()> {
    for r in records {
        out.write_all(r.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parse and validate one corpus line.
pub fn parse_record(line: &str) -> Result<UserRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| "expected a JSON object".to_string())?;

    let gender = match get_str(obj, "gender")? {
        "m" => Gender::Male,
        "f" => Gender::Female,
        "unknown" => Gender::Unknown,
        other => return Err(format!("invalid gender: {other:?}")),
    };
    let birthday = match field(obj, "birthday")? {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        _ => return Err("field birthday: expected string or null".into()),
    };
    let label_raw = get_u64(obj, "label")?;
    let label =
        Label::from_index(label_raw).ok_or_else(|| format!("invalid label: {label_raw}"))?;

    let raw_tweets = field(obj, "tweets")?
        .as_array()
        .ok_or_else(|| "field tweets: expected array".to_string())?;
    let tweets = raw_tweets
        .iter()
        .enumerate()
        .map(|(i, t)| parse_tweet(t).map_err(|e| format!("tweet {i}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;

    let mut record = UserRecord {
        user_id: get_str(obj, "user_id")?.to_string(),
        nickname: get_str(obj, "nickname")?.to_string(),
        gender,
        profile: get_str(obj, "profile")?.to_string(),
        birthday,
        num_followers: get_u64(obj, "num_followers")?,
        num_followings: get_u64(obj, "num_followings")?,
        label,
        tweets,
    };
    record.sort_tweets();
    Ok(record)
}

fn parse_tweet(value: &Value) -> Result<Tweet, String> {
    let obj = value
        .as_object()
        .ok_or_else(|| "expected a JSON object".to_string())?;
    let time_raw = get_str(obj, "posting_time")?;
    let posting_time = NaiveDateTime::parse_from_str(time_raw, TIME_FORMAT)
        .map_err(|_| format!("invalid posting_time: {time_raw:?}"))?;
    let tweet = Tweet {
        text: get_str(obj, "text")?.to_string(),
        posting_time,
        has_images: get_bool(obj, "has_images")?,
        num_likes: get_u64(obj, "num_likes")?,
        num_forwards: get_u64(obj, "num_forwards")?,
        num_comments: get_u64(obj, "num_comments")?,
        is_original: get_bool(obj, "is_original")?,
    };
    if tweet.text.is_empty() && !tweet.has_images {
        return Err("empty text on a post without images".into());
    }
    Ok(tweet)
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, String> {
    obj.get(name)
        .ok_or_else(|| format!("missing field: {name}"))
}

fn get_str<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a str, String> {
    field(obj, name)?
        .as_str()
        .ok_or_else(|| format!("field {name}: expected string"))
}

fn get_bool(obj: &Map<String, Value>, name: &str) -> Result<bool, String> {
    field(obj, name)?
        .as_bool()
        .ok_or_else(|| format!("field {name}: expected boolean"))
}

fn get_u64(obj: &Map<String, Value>, name: &str) -> Result<u64, String> {
    field(obj, name)?
        .as_u64()
        .ok_or_else(|| format!("field {name}: expected non-negative integer"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of each class that goes to the training side, in (0, 1).
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            seed: 0,
        }
    }
}

/// Stratified seeded split into `(train, validation)`.
///
/// Each class is shuffled independently with a generator derived from the
/// seed, then cut at `floor(ratio * class_size)`. Outputs list class 0 before
/// class 1.
pub fn split_dataset(
    records: &[UserRecord],
    spec: &SplitSpec,
) -> Result<(Vec<UserRecord>, Vec<UserRecord>)> {
    if !(spec.ratio > 0.0 && spec.ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must lie in (0, 1), got {}",
            spec.ratio
        )));
    }
    if records.is_empty() {
        return Err(Error::Config("cannot split an empty corpus".into()));
    }
    let mut rng = SplitMix64::derive(spec.seed, stream::SPLIT);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for label in [Label::Normal, Label::Depressed] {
        let mut class: Vec<&UserRecord> = records.iter().filter(|r| r.label == label).collect();
        rng.shuffle(&mut class);
        let cut = split_point(class.len(), spec.ratio);
        train.extend(class[..cut].iter().map(|r| (*r).clone()));
        validation.extend(class[cut..].iter().map(|r| (*r).clone()));
    }
    Ok((train, validation))
}

/// `floor(ratio * n)`, nudged so that products such as `0.29 * 100`
/// (which is 28.999999999999996 in binary) land on the intended integer.
fn split_point(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}
