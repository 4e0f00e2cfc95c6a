//! Long-sequence construction, tokenization and vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::UserRecord;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const DEFAULT_MAX_LEN: usize = 256;
pub const MIN_MAX_LEN: usize = 8;

/// CJK ideographs, CJK punctuation and full-width forms.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2FA1F)
}

/// Whitespace split; tokens containing any CJK codepoint are broken into
/// single codepoints; everything non-CJK is lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if word.chars().any(is_cjk) {
            for c in word.chars() {
                if is_cjk(c) {
                    out.push(c.to_string());
                } else {
                    out.push(c.to_lowercase().collect());
                }
            }
        } else {
            out.push(word.to_lowercase());
        }
    }
    out
}

/// Token to id mapping with the four special tokens at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_freq: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect(), 1)
            .expect("specials form a valid vocabulary")
    }
}

impl Vocab {
    /// Rebuild a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Format(
                "vocabulary must start with [PAD], [UNK], [CLS], [SEP]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// SHA-256 over the id-ordered tokens, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

fn record_texts(r: &UserRecord) -> impl Iterator<Item = &str> {
    [r.nickname.as_str(), r.profile.as_str()]
        .into_iter()
        .chain(r.tweets.iter().map(|t| t.text.as_str()))
}

/// Tokens seen at least `min_freq` times get ids from 4 upward, ordered by
/// descending frequency and then lexicographically.
pub fn build_vocab(records: &[UserRecord], min_freq: usize) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in records {
        for text in record_texts(r) {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !SPECIALS.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens, min_freq)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    /// Exactly `max_len` ids, `ids[0] == CLS`, PAD after `true_len`.
    pub ids: Vec<u32>,
    pub true_len: usize,
}

/// `CLS nickname SEP profile SEP tweet_1 SEP tweet_2 ...`, oldest tweet first,
/// truncated to `max_len` and padded with PAD.
pub fn build_user_sequence(
    user: &UserRecord,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len < MIN_MAX_LEN {
        return Err(Error::Config(format!(
            "max_len must be at least {MIN_MAX_LEN}, got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    let push_text = |ids: &mut Vec<u32>, text: &str| {
        ids.extend(tokenize(text).iter().map(|t| vocab.encode(t)));
    };
    push_text(&mut ids, &user.nickname);
    ids.push(SEP);
    push_text(&mut ids, &user.profile);
    ids.push(SEP);

    let mut order: Vec<usize> = (0..user.tweets.len()).collect();
    order.sort_by_key(|&i| user.tweets[i].posting_time);
    for (k, &i) in order.iter().enumerate() {
        if k > 0 {
            ids.push(SEP);
        }
        push_text(&mut ids, &user.tweets[i].text);
        if ids.len() >= max_len {
            break;
        }
    }
    ids.truncate(max_len);
    let true_len = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence { ids, true_len })
}

/// Externally computed token embeddings, one `L x d1` matrix per user.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    pub d1: usize,
    pub by_user: BTreeMap<String, Matrix>,
}

impl PrecomputedEmbeddings {
    pub fn len(&self) -> usize {
        self.by_user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<&Matrix> {
        self.by_user.get(user_id)
    }
}

/// Read the embedding file format: for each user a header line
/// `user_id d1 L` followed by `L` lines of `d1` whitespace-separated decimals.
pub fn load_precomputed<R: BufRead>(source: R) -> Result<PrecomputedEmbeddings> {
    let mut lines = source
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let mut out = PrecomputedEmbeddings::default();
    let mut width: Option<usize> = None;

    while let Some((n, header)) = lines.next() {
        let header = header?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || Error::Format(format!("line {}: expected `user_id d1 L`", n + 1));
        if parts.len() != 3 {
            return Err(bad_header());
        }
        let user = parts[0].to_string();
        let d1: usize = parts[1].parse().map_err(|_| bad_header())?;
        let rows: usize = parts[2].parse().map_err(|_| bad_header())?;
        if d1 == 0 {
            return Err(Error::Format(format!("user {user}: d1 must be positive")));
        }
        match width {
            None => width = Some(d1),
            Some(w) if w != d1 => {
                return Err(Error::Format(format!(
                    "user {user}: embedding width {d1} differs from {w}"
                )))
            }
            _ => {}
        }
        let mut data = Vec::with_capacity(rows * d1);
        for r in 0..rows {
            let (n, line) = lines.next().ok_or_else(|| {
                Error::Format(format!("user {user}: expected {rows} rows, found {r}"))
            })?;
            let line = line?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| {
                    Error::Format(format!("line {}: invalid number {tok:?}", n + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "user {user}: non-finite value on line {}",
                        n + 1
                    )));
                }
                data.push(v);
            }
            if data.len() - before != d1 {
                return Err(Error::Format(format!(
                    "user {user}: line {} has {} values, expected {d1}",
                    n + 1,
                    data.len() - before
                )));
            }
        }
        if out.by_user.contains_key(&user) {
            return Err(Error::Format(format!("duplicate user {user}")));
        }
        out.by_user.insert(user, Matrix::from_vec(rows, d1, data)?);
    }
    match width {
        Some(w) => out.d1 = w,
        None => log::warn!("precomputed embedding file contains no users"),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Gender, Label, Tweet};
    use chrono::NaiveDateTime;
    use std::io::Cursor;

    fn user(nickname: &str, profile: &str, tweets: &[(&str, &str)]) -> UserRecord {
        UserRecord {
            user_id: "u".into(),
            nickname: nickname.into(),
            gender: Gender::Unknown,
            profile: profile.into(),
            birthday: None,
            num_followers: 0,
            num_followings: 0,
            label: Label::Normal,
            tweets: tweets
                .iter()
                .map(|(text, time)| Tweet {
                    text: text.to_string(),
                    posting_time: NaiveDateTime::parse_from_str(time, "%Y-%m-%d %H:%M:%S").unwrap(),
                    has_images: false,
                    num_likes: 0,
                    num_forwards: 0,
                    num_comments: 0,
                    is_original: true,
                })
                .collect(),
        }
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("hello world"), ["hello", "world"]);
        assert_eq!(tokenize("Hello WORLD"), ["hello", "world"]);
        assert_eq!(tokenize("我 很累"), ["我", "很", "累"]);
        assert_eq!(tokenize("ok，我"), ["o", "k", "，", "我"]);
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t ").is_empty());
    }

    #[test]
    fn vocab_min_freq_and_tiebreak() {
        let u = user("a a a a a", "b c", &[]);
        let v = build_vocab(std::slice::from_ref(&u), 6).unwrap();
        assert_eq!(v.encode("a"), UNK);
        assert_eq!(v.len(), 4);

        let v = build_vocab(&[u], 1).unwrap();
        assert_eq!(v.encode("a"), 4);
        assert_eq!(v.encode("b"), 5);
        assert_eq!(v.encode("c"), 6);
        assert_eq!(v.decode(6), Some("c"));
    }

    #[test]
    fn empty_corpus_gives_specials_only() {
        let v = build_vocab(&[], 1).unwrap();
        assert_eq!(v.tokens(), SPECIALS);
        assert!(build_vocab(&[], 0).is_err());
    }

    #[test]
    fn sequence_layout() {
        let u = user("a", "", &[]);
        let v = build_vocab(std::slice::from_ref(&u), 1).unwrap();
        let s = build_user_sequence(&u, &v, 8).unwrap();
        assert_eq!(
            s.ids,
            vec![CLS, v.encode("a"), SEP, SEP, PAD, PAD, PAD, PAD]
        );
        assert_eq!(s.true_len, 4);
        assert!(build_user_sequence(&u, &v, 7).is_err());
    }

    #[test]
    fn sequence_truncates() {
        let u = user("a b c d e f g h i j", "k", &[]);
        let v = build_vocab(std::slice::from_ref(&u), 1).unwrap();
        let s = build_user_sequence(&u, &v, 8).unwrap();
        assert_eq!(s.ids.len(), 8);
        assert_eq!(s.true_len, 8);
        assert_eq!(s.ids[0], CLS);
    }

    #[test]
    fn sequence_orders_tweets_chronologically() {
        let u = user(
            "n",
            "p",
            &[
                ("later", "2020-01-02 00:00:00"),
                ("earlier", "2020-01-01 00:00:00"),
            ],
        );
        let v = build_vocab(std::slice::from_ref(&u), 1).unwrap();
        let s = build_user_sequence(&u, &v, 16).unwrap();
        let words: Vec<&str> = s.ids[..s.true_len]
            .iter()
            .map(|&i| v.decode(i).unwrap())
            .collect();
        assert_eq!(
            words,
            ["[CLS]", "n", "[SEP]", "p", "[SEP]", "earlier", "[SEP]", "later"]
        );
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = build_vocab(&[user("a b", "", &[])], 1).unwrap();
        let b = build_vocab(&[user("a c", "", &[])], 1).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }

    #[test]
    fn load_precomputed_two_users() {
        let text = "u1 4 2\n1 2 3 4\n5 6 7 8\nu2 4 1\n0.5 0.5 0.5 0.5\n";
        let e = load_precomputed(Cursor::new(text)).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.d1, 4);
        assert_eq!(e.get("u1").unwrap().shape(), (2, 4));
        assert_eq!(e.get("u2").unwrap().cols(), 4);
    }

    #[test]
    fn load_precomputed_rejects_mixed_width() {
        let text = "u1 4 1\n1 2 3 4\nu2 8 1\n1 2 3 4 5 6 7 8\n";
        let err = load_precomputed(Cursor::new(text)).unwrap_err().to_string();
        assert!(err.contains("u2"), "{err}");
    }

    #[test]
    fn load_precomputed_rejects_non_finite_and_short_rows() {
        assert!(load_precomputed(Cursor::new("u1 2 1\n1 NaN\n")).is_err());
        assert!(load_precomputed(Cursor::new("u1 2 1\n1 inf\n")).is_err());
        assert!(load_precomputed(Cursor::new("u1 2 2\n1 2\n")).is_err());
        assert!(load_precomputed(Cursor::new("u1 2 1\n1 2 3\n")).is_err());
    }

    #[test]
    fn load_precomputed_empty() {
        let e = load_precomputed(Cursor::new("")).unwrap();
        assert!(e.is_empty());
    }
}
