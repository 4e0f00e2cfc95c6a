//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use chrono::{Datelike, Timelike};
use moodfuse::corpus::{write_corpus, Tweet, UserRecord};
use moodfuse::model::{Fusion, FusionQuery, ModelInput, TextInput, ValueProjection};
use moodfuse::text::{tokenize, TokenSequence, Vocab, CLS, PAD, SPECIALS};
use moodfuse::{FusionModel, ModelConfig, SplitMix64};

// ---------------------------------------------------------------------------
// behavioral features, written as plain loops over the raw fields

fn seconds_of_day(t: &Tweet) -> i64 {
    let p = t.posting_time;
    p.hour() as i64 * 3600 + p.minute() as i64 * 60 + p.second() as i64
}

/// Seconds since 0001-01-01 00:00:00.
fn absolute_seconds(t: &Tweet) -> i64 {
    t.posting_time.date().num_days_from_ce() as i64 * 86_400 + seconds_of_day(t)
}

/// Greedy longest-match coverage of `terms` over the tokens of `text`.
pub fn oracle_negativity(text: &str, terms: &[Vec<String>]) -> f64 {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return 0.0;
    }
    let mut covered = 0usize;
    let mut i = 0usize;
    while i < tokens.len() {
        let mut best = 0usize;
        for term in terms {
            let n = term.len();
            if n > best && i + n <= tokens.len() && tokens[i..i + n] == term[..] {
                best = n;
            }
        }
        if best > 0 {
            covered += best;
            i += best;
        } else {
            i += 1;
        }
    }
    covered as f64 / tokens.len() as f64
}

pub fn lexicon_terms(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(tokenize)
        .collect()
}

/// `[p_original, p_late_night, posts_per_week, posting_time_sd, p_negative, image_freq]`.
pub fn oracle_features(user: &UserRecord, terms: &[Vec<String>], threshold: f64) -> [f64; 6] {
    let tweets = &user.tweets;
    let n = tweets.len();
    if n == 0 {
        return [0.0; 6];
    }
    let mut original = 0usize;
    let mut late = 0usize;
    let mut images = 0usize;
    let mut negative = 0usize;
    let mut first = i64::MAX;
    let mut last = i64::MIN;
    for t in tweets {
        if t.is_original {
            original += 1;
        }
        if seconds_of_day(t) < 6 * 3600 {
            late += 1;
        }
        if t.has_images {
            images += 1;
        }
        if oracle_negativity(&t.text, terms) > threshold {
            negative += 1;
        }
        let s = absolute_seconds(t);
        first = first.min(s);
        last = last.max(s);
    }
    let span = ((last - first) as f64 / 86_400.0).max(1.0);
    let per_week = n as f64 / (span / 7.0);

    let sd = if n < 2 {
        0.0
    } else {
        let minutes: Vec<f64> = tweets
            .iter()
            .map(|t| seconds_of_day(t) as f64 / 60.0)
            .collect();
        let mut mean = 0.0;
        for m in &minutes {
            mean += m;
        }
        mean /= n as f64;
        let mut ss = 0.0;
        for m in &minutes {
            ss += (m - mean) * (m - mean);
        }
        (ss / n as f64).sqrt()
    };
    let nf = n as f64;
    [
        original as f64 / nf,
        late as f64 / nf,
        per_week,
        sd,
        negative as f64 / nf,
        images as f64 / nf,
    ]
}

// ---------------------------------------------------------------------------
// metrics recount

/// `(accuracy, precision, recall, f1)` by walking the samples once per metric.
pub fn oracle_metrics(preds: &[usize], labels: &[usize]) -> (f64, f64, f64, f64) {
    let n = preds.len();
    let correct = (0..n).filter(|&i| preds[i] == labels[i]).count();
    let predicted_pos = (0..n).filter(|&i| preds[i] == 1).count();
    let actual_pos = (0..n).filter(|&i| labels[i] == 1).count();
    let true_pos = (0..n).filter(|&i| preds[i] == 1 && labels[i] == 1).count();
    let accuracy = correct as f64 / n as f64;
    let precision = if predicted_pos == 0 {
        0.0
    } else {
        true_pos as f64 / predicted_pos as f64
    };
    let recall = if actual_pos == 0 {
        0.0
    } else {
        true_pos as f64 / actual_pos as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (accuracy, precision, recall, f1)
}

// ---------------------------------------------------------------------------
// gradient checking

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const GRAD_REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

/// A small model with randomized parameters plus a batch to differentiate.
pub struct GradFixture {
    pub model: FusionModel,
    pub batch: Vec<ModelInput>,
    pub labels: Vec<usize>,
}

/// Fixture `index` cycles through fusion mode, value projection, refinement
/// depth and query side; shapes stay within V <= 16, L <= 6, d <= 8.
pub fn grad_fixture(index: u64) -> GradFixture {
    let mut rng = SplitMix64::new(0xF1C7_0000 + index);
    let fusion = if index % 2 == 0 {
        Fusion::CrossAttention
    } else {
        Fusion::Concat
    };
    let value_projection = if (index / 2) % 2 == 0 {
        ValueProjection::SharedWithKey
    } else {
        ValueProjection::Separate
    };
    let refine_layers = if (index / 4) % 2 == 0 { 0 } else { 2 };
    let fusion_query = if (index / 8) % 2 == 0 {
        FusionQuery::Tokens
    } else {
        FusionQuery::Stats
    };
    let vocab_size = 6 + rng.below(11) as usize;
    let d1 = [4, 6, 8][rng.below(3) as usize];
    let config = ModelConfig {
        vocab_size,
        max_len: 8,
        d1,
        d2: 2 + rng.below(7) as usize,
        d_k: 2 + rng.below(7) as usize,
        mlp_hidden: 2 + rng.below(7) as usize,
        refine_layers,
        refine_heads: 2,
        fusion,
        value_projection,
        fusion_query,
        outer_relu: index % 3 == 0,
        ..ModelConfig::default()
    };
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain((SPECIALS.len()..vocab_size).map(|i| format!("t{i}")))
        .collect();
    let vocab = Vocab::from_tokens(tokens, 1).expect("fixture vocab is valid");
    let mut model = FusionModel::init(config, index)
        .and_then(|m| m.with_vocab(vocab))
        .expect("fixture config is valid");
    for p in model.params_mut() {
        for x in p.data_mut() {
            *x = 0.5 * rng.normal();
        }
    }
    let batch_size = 1 + rng.below(3) as usize;
    let batch = (0..batch_size)
        .map(|_| {
            let len = 1 + rng.below(6) as usize;
            let mut ids: Vec<u32> = (0..len)
                .map(|i| {
                    if i == 0 {
                        CLS
                    } else {
                        rng.below(vocab_size as u64) as u32
                    }
                })
                .collect();
            ids.resize(8, PAD);
            ModelInput {
                text: TextInput::Tokens(TokenSequence { ids, true_len: len }),
                stats: std::array::from_fn(|_| rng.normal()),
            }
        })
        .collect();
    let labels = (0..batch_size).map(|_| rng.below(2) as usize).collect();
    GradFixture {
        model,
        batch,
        labels,
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over every scalar parameter, with the name of the worst parameter.
pub fn max_grad_error(f: &GradFixture) -> (f64, String) {
    let batch: Vec<&ModelInput> = f.batch.iter().collect();
    let (_, grads) = f
        .model
        .loss_and_grads(&batch, &f.labels)
        .expect("forward succeeds");
    let mut model = f.model.clone();
    let mut worst = (0.0, String::new());
    for (pi, grad) in grads.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = model.params()[pi].data()[k];
            model.params_mut()[pi].data_mut()[k] = orig + FD_STEP;
            let plus = model.loss(&batch, &f.labels).expect("forward succeeds");
            model.params_mut()[pi].data_mut()[k] = orig - FD_STEP;
            let minus = model.loss(&batch, &f.labels).expect("forward succeeds");
            model.params_mut()[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let e = rel_err(grad.data()[k], numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{k}]", model.param_names()[pi]));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// corrupted corpora

/// Replacements that each make exactly one line unparseable.
pub fn malformed_line(kind: u64, valid: &str) -> Vec<u8> {
    match kind % 8 {
        0 => valid.as_bytes()[..valid.len() / 2].to_vec(),
        1 => valid.replacen("\"label\":", "\"labl\":", 1).into_bytes(),
        2 => valid
            .replacen("\"label\":0", "\"label\":7", 1)
            .replacen("\"label\":1", "\"label\":7", 1)
            .into_bytes(),
        3 => b"not json at all".to_vec(),
        4 => {
            let mut b = valid.as_bytes().to_vec();
            b.insert(1, 0xFF);
            b
        }
        5 => valid
            .replacen("\"posting_time\":\"", "\"posting_time\":\"yesterday ", 1)
            .into_bytes(),
        6 => valid
            .replacen("\"tweets\":[", "\"tweets\":\"oops\",\"x\":[", 1)
            .into_bytes(),
        _ => b"[1, 2, 3]".to_vec(),
    }
}

/// A JSON Lines corpus of `records` in which the lines at `bad` (0-based)
/// are replaced by malformed content.
pub fn corrupt_corpus(records: &[UserRecord], bad: &[usize]) -> Vec<u8> {
    let mut clean = Vec::new();
    write_corpus(&mut clean, records).expect("in-memory write");
    let text = String::from_utf8(clean).expect("utf-8");
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(pos) = bad.iter().position(|&b| b == i) {
            out.extend(malformed_line(pos as u64, line));
        } else {
            out.extend_from_slice(line.as_bytes());
        }
        out.push(b'\n');
    }
    out
}
