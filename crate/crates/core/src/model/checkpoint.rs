//! Versioned JSON checkpoints.
//!
//! Layout: `{"version":1,"config":{..},"vocab":{"min_freq","tokens","fingerprint"},
//! "normalizer":{"mean","std"},"params":{name:{"shape":[r,c],"data":[..]}}}`.
//! Parameters are keyed by name in sorted order so the same model always
//! serializes to the same bytes.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{FusionModel, ModelConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::features::FeatureNormalizer;
use crate::tensor::Matrix;
use crate::text::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    min_freq: usize,
    tokens: Vec<String>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    vocab: VocabEntry,
    normalizer: FeatureNormalizer,
    params: BTreeMap<String, ParamEntry>,
}

/// Serialize to compact JSON followed by a newline.
pub fn save_checkpoint<W: Write>(model: &FusionModel, mut out: W) -> Result<()> {
    if model.config.encoder == TextEncoder::Toy && model.vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "model has a {}-token vocabulary but an embedding table for {}",
            model.vocab.len(),
            model.config.vocab_size
        )));
    }
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab: VocabEntry {
            min_freq: model.vocab.min_freq(),
            tokens: model.vocab.tokens().to_vec(),
            fingerprint: model.vocab.fingerprint(),
        },
        normalizer: model.normalizer.clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, m)| {
                let entry = ParamEntry {
                    shape: [m.rows(), m.cols()],
                    data: m.data().to_vec(),
                };
                (name.clone(), entry)
            })
            .collect(),
    };
    serde_json::to_writer(&mut out, &file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut source: R) -> Result<FusionModel> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    match raw.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {v} (expected {CHECKPOINT_VERSION})"
            )))
        }
        None => return Err(Error::Checkpoint("checkpoint has no version".into())),
    }
    let file: CheckpointFile = serde_json::from_value(raw)
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;

    let vocab = Vocab::from_tokens(file.vocab.tokens, file.vocab.min_freq)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if vocab.fingerprint() != file.vocab.fingerprint {
        return Err(Error::Checkpoint(
            "vocabulary fingerprint does not match its tokens".into(),
        ));
    }
    file.normalizer
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut named = HashMap::with_capacity(file.params.len());
    for (name, p) in file.params {
        let [r, c] = p.shape;
        if p.data.len() != r * c {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {r}x{c} needs {} values, found {}",
                r * c,
                p.data.len()
            )));
        }
        let m = Matrix::from_vec(r, c, p.data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !m.is_finite() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has non-finite values"
            )));
        }
        named.insert(name, m);
    }
    FusionModel::from_parts(file.config, vocab, file.normalizer, named).map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(other.to_string()),
    })
}
