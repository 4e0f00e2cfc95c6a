//! End-to-end glue: corpus records to examples, training runs, ablations,
//! and the text artifacts written by the command-line tool.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_dataset, Label, SplitSpec, UserRecord};
use crate::error::{Error, Result};
use crate::features::{
    extract_features, FeatureNormalizer, SentimentScorer, StatFeatureVector, FEATURE_NAMES,
};
use crate::metrics::MetricsReport;
use crate::model::{
    save_checkpoint, Fusion, FusionModel, ModelConfig, ModelInput, TextEncoder, TextInput,
};
use crate::text::{build_user_sequence, build_vocab, tokenize, PrecomputedEmbeddings, Vocab};
use crate::train::{evaluate, predict_proba, train, Example, TrainConfig, TrainHistory};

/// Per-user statistics with the user's id and label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub user_id: String,
    pub label: Label,
    pub features: StatFeatureVector,
}

pub fn featurize(
    records: &[UserRecord],
    scorer: &dyn SentimentScorer,
    threshold: f64,
) -> Result<Vec<FeatureRow>> {
    records
        .iter()
        .map(|r| {
            Ok(FeatureRow {
                user_id: r.user_id.clone(),
                label: r.label,
                features: extract_features(r, scorer, threshold)?,
            })
        })
        .collect()
}

/// Header of the feature CSV.
pub fn features_csv_header() -> String {
    let mut h = String::from("user_id,label");
    for name in FEATURE_NAMES {
        h.push(',');
        h.push_str(name);
    }
    h
}

/// CSV with [`features_csv_header`] and one row per user; values use the
/// shortest representation that parses back to the same `f64`.
pub fn features_csv(rows: &[FeatureRow]) -> String {
    let mut out = features_csv_header();
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{}", csv_field(&row.user_id), row.label.index());
        for v in row.features.to_array() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Turn records into network inputs using a fitted normalizer and either the
/// vocabulary (toy encoder) or a table of precomputed embeddings.
pub fn build_examples(
    records: &[UserRecord],
    config: &ModelConfig,
    vocab: &Vocab,
    normalizer: &FeatureNormalizer,
    scorer: &dyn SentimentScorer,
    embeddings: Option<&PrecomputedEmbeddings>,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let raw = extract_features(r, scorer, config.negativity_threshold)?;
            let text = match config.encoder {
                TextEncoder::Toy => {
                    TextInput::Tokens(build_user_sequence(r, vocab, config.max_len)?)
                }
                TextEncoder::Precomputed => {
                    let table = embeddings.ok_or_else(|| {
                        Error::Config(
                            "precomputed encoder selected but no embeddings were supplied".into(),
                        )
                    })?;
                    let m = table.get(&r.user_id).ok_or_else(|| {
                        Error::Format(format!("no precomputed embeddings for user {}", r.user_id))
                    })?;
                    TextInput::Embedded(m.clone())
                }
            };
            Ok(Example {
                user_id: r.user_id.clone(),
                input: ModelInput {
                    text,
                    stats: normalizer.apply(&raw.to_array()),
                },
                label: r.label,
            })
        })
        .collect()
}

/// Number of distinct corpus tokens (outside the special tokens) known to `vocab`.
pub fn vocab_overlap(vocab: &Vocab, records: &[UserRecord]) -> usize {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        let texts = [r.nickname.as_str(), r.profile.as_str()]
            .into_iter()
            .chain(r.tweets.iter().map(|t| t.text.as_str()));
        for text in texts {
            for tok in tokenize(text) {
                if vocab.contains(&tok) && !crate::text::SPECIALS.contains(&tok.as_str()) {
                    seen.insert(tok);
                }
            }
        }
    }
    seen.len()
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split_ratio: f64,
    pub min_freq: usize,
    /// Seeds the split, the parameter initialization and the batch order.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split_ratio: 0.8,
            min_freq: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub model: FusionModel,
    pub history: TrainHistory,
    pub report: MetricsReport,
    pub train_size: usize,
    pub val_size: usize,
}

impl RunOutput {
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        save_checkpoint(&self.model, &mut out)?;
        Ok(out)
    }

    pub fn history_csv(&self) -> String {
        self.history.to_csv()
    }

    pub fn metrics_json(&self) -> String {
        self.report.to_json()
    }
}

/// Split, build the vocabulary and normalizer on the training part, train,
/// and evaluate on the validation part.
pub fn run_training(
    records: &[UserRecord],
    config: &PipelineConfig,
    scorer: &dyn SentimentScorer,
    embeddings: Option<&PrecomputedEmbeddings>,
) -> Result<RunOutput> {
    let (train_records, val_records) = split_dataset(
        records,
        &SplitSpec {
            ratio: config.split_ratio,
            seed: config.seed,
        },
    )?;
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::Config(format!(
            "split produced {} training and {} validation users; both must be non-empty",
            train_records.len(),
            val_records.len()
        )));
    }

    let mut model_config = config.model.clone();
    let vocab = match model_config.encoder {
        TextEncoder::Toy => build_vocab(&train_records, config.min_freq)?,
        TextEncoder::Precomputed => {
            if config.min_freq == 0 {
                return Err(Error::Config("min_freq must be at least 1".into()));
            }
            Vocab::default()
        }
    };
    model_config.vocab_size = vocab.len();

    let raw: Vec<_> = train_records
        .iter()
        .map(|r| {
            extract_features(r, scorer, model_config.negativity_threshold).map(|f| f.to_array())
        })
        .collect::<Result<_>>()?;
    let normalizer = FeatureNormalizer::fit(&raw)?;

    let train_set = build_examples(
        &train_records,
        &model_config,
        &vocab,
        &normalizer,
        scorer,
        embeddings,
    )?;
    let val_set = build_examples(
        &val_records,
        &model_config,
        &vocab,
        &normalizer,
        scorer,
        embeddings,
    )?;

    let model = FusionModel::init(model_config, config.seed)?
        .with_vocab(vocab)?
        .with_normalizer(normalizer);
    let train_config = TrainConfig {
        seed: config.seed,
        ..config.train.clone()
    };
    log::info!(
        "training on {} users, validating on {} ({} parameters)",
        train_set.len(),
        val_set.len(),
        model.num_parameters()
    );
    let (model, history) = train(model, &train_set, &val_set, &train_config)?;
    let report = evaluate(&model, &val_set)?;
    Ok(RunOutput {
        model,
        history,
        report,
        train_size: train_set.len(),
        val_size: val_set.len(),
    })
}

/// One cell of the fusion x refinement comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub fusion: Fusion,
    pub refine_layers: usize,
}

impl AblationVariant {
    pub fn grid() -> [Self; 4] {
        [
            Self {
                fusion: Fusion::Concat,
                refine_layers: 0,
            },
            Self {
                fusion: Fusion::Concat,
                refine_layers: 2,
            },
            Self {
                fusion: Fusion::CrossAttention,
                refine_layers: 0,
            },
            Self {
                fusion: Fusion::CrossAttention,
                refine_layers: 2,
            },
        ]
    }

    /// File-name friendly label, e.g. `cross_attention-refine2`.
    pub fn label(&self) -> String {
        let fusion = match self.fusion {
            Fusion::Concat => "concat",
            Fusion::CrossAttention => "cross_attention",
        };
        format!("{fusion}-refine{}", self.refine_layers)
    }
}

/// Run every variant of [`AblationVariant::grid`] with otherwise identical settings.
pub fn run_ablation(
    records: &[UserRecord],
    config: &PipelineConfig,
    scorer: &dyn SentimentScorer,
    embeddings: Option<&PrecomputedEmbeddings>,
) -> Result<Vec<(AblationVariant, RunOutput)>> {
    AblationVariant::grid()
        .into_iter()
        .map(|variant| {
            let mut cfg = config.clone();
            cfg.model.fusion = variant.fusion;
            cfg.model.refine_layers = variant.refine_layers;
            log::info!("ablation variant {}", variant.label());
            run_training(records, &cfg, scorer, embeddings).map(|out| (variant, out))
        })
        .collect()
}

/// Summary table of an ablation: `variant,accuracy,precision,recall,f1`.
pub fn ablation_csv(results: &[(AblationVariant, RunOutput)]) -> String {
    let mut out = String::from("variant,accuracy,precision,recall,f1\n");
    for (v, r) in results {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            v.label(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        );
    }
    out
}

/// Featurize `records` the way `model` was trained and reject corpora that
/// share no vocabulary with it.
pub fn examples_for_model(
    model: &FusionModel,
    records: &[UserRecord],
    scorer: &dyn SentimentScorer,
    embeddings: Option<&PrecomputedEmbeddings>,
) -> Result<Vec<Example>> {
    if model.config.encoder == TextEncoder::Toy
        && !records.is_empty()
        && vocab_overlap(&model.vocab, records) == 0
    {
        return Err(Error::Config(
            "corpus shares no tokens with the checkpoint vocabulary (wrong checkpoint?)".into(),
        ));
    }
    build_examples(
        records,
        &model.config,
        &model.vocab,
        &model.normalizer,
        scorer,
        embeddings,
    )
}

/// `user_id,prob_depressed,prediction` rows.
pub fn predictions_csv(model: &FusionModel, examples: &[Example]) -> Result<String> {
    let inputs: Vec<&ModelInput> = examples.iter().map(|e| &e.input).collect();
    let probs = predict_proba(model, &inputs)?;
    let mut out = String::from("user_id,prob_depressed,prediction\n");
    for (e, p) in examples.iter().zip(probs) {
        let _ = writeln!(
            out,
            "{},{:.6},{}",
            csv_field(&e.user_id),
            p[1],
            u8::from(p[1] > 0.5)
        );
    }
    Ok(out)
}
