//! Shared fixtures for the benchmarks.

use moodfuse::features::LexiconScorer;
use moodfuse::model::{ModelInput, TextInput};
use moodfuse::synth::{generate_dataset, SynthDatasetSpec};
use moodfuse::text::{build_user_sequence, build_vocab};
use moodfuse::{FusionModel, ModelConfig, UserRecord};

pub fn synth_users(n_per_class: usize, seed: u64) -> Vec<UserRecord> {
    generate_dataset(&SynthDatasetSpec::new(n_per_class, seed))
        .expect("default synth spec is valid")
}

/// A model sized for `users` plus one input per user with unnormalized stats.
pub fn model_and_inputs(
    users: &[UserRecord],
    config: ModelConfig,
) -> (FusionModel, Vec<ModelInput>) {
    let vocab = build_vocab(users, 1).expect("min_freq 1 is valid");
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..config
    };
    let scorer = LexiconScorer::default_lexicon();
    let inputs = users
        .iter()
        .map(|u| {
            let stats =
                moodfuse::features::extract_features(u, &scorer, config.negativity_threshold)
                    .expect("lexicon scorer never fails")
                    .to_array();
            let seq = build_user_sequence(u, &vocab, config.max_len).expect("valid max_len");
            ModelInput {
                text: TextInput::Tokens(seq),
                stats,
            }
        })
        .collect();
    let model = FusionModel::init(config, 0)
        .expect("valid config")
        .with_vocab(vocab)
        .expect("vocab matches");
    (model, inputs)
}
