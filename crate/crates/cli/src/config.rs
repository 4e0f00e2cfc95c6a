//! Run configuration: built-in defaults, overridden by a flat TOML file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use moodfuse::model::{Fusion, FusionQuery, TextEncoder, ValueProjection};
use moodfuse::pipeline::PipelineConfig;
use moodfuse::{Error, Result};
use serde::Deserialize;

/// Every key accepted in a config file. All are optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // paths
    pub corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub seed: Option<u64>,
    pub n_per_class: Option<usize>,
    pub split_ratio: Option<f64>,
    pub min_freq: Option<usize>,
    pub negativity_threshold: Option<f64>,

    // model
    pub encoder: Option<TextEncoder>,
    pub max_len: Option<usize>,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub d_k: Option<usize>,
    pub refine_layers: Option<usize>,
    pub refine_heads: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub fusion: Option<Fusion>,
    pub value_projection: Option<ValueProjection>,
    pub fusion_query: Option<FusionQuery>,
    pub outer_relu: Option<bool>,

    // training
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub shuffle_each_epoch: Option<bool>,
    pub early_stop_patience: Option<usize>,
    pub record_wall_clock: Option<bool>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($field:ident),+ $(,)?) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )+
    };
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Fields set in `other` win.
    pub fn overlay(&mut self, other: &RunConfig) {
        overlay!(self, other;
            corpus, lexicon, embeddings, checkpoint, out,
            seed, n_per_class, split_ratio, min_freq, negativity_threshold,
            encoder, max_len, d1, d2, d_k, refine_layers, refine_heads, mlp_hidden,
            fusion, value_projection, fusion_query, outer_relu,
            learning_rate, batch_size, epochs, beta1, beta2, epsilon,
            shuffle_each_epoch, early_stop_patience, record_wall_clock,
        );
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig::default();
        macro_rules! set {
            ($($dst:expr => $field:ident),+ $(,)?) => {
                $( if let Some(v) = self.$field.clone() { $dst = v; } )+
            };
        }
        set!(
            p.seed => seed,
            p.split_ratio => split_ratio,
            p.min_freq => min_freq,
            p.model.negativity_threshold => negativity_threshold,
            p.model.encoder => encoder,
            p.model.max_len => max_len,
            p.model.d1 => d1,
            p.model.d2 => d2,
            p.model.d_k => d_k,
            p.model.refine_layers => refine_layers,
            p.model.refine_heads => refine_heads,
            p.model.mlp_hidden => mlp_hidden,
            p.model.fusion => fusion,
            p.model.value_projection => value_projection,
            p.model.fusion_query => fusion_query,
            p.model.outer_relu => outer_relu,
            p.train.learning_rate => learning_rate,
            p.train.batch_size => batch_size,
            p.train.epochs => epochs,
            p.train.beta1 => beta1,
            p.train.beta2 => beta2,
            p.train.epsilon => epsilon,
            p.train.shuffle_each_epoch => shuffle_each_epoch,
            p.train.early_stop_patience => early_stop_patience,
            p.train.record_wall_clock => record_wall_clock,
        );
        p.train.seed = p.seed;
        p
    }
}
