//! The fusion network.
//!
//! ```text
//! tokens --embed(+pos)--[refine blocks]--> T (L x d1) --+
//!                                                      |-- cross-attention --pool--> MLP --> 2 logits
//! 6 stats --per-feature affine-------------> S (6 x d2)-+
//! ```
//!
//! With `fusion = concat` the attention layer is replaced by concatenating
//! the row means of `T` and `S`.

mod checkpoint;
mod layers;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::{attend, mlp, Attended, CrossAttentionLayer, MlpHead};

use crate::error::{Error, Result};
use crate::features::{FeatureNormalizer, DEFAULT_NEGATIVITY_THRESHOLD, NUM_FEATURES};
use crate::rng::{stream, SplitMix64};
use crate::tensor::{Graph, Matrix, Var};
use crate::text::{TokenSequence, Vocab, DEFAULT_MAX_LEN, MIN_MAX_LEN};
use layers::BlockSlots;

pub const NUM_CLASSES: usize = 2;
const EMBEDDING_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    CrossAttention,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueProjection {
    SharedWithKey,
    Separate,
}

/// Which side supplies the attention queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionQuery {
    Tokens,
    Stats,
}

/// Source of the token matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoder {
    /// Trainable embedding and positional tables.
    Toy,
    /// Externally computed per-user embeddings.
    Precomputed,
}

macro_rules! impl_from_str {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "invalid {}: {other:?} (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

impl_from_str!(Fusion { "cross_attention" => Fusion::CrossAttention, "concat" => Fusion::Concat });
impl_from_str!(ValueProjection {
    "shared_with_key" => ValueProjection::SharedWithKey,
    "separate" => ValueProjection::Separate,
});
impl_from_str!(FusionQuery { "tokens" => FusionQuery::Tokens, "stats" => FusionQuery::Stats });
impl_from_str!(TextEncoder { "toy" => TextEncoder::Toy, "precomputed" => TextEncoder::Precomputed });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: TextEncoder,
    /// Rows of the token embedding table (toy encoder only).
    pub vocab_size: usize,
    /// Rows of the positional table; also the sequence length used when
    /// building token inputs.
    pub max_len: usize,
    pub d1: usize,
    pub d2: usize,
    pub d_k: usize,
    pub refine_layers: usize,
    pub refine_heads: usize,
    pub mlp_hidden: usize,
    pub fusion: Fusion,
    pub value_projection: ValueProjection,
    pub outer_relu: bool,
    pub fusion_query: FusionQuery,
    /// Threshold used when featurizing inputs for this model.
    pub negativity_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: TextEncoder::Toy,
            vocab_size: 4,
            max_len: DEFAULT_MAX_LEN,
            d1: 32,
            d2: 32,
            d_k: 32,
            refine_layers: 0,
            refine_heads: 4,
            mlp_hidden: 32,
            fusion: Fusion::CrossAttention,
            value_projection: ValueProjection::SharedWithKey,
            outer_relu: false,
            fusion_query: FusionQuery::Tokens,
            negativity_threshold: DEFAULT_NEGATIVITY_THRESHOLD,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("d1", self.d1),
            ("d2", self.d2),
            ("d_k", self.d_k),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.refine_layers > 0 {
            if self.refine_heads == 0 {
                return bad("refine_heads must be at least 1".into());
            }
            if !self.d1.is_multiple_of(self.refine_heads) {
                return bad(format!(
                    "refine_heads ({}) must divide d1 ({})",
                    self.refine_heads, self.d1
                ));
            }
        }
        if self.encoder == TextEncoder::Toy {
            if self.vocab_size < 4 {
                return bad(format!(
                    "vocab_size must be at least 4, got {}",
                    self.vocab_size
                ));
            }
            if self.max_len < MIN_MAX_LEN {
                return bad(format!(
                    "max_len must be at least {MIN_MAX_LEN}, got {}",
                    self.max_len
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.negativity_threshold) {
            return bad(format!(
                "negativity_threshold must lie in [0, 1], got {}",
                self.negativity_threshold
            ));
        }
        Ok(())
    }

    /// Width of the pooled vector fed to the MLP head.
    pub fn fused_width(&self) -> usize {
        match (self.fusion, self.fusion_query) {
            (Fusion::Concat, _) => self.d1 + self.d2,
            (Fusion::CrossAttention, FusionQuery::Tokens) => self.d_k,
            (Fusion::CrossAttention, FusionQuery::Stats) => NUM_FEATURES * self.d_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: (usize, usize),
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct FusionSlots {
    w_q: usize,
    w_k: usize,
    w_v: Option<usize>,
}

/// Positions of every parameter in the flat parameter list.
#[derive(Debug, Clone)]
struct Layout {
    token: Option<usize>,
    position: Option<usize>,
    blocks: Vec<BlockSlots>,
    stats_scale: usize,
    stats_bias: usize,
    fusion: Option<FusionSlots>,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut add = |name: String, shape: (usize, usize), init: Init| {
        specs.push(ParamSpec { name, shape, init });
        specs.len() - 1
    };
    let glorot = |r: usize, c: usize| Init::Glorot {
        fan_in: r,
        fan_out: c,
    };

    let (token, position) = match cfg.encoder {
        TextEncoder::Toy => (
            Some(add(
                "embed.token".into(),
                (cfg.vocab_size, cfg.d1),
                Init::Normal(EMBEDDING_INIT_STD),
            )),
            Some(add(
                "embed.position".into(),
                (cfg.max_len, cfg.d1),
                Init::Normal(EMBEDDING_INIT_STD),
            )),
        ),
        TextEncoder::Precomputed => (None, None),
    };

    let d = cfg.d1;
    let ff = 4 * d;
    let blocks = (0..cfg.refine_layers)
        .map(|i| {
            let mut p = |suffix: &str, shape: (usize, usize), init: Init| {
                add(format!("refine.{i}.{suffix}"), shape, init)
            };
            BlockSlots {
                w_q: p("attn.w_q", (d, d), glorot(d, d)),
                b_q: p("attn.b_q", (1, d), Init::Zeros),
                w_k: p("attn.w_k", (d, d), glorot(d, d)),
                b_k: p("attn.b_k", (1, d), Init::Zeros),
                w_v: p("attn.w_v", (d, d), glorot(d, d)),
                b_v: p("attn.b_v", (1, d), Init::Zeros),
                w_o: p("attn.w_o", (d, d), glorot(d, d)),
                b_o: p("attn.b_o", (1, d), Init::Zeros),
                norm1_gain: p("norm1.gain", (1, d), Init::Ones),
                norm1_bias: p("norm1.bias", (1, d), Init::Zeros),
                ff_w1: p("ff.w1", (d, ff), glorot(d, ff)),
                ff_b1: p("ff.b1", (1, ff), Init::Zeros),
                ff_w2: p("ff.w2", (ff, d), glorot(ff, d)),
                ff_b2: p("ff.b2", (1, d), Init::Zeros),
                norm2_gain: p("norm2.gain", (1, d), Init::Ones),
                norm2_bias: p("norm2.bias", (1, d), Init::Zeros),
            }
        })
        .collect();

    // Each statistic gets its own scalar -> d2 affine map.
    let stats_scale = add(
        "stats.scale".into(),
        (NUM_FEATURES, cfg.d2),
        Init::Glorot {
            fan_in: 1,
            fan_out: cfg.d2,
        },
    );
    let stats_bias = add("stats.bias".into(), (NUM_FEATURES, cfg.d2), Init::Zeros);

    let fusion = (cfg.fusion == Fusion::CrossAttention).then(|| {
        let (dq, dkv) = match cfg.fusion_query {
            FusionQuery::Tokens => (cfg.d1, cfg.d2),
            FusionQuery::Stats => (cfg.d2, cfg.d1),
        };
        FusionSlots {
            w_q: add("fusion.w_q".into(), (dq, cfg.d_k), glorot(dq, cfg.d_k)),
            w_k: add("fusion.w_k".into(), (dkv, cfg.d_k), glorot(dkv, cfg.d_k)),
            w_v: (cfg.value_projection == ValueProjection::Separate)
                .then(|| add("fusion.w_v".into(), (dkv, cfg.d_k), glorot(dkv, cfg.d_k))),
        }
    });

    let d_in = cfg.fused_width();
    let h = cfg.mlp_hidden;
    let mlp_w1 = add("mlp.w1".into(), (d_in, h), glorot(d_in, h));
    let mlp_b1 = add("mlp.b1".into(), (1, h), Init::Zeros);
    let mlp_w2 = add("mlp.w2".into(), (h, NUM_CLASSES), glorot(h, NUM_CLASSES));
    let mlp_b2 = add("mlp.b2".into(), (1, NUM_CLASSES), Init::Zeros);

    let layout = Layout {
        token,
        position,
        blocks,
        stats_scale,
        stats_bias,
        fusion,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
    };
    (specs, layout)
}

/// Text side of one model input.
#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Tokens(TokenSequence),
    /// `L x d1` rows from an external encoder.
    Embedded(Matrix),
}

/// One user as seen by the network: text plus normalized statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub text: TextInput,
    pub stats: [f64; NUM_FEATURES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub normalizer: FeatureNormalizer,
    names: Vec<String>,
    params: Vec<Matrix>,
    index: HashMap<String, usize>,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // derived entirely from the config
        true
    }
}

/// Glorot-uniform weights, zero biases, `N(0, 0.02)` embedding rows.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<FusionModel> {
    FusionModel::init(config.clone(), seed)
}

impl FusionModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = build_layout(&config);
        let mut rng = SplitMix64::derive(seed, stream::INIT);
        let params = specs
            .iter()
            .map(|s| {
                let (r, c) = s.shape;
                let data = (0..r * c)
                    .map(|_| match s.init {
                        Init::Glorot { fan_in, fan_out } => {
                            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                            rng.uniform(-bound, bound)
                        }
                        Init::Normal(std) => std * rng.normal(),
                        Init::Zeros => 0.0,
                        Init::Ones => 1.0,
                    })
                    .collect();
                Matrix::from_vec(r, c, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = specs.into_iter().map(|s| s.name).collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            vocab: Vocab::default(),
            normalizer: FeatureNormalizer::default(),
            names,
            params,
            index,
            layout,
        })
    }

    /// Attach the vocabulary the embedding table was sized for.
    pub fn with_vocab(mut self, vocab: Vocab) -> Result<Self> {
        if self.config.encoder == TextEncoder::Toy && vocab.len() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        self.vocab = vocab;
        Ok(self)
    }

    pub fn with_normalizer(mut self, normalizer: FeatureNormalizer) -> Self {
        self.normalizer = normalizer;
        self
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn cross_attention_layer(&self) -> Option<CrossAttentionLayer> {
        self.layout.fusion.map(|f| CrossAttentionLayer {
            w_q: self.params[f.w_q].clone(),
            w_k: self.params[f.w_k].clone(),
            w_v: f.w_v.map(|i| self.params[i].clone()),
        })
    }

    pub fn mlp_head(&self) -> MlpHead {
        let l = &self.layout;
        MlpHead {
            w1: self.params[l.mlp_w1].clone(),
            b1: self.params[l.mlp_b1].clone(),
            w2: self.params[l.mlp_w2].clone(),
            b2: self.params[l.mlp_b2].clone(),
        }
    }

    /// Register every parameter as a leaf of `g`, in parameter order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    /// Token matrix for one user: `true_len x d1` (at least the CLS row).
    pub fn encode_tokens(&self, g: &mut Graph, p: &[Var], text: &TextInput) -> Result<Var> {
        let mut x = match (text, self.layout.token, self.layout.position) {
            (TextInput::Tokens(seq), Some(token), Some(position)) => {
                let n = seq
                    .true_len
                    .clamp(1, seq.ids.len().min(self.config.max_len));
                let ids: Vec<usize> = seq.ids[..n].iter().map(|&i| i as usize).collect();
                if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
                    return Err(Error::Usage(format!(
                        "token id {bad} out of range for vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                let emb = g.gather_rows(p[token], &ids)?;
                let pos = g.slice_rows(p[position], 0, n)?;
                g.add(emb, pos)?
            }
            (TextInput::Embedded(m), None, None) => {
                if m.cols() != self.config.d1 {
                    return Err(Error::dim(
                        "precomputed embeddings",
                        m.shape(),
                        (m.rows(), self.config.d1),
                    ));
                }
                if m.rows() == 0 {
                    return Err(Error::Usage(
                        "precomputed embedding matrix has no rows".into(),
                    ));
                }
                g.constant(m.clone())?
            }
            (TextInput::Tokens(_), ..) => {
                return Err(Error::Usage(
                    "model expects precomputed embeddings, got token ids".into(),
                ))
            }
            (TextInput::Embedded(_), ..) => {
                return Err(Error::Usage(
                    "model expects token ids, got precomputed embeddings".into(),
                ))
            }
        };
        for block in &self.layout.blocks {
            x = layers::refine_block(g, p, block, self.config.refine_heads, x)?;
        }
        Ok(x)
    }

    /// Statistic matrix: row j is `scale_j * stats[j] + bias_j` (`6 x d2`).
    pub fn encode_stats(
        &self,
        g: &mut Graph,
        p: &[Var],
        stats: &[f64; NUM_FEATURES],
    ) -> Result<Var> {
        let v = g.constant(Matrix::column_vector(stats))?;
        let scaled = g.mul(p[self.layout.stats_scale], v)?;
        g.add(scaled, p[self.layout.stats_bias])
    }

    /// Pooled `1 x fused_width` representation of one user.
    pub fn fuse(&self, g: &mut Graph, p: &[Var], input: &ModelInput) -> Result<Var> {
        let t = self.encode_tokens(g, p, &input.text)?;
        let s = self.encode_stats(g, p, &input.stats)?;
        match (self.config.fusion, self.layout.fusion) {
            (Fusion::CrossAttention, Some(f)) => {
                let w_v = f.w_v.map(|i| p[i]);
                match self.config.fusion_query {
                    FusionQuery::Tokens => {
                        let a = attend(g, p[f.w_q], p[f.w_k], w_v, t, s)?;
                        g.mean_rows(a.output)
                    }
                    FusionQuery::Stats => {
                        let a = attend(g, p[f.w_q], p[f.w_k], w_v, s, t)?;
                        g.reshape(a.output, 1, NUM_FEATURES * self.config.d_k)
                    }
                }
            }
            _ => {
                let tm = g.mean_rows(t)?;
                let sm = g.mean_rows(s)?;
                g.concat_cols(&[tm, sm])
            }
        }
    }

    /// `B x 2` logits for a batch.
    pub fn forward(&self, g: &mut Graph, p: &[Var], batch: &[&ModelInput]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Usage("forward on an empty batch".into()));
        }
        let fused = batch
            .iter()
            .map(|input| self.fuse(g, p, input))
            .collect::<Result<Vec<_>>>()?;
        let x = g.concat_rows(&fused)?;
        let l = &self.layout;
        mlp(
            g,
            p[l.mlp_w1],
            p[l.mlp_b1],
            p[l.mlp_w2],
            p[l.mlp_b2],
            x,
            self.config.outer_relu,
        )
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, batch: &[&ModelInput]) -> Result<Matrix> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let out = self.forward(&mut g, &p, batch)?;
        Ok(g.value(out).clone())
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, batch: &[&ModelInput], labels: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let out = self.forward(&mut g, &p, batch)?;
        let loss = g.cross_entropy(out, labels)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// Mean cross-entropy and its gradient for every parameter, in parameter order.
    pub fn loss_and_grads(
        &self,
        batch: &[&ModelInput],
        labels: &[usize],
    ) -> Result<(f64, Vec<Matrix>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true)?;
        let out = self.forward(&mut g, &p, batch)?;
        let loss = g.cross_entropy(out, labels)?;
        g.backward(loss)?;
        let value = g.value(loss).get(0, 0);
        let grads = p
            .iter()
            .map(|&v| {
                g.take_grad(v)
                    .ok_or_else(|| Error::Usage("parameter received no gradient".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, grads))
    }

    fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        normalizer: FeatureNormalizer,
        mut named: HashMap<String, Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = build_layout(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            let m = named
                .remove(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", s.name)))?;
            if m.shape() != s.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: config implies {}x{}, found {}x{}",
                    s.name,
                    s.shape.0,
                    s.shape.1,
                    m.rows(),
                    m.cols()
                )));
            }
            names.push(s.name);
            params.push(m);
        }
        if let Some(extra) = named.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            config,
            vocab: Vocab::default(),
            normalizer,
            names,
            params,
            index,
            layout,
        }
        .with_vocab(vocab)
    }
}
