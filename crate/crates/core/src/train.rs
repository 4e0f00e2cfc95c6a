//! Cross-entropy loss, Adam, and the mini-batch training loop.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::metrics::{compute_confusion, metrics_from_confusion, MetricsReport};
use crate::model::{FusionModel, ModelInput};
use crate::rng::{stream, SplitMix64};
use crate::tensor::{Graph, Matrix};

/// Suited to fine-tuning a pretrained encoder; far too slow for the toy one.
pub const FINE_TUNE_LEARNING_RATE: f64 = 1e-6;
/// Learning rate that converges at toy scale from random initialization.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// Epochs without a new best validation accuracy before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Record elapsed seconds per epoch in the history. Off by default so that
    /// histories from identical runs are byte-identical.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 8,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            shuffle_each_epoch: true,
            early_stop_patience: 0,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` must be `Some` with the shape of `params[i]`.
pub fn adam_step(
    params: &mut [Matrix],
    grads: &[Option<Matrix>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Usage(format!(
            "adam_step: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("adam_step: parameter {i} has no gradient")))?;
        if g.shape() != p.shape()
            || state.m[i].shape() != p.shape()
            || state.v[i].shape() != p.shape()
        {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().expect("checked above");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Mean cross-entropy of `B x 2` logits against labels in {0, 1}.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone())?;
    let loss = g.cross_entropy(x, labels)?;
    Ok(g.value(loss).get(0, 0))
}

/// A featurized user ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user_id: String,
    pub input: ModelInput,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_acc,val_f1,seconds";

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.8},{:.6},{:.6},{:.3}",
                e.epoch, e.train_loss, e.val_acc, e.val_f1, e.seconds
            );
        }
        out
    }
}

/// Softmax rows `[p_normal, p_depressed]` for each input.
pub fn predict_proba(model: &FusionModel, inputs: &[&ModelInput]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let logits = model.logits(chunk)?;
        for r in 0..logits.rows() {
            let mut row = [logits.get(r, 0), logits.get(r, 1)];
            crate::tensor::softmax_in_place(&mut row);
            out.push(row);
        }
    }
    Ok(out)
}

/// Class 1 iff its probability exceeds 0.5; ties go to class 0.
pub fn predict(model: &FusionModel, inputs: &[&ModelInput]) -> Result<Vec<usize>> {
    Ok(predict_proba(model, inputs)?
        .into_iter()
        .map(|p| usize::from(p[1] > 0.5))
        .collect())
}

pub fn evaluate(model: &FusionModel, dataset: &[Example]) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let inputs: Vec<&ModelInput> = dataset.iter().map(|e| &e.input).collect();
    let preds = predict(model, &inputs)?;
    let labels: Vec<usize> = dataset.iter().map(|e| e.label.index()).collect();
    metrics_from_confusion(&compute_confusion(&preds, &labels)?)
}

/// Train with Adam on shuffled mini-batches, evaluating on `val_set` after
/// every epoch.
///
/// With `early_stop_patience > 0` the parameters with the best validation
/// accuracy (earliest on ties) are returned; otherwise the final ones.
pub fn train(
    mut model: FusionModel,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<(FusionModel, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }

    let mut rng = SplitMix64::derive(config.seed, stream::TRAIN);
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, Vec<Matrix>)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        if config.shuffle_each_epoch {
            rng.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<&ModelInput> = batch.iter().map(|&i| &train_set[i].input).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set[i].label.index()).collect();
            let (loss, grads) = model.loss_and_grads(&inputs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss in epoch {epoch}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            let grads: Vec<Option<Matrix>> = grads.into_iter().map(Some).collect();
            adam_step(model.params_mut(), &grads, &mut state, config)?;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Numerical(format!(
                    "parameters diverged in epoch {epoch}"
                )));
            }
        }
        let report = evaluate(&model, val_set)?;
        let seconds = if config.record_wall_clock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_acc: report.accuracy,
            val_f1: report.f1,
            seconds,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_acc {:.4} val_f1 {:.4}",
            record.train_loss,
            record.val_acc,
            record.val_f1
        );
        history.epochs.push(record);

        if config.early_stop_patience > 0 {
            if best
                .as_ref()
                .is_none_or(|(acc, _)| report.accuracy > *acc)
            {
                best = Some((report.accuracy, model.params().to_vec()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.early_stop_patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().clone_from_slice(&params);
    }
    Ok((model, history))
}
