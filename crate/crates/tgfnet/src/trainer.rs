//! Training and evaluation loops.
//!
//! A fresh tape per step: bind parameters, forward, loss, backward, Adam.
//! Everything is deterministic given (config, seed, data); wall time only
//! appears in the metrics log, never in any checkpointed state.

use std::time::Instant;

use thiserror::Error;

use crate::config::RunConfig;
use crate::model::{
    compute_aa, compute_oa, forward_on_tape, inference, per_type_accuracy, total_loss,
    ModelConfig, TrainBatch,
};
use crate::nn::{AdamHyper, AdamState};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::synthvqa::{QaRecord, QuestionType, PAD_TOKEN};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("training aborted: loss became non-finite at step {step} (epoch {epoch})")]
    NanLoss { step: usize, epoch: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Pad question tokens and flatten grids into one batch.
pub fn build_batch(records: &[&QaRecord], cfg: &ModelConfig) -> Result<TrainBatch, TrainError> {
    let mut batch = TrainBatch::default();
    for r in records {
        if r.question.len() > cfg.n_tokens {
            return Err(TrainError::Invalid(format!(
                "question of {} tokens exceeds n_tokens = {}",
                r.question.len(),
                cfg.n_tokens
            )));
        }
        let mut toks = r.question.clone();
        toks.resize(cfg.n_tokens, PAD_TOKEN);
        batch.tokens.push(toks);
        batch.optical.extend_from_slice(&r.optical);
        batch.sar.extend_from_slice(&r.sar);
        batch.answers.push(r.answer_id);
        let ty = QuestionType::parse(&r.qtype)
            .ok_or_else(|| TrainError::Invalid(format!("unknown question type {}", r.qtype)))?;
        batch.types.push(ty.id());
    }
    Ok(batch)
}

/// Evaluation result on one record set.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub oa: f64,
    pub aa: f64,
    /// Per question-type id: (accuracy, sample count).
    pub per_type: std::collections::BTreeMap<usize, (f64, usize)>,
    pub preds: Vec<usize>,
}

/// Run inference over `records` in batches and score it.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    records: &[QaRecord],
) -> Result<EvalResult, TrainError> {
    if records.is_empty() {
        return Err(TrainError::Invalid("cannot evaluate an empty set".into()));
    }
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(cfg.batch.max(1)) {
        let refs: Vec<&QaRecord> = chunk.iter().collect();
        let batch = build_batch(&refs, cfg)?;
        let mut tape = Tape::new();
        let (outs, _) = forward_on_tape(&mut tape, store, cfg, &batch)?;
        preds.extend(inference(&tape, &outs));
    }
    let targets: Vec<usize> = records.iter().map(|r| r.answer_id).collect();
    let types: Vec<usize> = records
        .iter()
        .map(|r| QuestionType::parse(&r.qtype).map(|t| t.id()).unwrap_or(0))
        .collect();
    Ok(EvalResult {
        oa: compute_oa(&preds, &targets)?,
        aa: compute_aa(&preds, &targets, &types)?,
        per_type: per_type_accuracy(&preds, &targets, &types),
        preds,
    })
}

/// One metrics row per epoch.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oa: Option<f64>,
    pub val_aa: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainSummary {
    /// Metrics log as delimiter-separated text, one row per epoch.
    /// Floats are written in full round-trip precision.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_oa,val_aa,wall_s\n");
        for e in &self.epochs {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                e.epoch,
                e.train_loss,
                fmt(e.val_oa),
                fmt(e.val_aa),
                e.wall_s
            ));
        }
        s
    }
}

/// Train in place. Batches are drawn by seeded shuffle each epoch; an
/// optional validation set is scored every `eval_every` epochs.
pub fn train(
    store: &mut ParamStore,
    cfg: &RunConfig,
    train_set: &[QaRecord],
    val_set: &[QaRecord],
    seed: u64,
) -> Result<TrainSummary, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Invalid("training set is empty".into()));
    }
    let hyper = AdamHyper {
        lr: cfg.train.lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.adam_eps,
    };
    let mut adam = AdamState::new(store);
    let mut rng = Rng::derive(seed, 0x7261_696e);
    let mut steps = 0usize;
    let mut epochs = Vec::new();
    let started = Instant::now();
    'outer: for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.model.batch.max(1)) {
            let refs: Vec<&QaRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = build_batch(&refs, &cfg.model)?;
            let mut tape = Tape::new();
            let (outs, bound) = forward_on_tape(&mut tape, store, &cfg.model, &batch)?;
            let loss = total_loss(&mut tape, &outs, &batch.answers, cfg.model.lambda)?;
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(TrainError::NanLoss { step: steps, epoch });
            }
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            adam.step(store, &grads, &hyper);
            loss_sum += loss_val;
            loss_count += 1;
            steps += 1;
            if cfg.train.max_steps > 0 && steps >= cfg.train.max_steps {
                epochs.push(EpochMetrics {
                    epoch,
                    train_loss: loss_sum / loss_count as f64,
                    val_oa: None,
                    val_aa: None,
                    wall_s: started.elapsed().as_secs_f64(),
                });
                break 'outer;
            }
        }
        let evaluate_now = cfg.train.eval_every > 0
            && !val_set.is_empty()
            && (epoch + 1) % cfg.train.eval_every == 0;
        let (val_oa, val_aa) = if evaluate_now {
            let ev = evaluate(store, &cfg.model, val_set)?;
            (Some(ev.oa), Some(ev.aa))
        } else {
            (None, None)
        };
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / loss_count as f64,
            val_oa,
            val_aa,
            wall_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainSummary { steps, epochs })
}
