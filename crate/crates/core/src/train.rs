//! Training loop with Adam, class-weighted loss, validation-based model
//! selection, and early stopping.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Example, Vocabulary};
use crate::knowledge::KnowledgeIndex;
use crate::metrics::{Confusion, EvalReport, MetricSpec};
use crate::model::KetModel;
use crate::tensor::rng::SeededRng;
use crate::tensor::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged to {loss} at epoch {epoch}, batch {batch}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub metric: MetricSpec,
    pub majority_class: usize,
    pub class_names: Vec<String>,
    pub class_weights: Vec<f64>,
}

/// One line of the training log (JSONL). Wall-clock timing goes to stderr
/// instead of the log so that identical runs produce byte-identical logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Mutable loop state; the best metric over recorded checkpoints is
/// monotone non-decreasing by construction.
#[derive(Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub stale_epochs: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub log: Vec<EpochRecord>,
}

/// Evaluate a frozen model over examples, producing the full report.
pub fn evaluate(
    model: &KetModel,
    examples: &[Example],
    kb: &KnowledgeIndex,
    vocab: &Vocabulary,
    class_names: &[String],
    majority_class: usize,
) -> EvalReport {
    let ctx = model.batch_context(kb, vocab);
    let mut confusion = Confusion::new(model.config().classes);
    for ex in examples {
        let (pred, _) = model.predict(ex, &ctx);
        confusion.record(ex.label, pred);
    }
    EvalReport::from_confusion(&confusion, class_names, majority_class)
}

/// Train with seeded shuffling and Adam, evaluating on the validation split
/// after each epoch. The model is left holding the best-scoring parameters.
/// Epoch records are appended to `log_sink` as JSONL while training runs.
pub fn train(
    model: &KetModel,
    train_examples: &[Example],
    val_examples: &[Example],
    kb: &KnowledgeIndex,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    log_sink: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    assert!(!train_examples.is_empty(), "train: no training examples");
    assert!(!val_examples.is_empty(), "train: no validation examples");
    let mut optimizer = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.parameters(),
    );
    let mut state = TrainState {
        epoch: 0,
        best_metric: None,
        best_epoch: 0,
        stale_epochs: 0,
        seed: cfg.seed,
    };
    let mut best_snapshot = model.snapshot();
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let started = Instant::now();
        // reshuffle from the master seed so each epoch order is independent
        // of how previous epochs ran
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        let mut shuffle_rng = SeededRng::new(cfg.seed.wrapping_add(epoch as u64));
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_examples[i].clone()).collect();
            let ctx = model.batch_context(kb, vocab);
            let (loss, _) = model.batch_loss(&batch, &ctx, &cfg.class_weights);
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    loss: loss_value,
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            model.zero_grads();
            loss.backward();
            optimizer.step(model.parameters());
        }
        let train_loss = loss_sum / train_examples.len() as f64;

        let report = evaluate(
            model,
            val_examples,
            kb,
            vocab,
            &cfg.class_names,
            cfg.majority_class,
        );
        let val_metric = cfg.metric.value(&report);
        let improved = state.best_metric.is_none_or(|best| val_metric > best);
        if improved {
            state.best_metric = Some(val_metric);
            state.best_epoch = epoch;
            state.stale_epochs = 0;
            best_snapshot = model.snapshot();
        } else {
            state.stale_epochs += 1;
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            val_metric,
        };
        serde_json::to_writer(&mut *log_sink, &record).map_err(std::io::Error::from)?;
        log_sink.write_all(b"\n")?;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_metric {val_metric:.4} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
        log.push(record);

        if state.stale_epochs >= cfg.patience {
            break;
        }
    }

    model.restore(&best_snapshot);
    Ok(TrainOutcome {
        best_metric: state.best_metric.unwrap_or(0.0),
        best_epoch: state.best_epoch,
        epochs_run: log.len(),
        log,
    })
}
