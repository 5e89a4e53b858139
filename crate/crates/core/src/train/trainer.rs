use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::{compute_metrics, confusion_matrix, MetricsReport};
use super::model::TclMap;
use super::optim::{AdamW, AdamWConfig};
use crate::data::{Dataset, ModalityBundle};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::substrate::{Graph, ParamStore, RngSeed};

/// RNG stream that orders training samples (distinct from initialization).
const SHUFFLE_STREAM: u64 = 2;

pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossReport,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains from scratch and keeps the parameters of the epoch with the best
/// validation accuracy (earliest on ties, last epoch without a val split).
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::config("the train split is empty"));
    }
    let (mut best, model) = Checkpoint::initialize(config, &dataset.manifest)?;
    let mut store = best.params.clone();
    let mut optimizer = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        },
        &store,
    );
    let mut rng = RngSeed(config.seed).stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_acc: Option<f64> = None;
    let mut since_best = 0;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut con_sum, mut cls_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ModalityBundle> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (grads, con, cls) = {
                let mut g = Graph::new(&store);
                let nodes = model.loss(&mut g, &batch)?;
                let con = nodes.contrastive.map_or(0.0, |v| g.scalar(v) as f64);
                let cls = g.scalar(nodes.classification) as f64;
                if !(con.is_finite() && cls.is_finite()) {
                    return Err(Error::NanLoss {
                        step,
                        contrastive: con,
                        classification: cls,
                    });
                }
                (g.backward(nodes.total)?, con, cls)
            };
            optimizer.step(&mut store, &grads)?;
            con_sum += con;
            cls_sum += cls;
            batches += 1;
            step += 1;
        }
        let n = batches as f64;
        let val = if dataset.val.is_empty() {
            None
        } else {
            Some(evaluate_with(&model, &store, config.eval_batch_size, &dataset.val)?)
        };
        let improved = match (&val, best_acc) {
            (None, _) => true,
            (Some(m), None) => {
                best_acc = Some(m.acc);
                true
            }
            (Some(m), Some(b)) if m.acc > b => {
                best_acc = Some(m.acc);
                true
            }
            _ => false,
        };
        if improved {
            best.params = store.clone();
            best.epoch = epoch;
            best.best_val_acc = best_acc;
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(EpochRecord {
            epoch,
            loss: LossReport::new(con_sum / n, cls_sum / n),
            val,
        });
        if config.patience > 0 && since_best >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best,
        history,
    })
}

/// Normal-branch arg-max predictions in batches of `batch_size`.
pub fn predict_with(
    model: &TclMap,
    store: &ParamStore<f32>,
    batch_size: usize,
    samples: &[ModalityBundle],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&ModalityBundle> = chunk.iter().collect();
        out.extend(model.predict(store, &batch)?);
    }
    Ok(out)
}

fn evaluate_with(
    model: &TclMap,
    store: &ParamStore<f32>,
    batch_size: usize,
    samples: &[ModalityBundle],
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Degenerate("cannot evaluate an empty split".into()));
    }
    let predicted = predict_with(model, store, batch_size, samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&confusion_matrix(&truth, &predicted, model.manifest.num_labels)?)
}

/// Metrics of the checkpoint on `samples`. Labels only feed the confusion
/// matrix; the augmented branch never runs.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[ModalityBundle]) -> Result<MetricsReport> {
    let model = checkpoint.model()?;
    evaluate_with(&model, &checkpoint.params, checkpoint.config.eval_batch_size, samples)
}

pub fn predict(checkpoint: &Checkpoint, samples: &[ModalityBundle]) -> Result<Vec<usize>> {
    let model = checkpoint.model()?;
    predict_with(&model, &checkpoint.params, checkpoint.config.eval_batch_size, samples)
}

/// One JSON object per line.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in history {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
