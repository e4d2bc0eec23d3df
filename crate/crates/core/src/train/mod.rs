//! Losses, optimizer, metrics, synthetic data and the training loop.

mod adam;
mod erf;
mod loss;
mod metrics;
mod synth;

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use erf::{erf_map, write_pgm};
pub use loss::{dice_ce_loss, dice_ce_value, one_hot, softmax_rows, DICE_SMOOTH};
pub use metrics::{dice_score, iou, predict_mask, to_mask, THRESHOLD};
pub use synth::{components, gen_synthetic, largest_component, SynthTask, TaskKind};

use crate::autodiff::Graph;
use crate::error::{arg_err, Result};
use crate::ndtensor::Tensor;
use crate::rng;
use crate::scalar::Scalar;
use crate::segmodel::{build_model, model_forward, ModelConfig, ModelWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after the first epoch whose validation Dice reaches this value.
    pub target_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, train_size: 200, val_size: 50, batch_size: 8, lr: 3e-3, target_dice: None }
    }
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: ModelWeights<T>,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.history.iter().rev().find(|r| r.split == split)
    }
}

struct SampleResult<T: Scalar> {
    grads: Vec<Tensor<T>>,
    loss: f64,
    dice: f64,
    iou: f64,
}

fn sample<T: Scalar>(task: &SynthTask, index: u64, classes: usize) -> Result<(Tensor<T>, Tensor<T>, Vec<bool>)> {
    let (img, mask) = gen_synthetic::<T>(task, index)?;
    let target = one_hot(&mask, classes)?;
    Ok((img, target, to_mask(&mask)))
}

fn train_sample<T: Scalar>(model: &ModelWeights<T>, task: &SynthTask, index: u64) -> Result<SampleResult<T>> {
    let (img, target, truth) = sample::<T>(task, index, model.cfg.classes)?;
    let mut g = Graph::with_params(&model.params);
    let x = g.constant(img);
    let logits = model_forward(&mut g, x, model)?;
    let loss = dice_ce_loss(&mut g, logits, &target)?;
    let pred = predict_mask(g.value(logits));
    let grads = g.backward(loss)?.for_params(&model.params);
    Ok(SampleResult {
        grads,
        loss: g.value(loss).item()?.to_f64_lossy(),
        dice: dice_score(&pred, &truth)?,
        iou: iou(&pred, &truth)?,
    })
}

/// Mean loss, Dice and IoU over samples `indices`.
pub fn evaluate<T: Scalar>(
    model: &ModelWeights<T>,
    task: &SynthTask,
    indices: std::ops::Range<u64>,
) -> Result<(f64, f64, f64)> {
    let n = (indices.end - indices.start) as f64;
    let rows: Vec<(f64, f64, f64)> = indices
        .into_par_iter()
        .map(|i| {
            let (img, target, truth) = sample::<T>(task, i, model.cfg.classes)?;
            let logits = model.logits(&img)?;
            let pred = predict_mask(&logits);
            Ok((
                dice_ce_value(&logits, &target)?.to_f64_lossy(),
                dice_score(&pred, &truth)?,
                iou(&pred, &truth)?,
            ))
        })
        .collect::<Result<_>>()?;
    let sum = rows.iter().fold((0.0, 0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1, a.2 + r.2));
    Ok((sum.0 / n, sum.1 / n, sum.2 / n))
}

/// Trains a freshly built model on `task` with Adam.
///
/// Samples `0..train_size` form the training set and the next `val_size`
/// the validation set. Minibatch gradients are averaged in sample order, so
/// results do not depend on the thread count. The history starts with an
/// epoch-0 validation row for the untrained model.
pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    task: &SynthTask,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    if cfg.train_size == 0 || cfg.val_size == 0 || cfg.batch_size == 0 {
        return Err(arg_err!("train/val/batch sizes must be positive"));
    }
    if task.size.as_slice() != model_cfg.input_size.as_slice() {
        return Err(arg_err!("task size {:?} does not match model input {:?}", task.size, model_cfg.input_size));
    }
    let mut model = build_model::<T>(model_cfg, rng::derive(seed, "model"))?;
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut order_rng = rng::stream(seed, "shuffle");
    let (ntrain, nval) = (cfg.train_size as u64, cfg.val_size as u64);
    let val = ntrain..ntrain + nval;
    let start = Instant::now();
    let mut history = Vec::new();
    let record = |epoch, split: &str, (loss, dice, iou): (f64, f64, f64)| EpochRecord {
        epoch,
        split: split.to_string(),
        loss,
        dice,
        iou,
        seconds: start.elapsed().as_secs_f64(),
    };
    history.push(record(0, "val", evaluate(&model, task, val.clone())?));

    let mut order: Vec<u64> = (0..ntrain).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut totals = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SampleResult<T>> = batch
                .par_iter()
                .map(|&i| train_sample(&model, task, i))
                .collect::<Result<_>>()?;
            let scale = T::lit(1.0 / batch.len() as f64);
            let mut acc: Vec<Tensor<T>> = results[0].grads.clone();
            for r in &results[1..] {
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    *a = a.zip_map(g, |x, y| x + y)?;
                }
            }
            let acc: Vec<Tensor<T>> = acc.iter().map(|a| a.map(|v| v * scale)).collect();
            adam_step(&mut model.params, &acc, &mut adam)?;
            for r in &results {
                totals = (totals.0 + r.loss, totals.1 + r.dice, totals.2 + r.iou);
            }
        }
        let n = ntrain as f64;
        history.push(record(epoch, "train", (totals.0 / n, totals.1 / n, totals.2 / n)));
        let v = evaluate(&model, task, val.clone())?;
        history.push(record(epoch, "val", v));
        if cfg.target_dice.is_some_and(|t| v.1 >= t) {
            break;
        }
    }
    Ok(TrainOutcome { model, history })
}
