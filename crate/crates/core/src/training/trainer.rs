//! Early-stopped training loop with periodic validation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::InstructExample;
use crate::error::{Error, Result};
use crate::model::forward::Weights;
use crate::model::Model;
use crate::tensor::Scalar;
use crate::tokenizer::TokenizerModel;
use crate::training::backward::batch_seqs;
use crate::training::{
    batch_pass, batchify, optimizer_step, sequence_pass, EncodedExample, GradPlan, OptimizerState, SeqWork, TrainConfig,
};

/// True when at least `patience` evaluations have passed since the first
/// occurrence of the minimum.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let Some(best) = history
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
            Some((_, b)) if v >= b => acc,
            _ => Some((i, v)),
        })
    else {
        return false;
    };
    history.len() - 1 - best.0 >= patience
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_perplexity: f64,
}

/// CSV sink `step,split,loss,perplexity`, flushed after every record.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        };
        w.line("step,split,loss,perplexity")?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        if let Some(t) = r.train_loss {
            self.line(&format!("{},train,{},{}", r.step, t, t.exp()))?;
        }
        self.line(&format!("{},val,{},{}", r.step, r.val_loss, r.val_perplexity))
    }
}

/// Token-weighted mean masked cross-entropy over `examples` and the number of
/// scored tokens. Per-example sums are combined in input order.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, examples: &[EncodedExample], full_sequence: bool) -> Result<(f64, usize)> {
    let w = Weights::new(model)?;
    let plan = GradPlan::new(&w);
    let masks: Vec<Vec<bool>> = examples.iter().map(|e| e.mask(full_sequence)).collect();
    let count: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    if count == 0 {
        return Err(Error::Empty("no tokens to evaluate".into()));
    }
    let sums: Vec<f64> = examples
        .par_iter()
        .zip(&masks)
        .map(|(e, m)| {
            let seq = SeqWork {
                inputs: e.inputs(),
                targets: e.targets(),
                mask: m,
            };
            sequence_pass(&w, &plan, seq, 1.0, None)
        })
        .collect::<Result<_>>()?;
    Ok((sums.iter().sum::<f64>() / count as f64, count))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation loss.
    pub model: Model<f32>,
    pub metrics: Vec<MetricRecord>,
    pub steps: usize,
    pub stopped_early: bool,
    /// Training and validation examples dropped for exceeding the context.
    pub dropped: (usize, usize),
}

/// Trains `model` on `train` with the freeze map applied, validating on `val`.
///
/// Validation runs before the first step, every `eval_interval` steps and after
/// the last step; training stops once `early_stop` fires. Returns the best
/// validated checkpoint. A non-finite training loss aborts with the best
/// checkpoint so far.
pub fn train_loop(
    model: Model<f32>,
    train: &[InstructExample],
    val: &[InstructExample],
    tok: &TokenizerModel,
    cfg: &TrainConfig,
    freeze: &BTreeMap<String, bool>,
    mut metrics_out: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model;
    model.params.apply_freeze(freeze)?;
    if train.is_empty() {
        return Ok(TrainOutcome {
            model,
            metrics: Vec::new(),
            steps: 0,
            stopped_early: false,
            dropped: (0, 0),
        });
    }
    let batches = batchify(train, tok, cfg)?;
    let val_batches = batchify(val, tok, cfg)?;
    let per_epoch = batches.steps_per_epoch();
    let mut total = per_epoch * cfg.epochs;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let dropped = (batches.dropped, val_batches.dropped);
    if total == 0 {
        return Ok(TrainOutcome {
            model,
            metrics: Vec::new(),
            steps: 0,
            stopped_early: false,
            dropped,
        });
    }
    let interval = cfg.eval_interval.unwrap_or((per_epoch / 4).max(1));
    let full = cfg.full_sequence_loss;

    let mut metrics = Vec::new();
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut state = OptimizerState::new();
    let mut since_eval = Vec::new();
    let mut step = 0;
    let mut stopped_early = false;

    let mut evaluate = |model: &Model<f32>, step: usize, since: &mut Vec<f64>, history: &mut Vec<f64>| -> Result<bool> {
        let (val_loss, _) = evaluate_loss(model, &val_batches.examples, full)?;
        let train_loss = (!since.is_empty()).then(|| since.iter().sum::<f64>() / since.len() as f64);
        since.clear();
        let rec = MetricRecord {
            step,
            train_loss,
            val_loss,
            val_perplexity: val_loss.exp(),
        };
        if let Some(w) = metrics_out.as_deref_mut() {
            w.write(&rec)?;
        }
        metrics.push(rec);
        history.push(val_loss);
        let improved = val_loss < best_loss;
        if improved {
            best_loss = val_loss;
        }
        Ok(improved)
    };

    if evaluate(&model, 0, &mut since_eval, &mut history)? {
        best = model.clone();
    }
    'outer: for epoch in 0..cfg.epochs {
        for batch in batches.epoch(epoch) {
            if step == total {
                break 'outer;
            }
            let (loss, grads) = {
                let w = Weights::new(&model)?;
                let plan = GradPlan::new(&w);
                let seqs = batch_seqs(&batch);
                batch_pass(&w, &plan, &seqs, true, cfg.bit_exact)?
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    last_good: Box::new(best),
                });
            }
            optimizer_step(&mut model, &grads.expect("gradients requested"), &mut state, cfg)?;
            since_eval.push(loss);
            step += 1;
            if step % interval == 0 || step == total {
                if evaluate(&model, step, &mut since_eval, &mut history)? {
                    best = model.clone();
                }
                if early_stop(&history, cfg.early_stop_patience) {
                    stopped_early = true;
                    break 'outer;
                }
            }
        }
    }
    drop(evaluate);
    Ok(TrainOutcome {
        model: best,
        metrics,
        steps: step,
        stopped_early,
        dropped,
    })
}
