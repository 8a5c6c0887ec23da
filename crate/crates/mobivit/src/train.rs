//! The training loop: AdamW under the warmup/cosine schedule, label
//! smoothing, mixup/cutmix and DropPath, with per-epoch validation.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use mobivit_core::loss::smoothed_targets;
use mobivit_core::nn::ParamGrads;
use mobivit_core::optim::{lr_at, AdamW};
use mobivit_core::rng::{substream, Purpose};
use mobivit_core::{ForwardMode, Graph, Model, Tensor, TrainConfig};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::mixup_cutmix;
use crate::data::{preprocess, Dataset, Preprocess};
use crate::error::{CliError, Result};
use crate::run::{save_checkpoint, CheckpointMeta};

/// One line of the history file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Parameters after the last epoch.
    pub model: Model,
    /// The best-validation model (the initial one if no epoch ran).
    pub best: Model,
    pub best_val_accuracy: Option<f64>,
}

/// Loop settings that live outside [`TrainConfig`].
#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    pub preprocess: Preprocess,
    /// Writes history and checkpoints here when set.
    pub out_dir: Option<PathBuf>,
    /// Each batch is split into this many contiguous parts whose gradients
    /// are computed in parallel and combined in a fixed order.
    pub threads: usize,
}

/// Mean-reduced loss and gradients of soft cross entropy on one batch.
pub fn batch_gradients(
    model: &Model,
    images: &Tensor,
    targets: &Tensor,
    mode: ForwardMode<'_>,
) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::with_params(&model.store);
    let x = g.constant(images.clone());
    let out = model.forward(&mut g, x, mode)?;
    let loss = g.soft_cross_entropy(out.logits, targets)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(CliError::Numerical(format!("training loss is {value}")));
    }
    Ok((value, g.backward(loss)?.param_grads(&g)))
}

/// Same result as [`batch_gradients`] (up to rounding), computed over `parts`
/// contiguous micro-batches weighted by their share of the batch.
pub fn accumulated_gradients(
    model: &Model,
    images: &Tensor,
    targets: &Tensor,
    mode: ForwardMode<'_>,
    parts: usize,
    parallel: bool,
) -> Result<(f64, ParamGrads)> {
    let b = images.shape()[0];
    let parts = parts.clamp(1, b);
    if parts == 1 {
        return batch_gradients(model, images, targets, mode);
    }
    let bounds: Vec<(usize, usize)> = (0..parts).map(|p| (p * b / parts, (p + 1) * b / parts)).collect();
    let run = |&(lo, hi): &(usize, usize)| -> Result<(f64, ParamGrads)> {
        let xi = slice_rows(images, lo, hi)?;
        let ti = slice_rows(targets, lo, hi)?;
        let sub_mode = match mode {
            ForwardMode::Eval => ForwardMode::Eval,
            ForwardMode::Train {
                seed,
                epoch,
                sample_ids,
            } => ForwardMode::Train {
                seed,
                epoch,
                sample_ids: &sample_ids[lo..hi],
            },
        };
        batch_gradients(model, &xi, &ti, sub_mode)
    };
    let results: Vec<Result<(f64, ParamGrads)>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = bounds.iter().map(|bd| s.spawn(move || run(bd))).collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    } else {
        bounds.iter().map(run).collect()
    };
    let mut total = ParamGrads::new(model.store.len());
    let mut loss = 0.0;
    for ((lo, hi), r) in bounds.iter().zip(results) {
        let (l, gr) = r?;
        let w = (hi - lo) as f64 / b as f64;
        loss += w * l;
        total.add_scaled(&gr, w);
    }
    Ok((loss, total))
}

fn slice_rows(t: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = hi - lo;
    Ok(Tensor::new(&shape, t.data()[lo * per..hi * per].to_vec())?)
}

/// Preprocessed images `[B×3×S×S]` for the given dataset indices. With
/// `augment`, sample `i` draws from the `(seed, epoch, i)` substream.
pub fn load_batch(
    ds: &dyn Dataset,
    ids: &[usize],
    size: usize,
    pre: &Preprocess,
    augment: Option<(u64, u64)>,
) -> Result<(Tensor, Vec<usize>)> {
    let mut imgs = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &i in ids {
        let im = ds.get(i);
        let x = match augment {
            Some((seed, epoch)) => {
                let mut rng = substream(seed, Purpose::Augment, epoch, i as u64);
                preprocess(&im.pixels, size, Some(&mut rng), pre)?
            }
            None => preprocess::<ChaCha8Rng>(&im.pixels, size, None, pre)?,
        };
        imgs.push(x);
        labels.push(im.label);
    }
    Ok((Tensor::stack(&imgs)?, labels))
}

/// Top-1 accuracy on `ds` in evaluation mode.
pub fn evaluate(model: &Model, ds: &dyn Dataset, pre: &Preprocess, batch: usize) -> Result<f64> {
    let (correct, n) = eval_pass(model, ds, pre, batch, |_| ())?;
    Ok(if n == 0 { 0.0 } else { correct as f64 / n as f64 })
}

/// Mean adaptive merge weight per token over `ds`.
pub fn mean_merge_weights(model: &Model, ds: &dyn Dataset, pre: &Preprocess, batch: usize) -> Result<Vec<f64>> {
    if !model.is_apm() {
        return Err(CliError::Config("model does not use adaptive patch merging".into()));
    }
    let mut sum = vec![0.0; model.cfg.num_patches()];
    let (_, n) = eval_pass(model, ds, pre, batch, |w| {
        for (s, v) in sum.iter_mut().zip(w) {
            *s += v;
        }
    })?;
    sum.iter_mut().for_each(|s| *s /= n.max(1) as f64);
    Ok(sum)
}

fn eval_pass(
    model: &Model,
    ds: &dyn Dataset,
    pre: &Preprocess,
    batch: usize,
    mut on_weights: impl FnMut(&[f64]),
) -> Result<(usize, usize)> {
    let ids: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in ids.chunks(batch.max(1)) {
        let (x, labels) = load_batch(ds, chunk, model.cfg.input_size, pre, None)?;
        let (logits, weights) = model.predict(&x)?;
        if !logits.all_finite() {
            return Err(CliError::Numerical(format!(
                "non-finite logits while evaluating samples {}..{}",
                chunk[0],
                chunk[chunk.len() - 1] + 1
            )));
        }
        let k = logits.shape()[1];
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            correct += usize::from(argmax(row) == l);
        }
        for w in &weights {
            on_weights(&w.weights);
        }
    }
    Ok((correct, ids.len()))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn append_history(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| CliError::io(path, e))?;
    let line = serde_json::to_string(rec).expect("history record serializes");
    writeln!(f, "{line}").map_err(|e| CliError::io(path, e))
}

/// Trains `model` in place of a copy and returns the history.
///
/// On a non-finite loss or gradient the run stops with a numerical error;
/// the checkpoint on disk is then the last one written by a good epoch.
pub fn train(
    model: Model,
    train_set: &dyn Dataset,
    val_set: &dyn Dataset,
    cfg: &TrainConfig,
    opts: &LoopOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opts.preprocess.validate()?;
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(CliError::Config("training set is empty".into()));
    }
    let mut model = model;
    let size = model.cfg.input_size;
    let classes = model.cfg.num_classes;
    let (history_path, best_path) = match &opts.out_dir {
        Some(d) => {
            crate::run::create_dir(d)?;
            let h = d.join(HISTORY_FILE);
            File::create(&h).map_err(|e| CliError::io(&h, e))?;
            (Some(h), Some(d.join(BEST_CHECKPOINT)))
        }
        None => (None, None),
    };
    let save = |m: &Model, epoch: Option<usize>, acc: Option<f64>| -> Result<()> {
        if let Some(p) = &best_path {
            let meta = CheckpointMeta {
                model: m.cfg.clone(),
                preprocess: opts.preprocess.clone(),
                epoch,
                val_accuracy: acc,
            };
            save_checkpoint(m, &meta, p)?;
        }
        Ok(())
    };
    save(&model, None, None)?;

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch.max(1));
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let peak = cfg.effective_lr();
    let mut opt = AdamW::new(&model.store, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_acc: Option<f64> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, Purpose::Shuffle, e, 0));
        let mut loss_sum = 0.0;
        let mut lr = peak;
        for (bi, ids) in order.chunks(cfg.batch.max(1)).enumerate() {
            let (x, labels) = load_batch(train_set, ids, size, &opts.preprocess, Some((cfg.seed, e)))?;
            let t = smoothed_targets(&labels, classes, cfg.label_smoothing)?;
            let (x, t) = if ids.len() >= 2 {
                let mut rng = substream(cfg.seed, Purpose::Mix, e, bi as u64);
                let m = mixup_cutmix(&x, &t, cfg.mixup_alpha, cfg.cutmix_alpha, &mut rng)?;
                (m.images, m.targets)
            } else {
                (x, t)
            };
            let sample_ids: Vec<u64> = ids.iter().map(|&i| i as u64).collect();
            let mode = ForwardMode::Train {
                seed: cfg.seed,
                epoch: e,
                sample_ids: &sample_ids,
            };
            let (loss, grads) = accumulated_gradients(&model, &x, &t, mode, opts.threads.max(1), opts.threads > 1)?;
            lr = lr_at(step, total, warmup, peak);
            opt.step(&mut model.store, &grads, lr)
                .map_err(|e| CliError::Numerical(format!("epoch {} step {step}: {e}", epoch + 1)))?;
            loss_sum += loss * ids.len() as f64;
            step += 1;
        }
        let val_accuracy = evaluate(&model, val_set, &opts.preprocess, cfg.batch)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            val_accuracy,
            lr,
        };
        if best_acc.is_none_or(|b| val_accuracy > b) {
            best_acc = Some(val_accuracy);
            best = model.clone();
            save(&model, Some(epoch + 1), Some(val_accuracy))?;
        }
        if let Some(h) = &history_path {
            append_history(h, &rec)?;
        }
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        model,
        best,
        best_val_accuracy: best_acc,
    })
}
