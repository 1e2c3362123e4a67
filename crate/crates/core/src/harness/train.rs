use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix, AuditedData, GrowingClassifier, Prompter, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::prompt::pool_select;
use crate::tensor::Tape;
use crate::vit::ViTModel;

const INFER_BATCH: usize = 64;

/// The training samples of one task.
#[derive(Debug)]
pub struct TaskData<'a, 'b> {
    pub task: usize,
    pub audit: &'b AuditedData<'a>,
    pub indices: &'b [usize],
    /// Class ids of this task, in head-column order.
    pub classes: &'b [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLog {
    pub first_batch_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Final CLS features of `images` under `prompter`, one row each.
pub fn extract_features(model: &ViTModel, prompter: &Prompter, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let selection = match prompter {
            Prompter::Pool(pool) => Some(pool_select(model, chunk, pool)?),
            _ => None,
        };
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let (trace, _) = prompter.forward(model, &mut tape, &vars, chunk, selection.as_deref())?;
        out.extend(tape.value(trace.cls).chunks(model.config().dim).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Fraction of `indices` whose joint-argmax prediction matches the label.
pub fn evaluate(
    model: &ViTModel,
    prompter: &Prompter,
    head: &GrowingClassifier,
    ds: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    let images: Vec<&[f64]> = indices.iter().map(|&i| ds.image(i)).collect();
    let feats = extract_features(model, prompter, &images)?;
    let labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
    accuracy_from_features(head, &feats, &labels)
}

pub(crate) fn accuracy_from_features(
    head: &GrowingClassifier,
    feats: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64> {
    if feats.is_empty() {
        return Err(Error::Contract("evaluation on an empty set".into()));
    }
    let cols = head.column_classes();
    let mut hits = 0usize;
    for (f, &l) in feats.iter().zip(labels) {
        if cols[head.predict_column(f)?] == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / feats.len() as f64)
}

/// Trains the prompts and the newest classifier block on one task.
pub fn train_task(
    model: &ViTModel,
    prompter: &mut Prompter,
    head: &mut GrowingClassifier,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<TaskLog> {
    if !model.is_frozen() {
        return Err(Error::Contract("backbone must be frozen before prompt training".into()));
    }
    if data.indices.is_empty() {
        return Err(Error::Contract(format!("task {} has no training data", data.task)));
    }
    cfg.validate()?;
    let local: HashMap<usize, usize> = data.classes.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let target_of = |label: usize| {
        local
            .get(&label)
            .copied()
            .ok_or_else(|| Error::Contract(format!("label {label} is not a class of task {}", data.task)))
    };

    // Fixed features when nothing upstream of the head is trained.
    let cached: Option<HashMap<usize, Vec<f64>>> = if prompter.is_none() {
        let images: Vec<&[f64]> = data.indices.iter().map(|&i| data.audit.fetch(data.task, i).0).collect();
        let feats = extract_features(model, prompter, &images)?;
        Some(data.indices.iter().copied().zip(feats).collect())
    } else {
        None
    };
    let selections: Option<HashMap<usize, Vec<usize>>> = match prompter {
        Prompter::Pool(pool) => {
            let mut map = HashMap::new();
            for chunk in data.indices.chunks(INFER_BATCH) {
                let images: Vec<&[f64]> = chunk.iter().map(|&i| data.audit.fetch(data.task, i).0).collect();
                for (&i, s) in chunk.iter().zip(pool_select(model, &images, pool)?) {
                    map.insert(i, s);
                }
            }
            Some(map)
        }
        _ => None,
    };

    let mut prompt_opt = Adam::new(AdamConfig::with_lr(cfg.prompt_lr));
    let mut head_opt = Adam::new(AdamConfig::with_lr(cfg.head_lr));
    let mut order = data.indices.to_vec();
    let mut first_batch_loss = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let dim = model.config().dim;

    for epoch in 0..cfg.epochs {
        order.copy_from_slice(data.indices);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, data.task as u64, epoch as u64)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut targets = Vec::with_capacity(batch.len());
            let mut images = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, label) = data.audit.fetch(data.task, i);
                images.push(img);
                targets.push(target_of(label)?);
            }
            let mut tape = Tape::new();
            let (features, handles) = match &cached {
                Some(map) => {
                    let flat: Vec<f64> = batch.iter().flat_map(|i| map[i].iter().copied()).collect();
                    (tape.constant(&[batch.len(), dim], flat)?, None)
                }
                None => {
                    let vars = model.register(&mut tape);
                    let sel: Option<Vec<Vec<usize>>> =
                        selections.as_ref().map(|m| batch.iter().map(|i| m[i].clone()).collect());
                    let (trace, handles) = prompter.forward(model, &mut tape, &vars, &images, sel.as_deref())?;
                    (trace.cls, Some(handles))
                }
            };
            let (logits, wv, bv) = head.current_logits(&mut tape, features)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Numeric("non-finite training loss"));
            }
            first_batch_loss.get_or_insert(value);
            loss_sum += value * batch.len() as f64;
            tape.backward(loss)?;

            if let Some(h) = &handles {
                prompter.collect_grads(&tape, h)?;
                prompt_opt.step(&mut prompter.params_mut())?;
                prompter.zero_grad();
            }
            let blk = head.current_mut()?;
            tape.accumulate_into(wv, &mut blk.w)?;
            tape.accumulate_into(bv, &mut blk.b)?;
            head_opt.step(&mut [&mut blk.w, &mut blk.b])?;
            blk.w.zero_grad();
            blk.b.zero_grad();
        }
        epoch_losses.push(loss_sum / order.len() as f64);
    }
    Ok(TaskLog {
        first_batch_loss: first_batch_loss.unwrap_or(f64::NAN),
        epoch_losses,
    })
}

