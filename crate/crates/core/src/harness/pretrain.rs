use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, extract_features, mix, Prompter};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor};
use crate::vit::{Injection, ViTConfig, ViTModel};

const TAG_PRETRAIN: u64 = 0x7072_6574;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays on a cosine schedule to zero.
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: f64,
}

/// Trains a fresh backbone and linear head with cross-entropy on the
/// pretraining classes, discards the head and returns the frozen backbone.
///
/// `pretrain_classes` and `cil_classes` are global class ids; any overlap is
/// rejected before training starts.
pub fn pretrain_backbone(
    config: ViTConfig,
    train: &Dataset,
    test: &Dataset,
    pretrain_classes: &[usize],
    cil_classes: &[usize],
    pcfg: &PretrainConfig,
) -> Result<(ViTModel, PretrainReport)> {
    if let Some(c) = pretrain_classes.iter().find(|c| cil_classes.contains(c)) {
        return Err(Error::Config(format!("class {c} is in both the pretraining and incremental sets")));
    }
    if pcfg.epochs == 0 || pcfg.batch_size == 0 || !(pcfg.lr.is_finite() && pcfg.lr >= 0.0) {
        return Err(Error::Config("pretraining needs positive epochs and batch size and a finite lr".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("pretraining data is empty".into()));
    }
    if train.image_len() != config.pixels() || test.image_len() != config.pixels() {
        return Err(Error::shape(
            "pretrain_backbone",
            &[train.channels, train.height, train.width],
            &[config.channels, config.image_size, config.image_size],
        ));
    }
    let n_classes = train.n_classes;
    let mut model = ViTModel::new(config, mix(pcfg.seed, TAG_PRETRAIN, 0))?;
    let mut head_w = Tensor::zeros(&[config.dim, n_classes]).trainable();
    let mut head_b = Tensor::zeros(&[n_classes]).trainable();
    let mut opt = Adam::new(AdamConfig::with_lr(pcfg.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(pcfg.batch_size);
    let total_steps = (pcfg.epochs * steps_per_epoch) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(pcfg.epochs);

    for epoch in 0..pcfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(pcfg.seed, TAG_PRETRAIN, epoch as u64 + 1)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(pcfg.batch_size) {
            let images: Vec<&[f64]> = batch.iter().map(|&i| train.image(i)).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let trace = model.features(&mut tape, &vars, &images, &Injection::None)?;
            let wv = tape.leaf(&head_w);
            let bv = tape.leaf(&head_b);
            let z = tape.matmul(trace.cls, wv)?;
            let z = tape.add_broadcast(z, bv)?;
            let loss = tape.cross_entropy(z, &targets)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Numeric("non-finite pretraining loss"));
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(loss)?;

            let handles = vars.all();
            let mut params = model.params_mut();
            for (p, v) in params.iter_mut().zip(&handles) {
                tape.accumulate_into(*v, p)?;
            }
            tape.accumulate_into(wv, &mut head_w)?;
            tape.accumulate_into(bv, &mut head_b)?;
            let progress = step as f64 / total_steps;
            opt.set_lr(pcfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            params.push(&mut head_w);
            params.push(&mut head_b);
            opt.step(&mut params)?;
            for p in params {
                p.zero_grad();
            }
            step += 1;
        }
        let mean = loss_sum / train.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }

    model.freeze();
    let images: Vec<&[f64]> = (0..test.len()).map(|i| test.image(i)).collect();
    let feats = extract_features(&model, &Prompter::None, &images)?;
    let hits = feats
        .iter()
        .zip(&test.labels)
        .filter(|(f, &l)| {
            let logits: Vec<f64> = (0..n_classes)
                .map(|j| head_b.data()[j] + f.iter().enumerate().map(|(k, v)| v * head_w.data()[k * n_classes + j]).sum::<f64>())
                .collect();
            argmax(&logits) == l
        })
        .count();
    let test_accuracy = hits as f64 / test.len() as f64;
    log::info!("pretrain test accuracy {test_accuracy:.4}");
    Ok((model, PretrainReport { epoch_losses, test_accuracy }))
}
