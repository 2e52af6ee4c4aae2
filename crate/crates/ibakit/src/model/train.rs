use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::expected_params;
use super::{
    cross_entropy, forward_lower, logits_from_hidden, param_tensors, tokenize, build_vocab,
    Instance, ModelCheckpoint, ModelConfig, Param, TrainMetadata,
};
use crate::error::{Error, Result};
use crate::tensor::Tape;

const MOMENTUM: f64 = 0.9;
const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 32,
            lr: 0.05,
            seed: 0,
        }
    }
}

fn init_params(cfg: &ModelConfig, seed: u64) -> BTreeMap<String, Param> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape) in expected_params(cfg) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with("gain") {
            vec![1.0; n]
        } else if name.ends_with('b') && name.starts_with("head")
            || name.ends_with("bias")
            || name.contains(".b")
        {
            vec![0.0; n]
        } else if name.starts_with("embed") {
            (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
        } else {
            // Xavier-uniform for weight matrices
            let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        params.insert(name, Param { shape, data });
    }
    params
}

/// One instance's loss and parameter gradients on its own tape.
fn instance_gradients(
    ckpt: &ModelCheckpoint,
    instance: &Instance,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let tape = Tape::new();
    let params = param_tensors(ckpt, true);
    let hidden = forward_lower(&tape, &params, &ckpt.config, instance, 0)?;
    let logits = logits_from_hidden(&tape, &params, &ckpt.config, &hidden, &instance.mask, 0)?;
    let loss = cross_entropy(&tape, &logits, instance.label)?;
    let loss_v = loss.item()?;
    tape.backward(&loss)?;
    let grads = params
        .iter()
        .map(|(name, t)| {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.clone(), g)
        })
        .collect();
    Ok((loss_v, grads))
}

fn accuracy(ckpt: &ModelCheckpoint, instances: &[Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = instances
        .par_iter()
        .map(|inst| {
            let probs = super::forward_probs(ckpt, inst)?;
            let pred = argmax(&probs);
            Ok(usize::from(pred == inst.label))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / instances.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains from scratch with plain SGD + momentum 0.9. Deterministic given the
/// seed: batch order, initialization, and gradient reduction order are fixed.
/// The last 10% of a seeded shuffle is held out for validation accuracy.
pub fn train(
    corpus: &[(usize, String)],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    model_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let classes: std::collections::BTreeSet<usize> = corpus.iter().map(|(l, _)| *l).collect();
    if classes.len() < 2 {
        return Err(Error::Input("corpus must contain at least 2 classes".into()));
    }
    if let Some(&top) = classes.iter().next_back() {
        if top >= model_cfg.n_classes {
            return Err(Error::Input(format!(
                "label {top} exceeds n_classes {}",
                model_cfg.n_classes
            )));
        }
    }

    let vocab = build_vocab(corpus.iter().map(|(_, t)| t.as_str()), model_cfg.vocab_size)?;
    let instances: Vec<Instance> = corpus
        .iter()
        .map(|(label, text)| tokenize(text, &vocab, model_cfg.max_seq_len, *label))
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((instances.len() as f64) * VAL_FRACTION).floor() as usize;
    let (train_idx, val_idx) = order.split_at(instances.len() - n_val);
    let train_set: Vec<Instance> = train_idx.iter().map(|&i| instances[i].clone()).collect();
    let val_set: Vec<Instance> = val_idx.iter().map(|&i| instances[i].clone()).collect();

    let mut ckpt = ModelCheckpoint {
        config: model_cfg.clone(),
        vocab,
        params: init_params(model_cfg, train_cfg.seed),
        metadata: TrainMetadata {
            epochs: 0,
            final_train_accuracy: 0.0,
            final_val_accuracy: 0.0,
            epoch_losses: Vec::new(),
            seed: train_cfg.seed,
        },
    };

    let mut velocity: BTreeMap<String, Vec<f64>> = ckpt
        .params
        .iter()
        .map(|(n, p)| (n.clone(), vec![0.0; p.data.len()]))
        .collect();

    let mut epoch_losses = Vec::with_capacity(train_cfg.epochs);
    for _epoch in 0..train_cfg.epochs {
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        idx.shuffle(&mut rng);
        for batch in idx.chunks(train_cfg.batch.max(1)) {
            // per-instance gradients in parallel, reduced in batch order
            let results: Vec<(f64, BTreeMap<String, Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| instance_gradients(&ckpt, &train_set[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            for (name, param) in ckpt.params.iter_mut() {
                let vel = velocity.get_mut(name).unwrap();
                let mut g = vec![0.0; param.data.len()];
                for (_, grads) in &results {
                    for (gi, v) in g.iter_mut().zip(&grads[name]) {
                        *gi += v * scale;
                    }
                }
                for ((p, v), gi) in param.data.iter_mut().zip(vel.iter_mut()).zip(&g) {
                    *v = MOMENTUM * *v + gi;
                    *p -= train_cfg.lr * *v;
                }
            }
        }
        epoch_losses.push(mean_loss(&ckpt, &train_set)?);
    }

    ckpt.metadata.epochs = train_cfg.epochs;
    ckpt.metadata.epoch_losses = epoch_losses;
    ckpt.metadata.final_train_accuracy = accuracy(&ckpt, &train_set)?;
    ckpt.metadata.final_val_accuracy = accuracy(&ckpt, &val_set)?;
    ckpt.validate()?;
    Ok(ckpt)
}

/// Mean cross entropy over a set, without gradients.
pub fn mean_loss(ckpt: &ModelCheckpoint, instances: &[Instance]) -> Result<f64> {
    let losses: Vec<f64> = instances
        .par_iter()
        .map(|inst| {
            let tape = Tape::new();
            let params = param_tensors(ckpt, false);
            let hidden = forward_lower(&tape, &params, &ckpt.config, inst, 0)?;
            let logits =
                logits_from_hidden(&tape, &params, &ckpt.config, &hidden, &inst.mask, 0)?;
            cross_entropy(&tape, &logits, inst.label)?.item()
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}
