//! Flow-matching training.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::gp::reference_sample;
use crate::model::{
    cross_mask_for, normalize_study, target_from_record, FlowModel, ModelConfig, StudyBatch,
    TargetState,
};
use crate::nn::{
    adamw_step, clip_global_norm, lr_schedule, AdamWConfig, AdamWState, ParamStore, Tape,
};
use crate::rng::{domain, stream, Rng};
use crate::study::Study;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-5,
            warmup_epochs: 5,
            clip_norm: 0.5,
            weight_decay: 0.01,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("batch size and epochs must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::validation(
                "learning rate and weight decay must be nonnegative, clip norm positive",
            ));
        }
        Ok(())
    }
}

/// One training example: context, target grid and the path endpoints.
#[derive(Debug, Clone)]
pub struct FlowExample {
    pub batch: StudyBatch,
    pub cross: AttentionMask,
    pub target: TargetState,
    /// `(y_P, x_F)`
    pub z0: Vec<f64>,
    /// `(y_P, y_F)`
    pub z1: Vec<f64>,
}

impl FlowExample {
    pub fn prefix_len(&self) -> usize {
        self.target.prefix_len
    }
}

/// Build an example with a given prefix length from the held-out subject
/// `target_index`; the remaining subjects form the context.
pub fn make_example_with_prefix(
    study: &Study,
    target_index: usize,
    prefix_len: usize,
    config: &ModelConfig,
    rng: &mut Rng,
) -> Result<FlowExample> {
    let record = study
        .individuals
        .get(target_index)
        .ok_or_else(|| Error::validation(format!("no subject at index {target_index}")))?;
    if record.is_empty() {
        return Err(Error::validation(format!(
            "target subject `{}` has no observations",
            record.id
        )));
    }
    let context = study.without(target_index);
    let batch = normalize_study(&context)?;
    let (target, y) = target_from_record(record, &batch.scales, prefix_len)?;
    let p = prefix_len;
    let prefix = (p > 0).then(|| (&target.times[..p], &y[..p]));
    let x_f = reference_sample(
        prefix,
        &target.times[p..],
        &config.kernel()?,
        config.gp_jitter,
        rng,
    )?;
    let mut z0 = y[..p].to_vec();
    z0.extend_from_slice(&x_f);
    let cross = cross_mask_for(&batch, target.len());
    Ok(FlowExample {
        batch,
        cross,
        target,
        z0,
        z1: y,
    })
}

/// Random held-out subject and prefix `p ~ U{0, …, T−1}`.
pub fn make_training_example(
    study: &Study,
    config: &ModelConfig,
    rng: &mut Rng,
) -> Result<FlowExample> {
    if study.individuals.len() < 2 {
        return Err(Error::validation(format!(
            "study `{}` needs at least two subjects",
            study.study_id
        )));
    }
    let target_index = rng.random_range(0..study.individuals.len());
    let n = study.individuals[target_index].len();
    if n == 0 {
        return Err(Error::validation("target subject has no observations"));
    }
    let p = rng.random_range(0..n);
    make_example_with_prefix(study, target_index, p, config, rng)
}

/// `z_t = t z1 + (1−t) z0 + σ ε` on future slots (`mask = 1`); past slots
/// are copied from `z1` so they stay exactly observed.
pub fn conditional_path_sample(
    z0: &[f64],
    z1: &[f64],
    t: f64,
    sigma_min: f64,
    mask: &[f64],
    rng: &mut Rng,
) -> Vec<f64> {
    z0.iter()
        .zip(z1)
        .zip(mask)
        .map(|((&a, &b), &m)| {
            if m == 0.0 {
                b
            } else {
                let eps: f64 = StandardNormal.sample(rng);
                t * b + (1.0 - t) * a + sigma_min * eps
            }
        })
        .collect()
}

/// Mean squared error against `z1 − z0` over future slots; zero with zero
/// weight when no slot is in the future.
pub fn cfm_loss(v_pred: &[f64], z0: &[f64], z1: &[f64], mask: &[f64]) -> (f64, usize) {
    let mut s = 0.0;
    let mut count = 0;
    for i in 0..v_pred.len() {
        if mask[i] != 0.0 {
            s += (v_pred[i] - (z1[i] - z0[i])).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (s / count as f64, count)
    }
}

/// Loss and parameter gradients for one example at flow time `t`.
pub fn example_loss_and_grad(
    model: &FlowModel,
    ex: &FlowExample,
    t: f64,
    rng: &mut Rng,
    dropout: bool,
) -> Result<(f64, ParamStore)> {
    let mask = ex.target.prefix_mask();
    let zt = conditional_path_sample(&ex.z0, &ex.z1, t, model.config.sigma_min, &mask, rng);
    let velocity: Vec<f64> = ex.z1.iter().zip(&ex.z0).map(|(b, a)| b - a).collect();
    let mut tape = Tape::new(&model.params);
    let v = model.field_on_tape(
        &mut tape,
        &ex.batch,
        &ex.cross,
        &ex.target,
        &zt,
        t,
        dropout.then_some(rng),
    )?;
    if !mask.iter().any(|&m| m != 0.0) {
        return Ok((0.0, model.params.zeros_like()));
    }
    let loss = tape.masked_mse(v, velocity, mask)?;
    tape.check_finite()?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads.params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,lr\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", r.epoch, r.mean_loss, r.lr));
        }
        s
    }
}

/// Where checkpoints go during training; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
}

impl CheckpointPolicy {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        Self {
            dir: Some(dir.as_ref().to_path_buf()),
        }
    }
}

/// Mean loss and summed-then-averaged gradients of one batch, examples
/// processed in parallel and reduced in index order.
fn batch_step(
    model: &FlowModel,
    corpus: &[Study],
    indices: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<(f64, ParamStore)> {
    let results: Vec<Result<(f64, ParamStore)>> = indices
        .par_iter()
        .map(|&i| {
            let mut rng = stream(cfg.seed, &[domain::TRAIN_EXAMPLE, epoch as u64, i as u64]);
            let ex = make_training_example(&corpus[i], &model.config, &mut rng)?;
            let t: f64 = rng.random();
            example_loss_and_grad(model, &ex, t, &mut rng, true)
        })
        .collect();
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        loss += l;
        for ((_, acc), (_, gi)) in total.iter_mut().zip(g.iter()) {
            for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                *a += b;
            }
        }
    }
    let n = indices.len() as f64;
    for (_, t) in total.iter_mut() {
        t.data.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, total))
}

/// Corpus order for one epoch (Fisher-Yates on a dedicated stream).
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[domain::TRAIN_ORDER, epoch as u64]);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Train in place. Each epoch is one pass over the corpus; every example
/// draws its own held-out subject, prefix, source sample and flow time.
/// On a non-finite loss the model is restored to the last good epoch and
/// the error is returned.
pub fn train(
    model: &mut FlowModel,
    corpus: &[Study],
    cfg: &TrainConfig,
    checkpoints: &CheckpointPolicy,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let usable: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].individuals.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::validation(
            "training corpus has no study with two or more subjects",
        ));
    }
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::new(&model.params);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_loss: f64::INFINITY,
    };
    let mut last_good = model.params.clone();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.learning_rate, cfg.warmup_epochs);
        let order: Vec<usize> = epoch_order(usable.len(), cfg.seed, epoch)
            .into_iter()
            .map(|i| usable[i])
            .collect();
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let step =
                batch_step(model, corpus, chunk, epoch, cfg).and_then(|(loss, mut grads)| {
                    clip_global_norm(&mut grads, cfg.clip_norm);
                    adamw_step(&mut model.params, &grads, &mut state, lr, &opt)?;
                    if model.params.iter().any(|(_, t)| !t.is_finite()) {
                        return Err(Error::NonFinite {
                            op: "adamw_step".into(),
                        });
                    }
                    Ok(loss)
                });
            match step {
                Ok(loss) => {
                    sum += loss * chunk.len() as f64;
                    count += chunk.len();
                }
                Err(e) => {
                    model.params = last_good;
                    log::error!("training aborted in epoch {}: {e}", epoch + 1);
                    return Err(e);
                }
            }
        }
        let mean_loss = sum / count as f64;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            lr,
        });
        log::info!(
            "epoch {:>3}  loss {:.6e}  lr {:.2e}",
            epoch + 1,
            mean_loss,
            lr
        );
        last_good = model.params.clone();
        if let Some(dir) = &checkpoints.dir {
            let meta = crate::io::TrainingMeta {
                epoch: epoch + 1,
                mean_loss,
                seed: cfg.seed,
            };
            if mean_loss < history.best_loss {
                crate::io::save_checkpoint(&dir.join("best.ckpt"), model, Some(&meta))?;
            }
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                crate::io::save_checkpoint(
                    &dir.join(format!("epoch{:04}.ckpt", epoch + 1)),
                    model,
                    Some(&meta),
                )?;
            }
        }
        if mean_loss < history.best_loss {
            history.best_loss = mean_loss;
            history.best_epoch = epoch + 1;
        }
    }
    Ok(history)
}
