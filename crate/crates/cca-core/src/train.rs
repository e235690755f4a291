//! The training loop: conditioned triplet batches, one Adam step per batch,
//! per-epoch held-out triplet accuracy, best-model tracking.
//!
//! Each batch draws triplets under a single condition (conditions cycle
//! round-robin over batches), runs the backbone and conditional head for all
//! three members, and minimizes the mean hinge loss. The sampling stream is
//! keyed by (seed, epoch), so a resumed run replays exactly the batches a
//! straight-through run would have seen.

use crate::config::TrainConfig;
use crate::dataset::LoadedDataset;
use crate::error::{Error, Result};
use crate::eval::triplet_prediction_accuracy;
use crate::model::CcaModel;
use crate::nn::{adam_step, AdamState, ParamStore};
use crate::rng::{sub_rng, Domain};
use crate::triplet::{triplet_loss, TripletSampler};
use crate::embedder;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Parameters of the epoch with the best validation accuracy.
    pub best_params: ParamStore,
    pub best_val_acc: f64,
    pub best_epoch: Option<usize>,
    pub adam: AdamState,
    /// Epoch index a resumed run should start from.
    pub next_epoch: usize,
}

/// Prior state for resuming; `None` starts fresh.
pub struct ResumeState {
    pub adam: AdamState,
    pub next_epoch: usize,
    pub best_val_acc: f64,
}

pub fn train(
    model: &mut CcaModel,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    resume: Option<ResumeState>,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.manifest.validate()?;
    if cfg.embed_type != model.config.embed_type {
        return Err(Error::Config(format!(
            "training embed type {} does not match model {}",
            cfg.embed_type.as_str(),
            model.config.embed_type.as_str()
        )));
    }
    let k = data.manifest.attributes.len();
    if model.config.num_conditions != k {
        return Err(Error::Config(format!(
            "model serves {} conditions but the dataset has {k} attributes",
            model.config.num_conditions
        )));
    }

    let train_table = data.manifest.label_table(&data.manifest.splits.train)?;
    let sampler = TripletSampler::new(&train_table)?;
    let val_table = data.manifest.label_table(&data.manifest.splits.val)?;
    let val_sampler = TripletSampler::new(&val_table)?;
    let mut val_rng = sub_rng(cfg.seed, Domain::Validation, 0);
    let val_triplets = val_sampler.sample_triplets(cfg.val_triplets, &mut val_rng);

    let batches_per_epoch = (train_table.len() / cfg.batch_size).max(1);

    let (mut adam, start_epoch, mut best_val_acc) = match resume {
        Some(r) => {
            r.adam.check_shapes(&model.store)?;
            (r.adam, r.next_epoch, r.best_val_acc)
        }
        None => (AdamState::new(&model.store, cfg.lr), 0, f64::NEG_INFINITY),
    };
    adam.lr = cfg.lr;

    let mut best_params = model.store.clone();
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut next_epoch = start_epoch;

    for epoch in start_epoch..cfg.epochs {
        let mut rng = sub_rng(cfg.seed, Domain::Sampling, epoch as u64);
        let batches = sampler.sample_epoch(batches_per_epoch, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for (batch_idx, (condition, batch)) in batches.iter().enumerate() {
            let mut f = model.begin();
            let mut total = None;
            for t in batch {
                let a = model.embed_with_condition(&mut f, &data.image_tensor(t.anchor)?, t.condition, 1)?;
                let p = model.embed_with_condition(&mut f, &data.image_tensor(t.positive)?, t.condition, 1)?;
                let n = model.embed_with_condition(&mut f, &data.image_tensor(t.negative)?, t.condition, 1)?;
                let loss = triplet_loss(&mut f.tape, a.embedding, p.embedding, n.embedding, cfg.margin)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => f.tape.add(acc, loss)?,
                });
            }
            let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
            let mean = f.tape.scale(total, 1.0 / batch.len() as f64)?;
            let loss_value = f.tape.data(mean)[0];
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_value} in epoch {epoch} batch {batch_idx} (condition {condition})"
                )));
            }
            loss_sum += loss_value;
            f.tape.backward(mean)?;
            let grads = f.collect_grads(model);
            drop(f);
            adam_step(&mut model.store, &grads, &mut adam, model.config.precision)?;
        }
        let mean_loss = loss_sum / batches_per_epoch as f64;

        let val_map = embedder::embed_split_map(model, data, &data.manifest.splits.val, threads)?;
        let val_acc = triplet_prediction_accuracy(&val_map, &val_triplets)?;

        let stats = EpochStats {
            epoch,
            mean_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: mean_loss {mean_loss:.6} val_acc {val_acc:.4}"
        );
        on_epoch(&stats);
        history.push(stats);
        next_epoch = epoch + 1;

        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_epoch = Some(epoch);
            best_params = model.store.clone();
        }
        if let Some(target) = cfg.stop_at_val_acc {
            if val_acc >= target {
                log::info!("validation accuracy {val_acc:.4} reached target {target}; stopping");
                break;
            }
        }
    }

    Ok(TrainOutcome {
        history,
        best_params,
        best_val_acc,
        best_epoch,
        adam,
        next_epoch,
    })
}
