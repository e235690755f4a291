//! Batch embedding of dataset items over every condition.
//!
//! Inference is read-only over frozen parameters, so items can be spread
//! across a thread pool; output order is fixed by the input id order.

use crate::config::ConditionId;
use crate::dataset::LoadedDataset;
use crate::error::{Error, Result};
use crate::eval::{embedding_map, EmbeddingMap, EmbeddingRecord};
use crate::export::AttentionRecord;
use crate::model::{CcaModel, ConditionEmbedding};
use crate::triplet::ItemId;

#[derive(Debug, Clone)]
pub struct ItemEmbeddings {
    pub item: ItemId,
    pub per_condition: Vec<ConditionEmbedding>,
}

pub fn embed_items(
    model: &CcaModel,
    data: &LoadedDataset,
    ids: &[ItemId],
    threads: usize,
) -> Result<Vec<ItemEmbeddings>> {
    let embed_one = |id: &ItemId| -> Result<ItemEmbeddings> {
        let image = data.image_tensor(*id)?;
        Ok(ItemEmbeddings {
            item: *id,
            per_condition: model.embed_all_conditions(&image)?,
        })
    };
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            ids.par_iter().map(embed_one).collect()
        })
    } else {
        ids.iter().map(embed_one).collect()
    }
}

pub fn embedding_records(items: &[ItemEmbeddings]) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for item in items {
        for ce in &item.per_condition {
            out.push(EmbeddingRecord::new(item.item, ce.condition, ce.vector.clone())?);
        }
    }
    Ok(out)
}

pub fn attention_records(items: &[ItemEmbeddings]) -> Vec<AttentionRecord> {
    items
        .iter()
        .flat_map(|item| {
            item.per_condition.iter().map(|ce| AttentionRecord {
                item: item.item,
                condition: ce.condition,
                weights: ce.attention.clone(),
            })
        })
        .collect()
}

pub fn embed_split_map(
    model: &CcaModel,
    data: &LoadedDataset,
    ids: &[ItemId],
    threads: usize,
) -> Result<EmbeddingMap> {
    let items = embed_items(model, data, ids, threads)?;
    Ok(embedding_map(&embedding_records(&items)?))
}

/// Every condition id the model serves, in order.
pub fn all_conditions(model: &CcaModel) -> Vec<ConditionId> {
    (0..model.config.num_conditions)
        .map(|c| ConditionId(c as u32))
        .collect()
}
