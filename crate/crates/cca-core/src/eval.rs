//! Attribute-wise retrieval evaluation: mean average precision per condition
//! and triplet prediction accuracy over frozen embeddings.

use std::collections::BTreeMap;

use crate::config::ConditionId;
use crate::error::{Error, Result};
use crate::tensor::l2_norm;
use crate::triplet::{ItemId, LabelTable, TripletRecord};

/// One unit-norm embedding of an item under a condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub item: ItemId,
    pub condition: ConditionId,
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(item: ItemId, condition: ConditionId, vector: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&vector);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "embedding of item {item} under condition {condition} has norm {norm}, expected 1"
            )));
        }
        Ok(EmbeddingRecord {
            item,
            condition,
            vector,
        })
    }
}

/// Deterministic lookup keyed by (item, condition).
pub type EmbeddingMap = BTreeMap<(ItemId, ConditionId), Vec<f64>>;

pub fn embedding_map(records: &[EmbeddingRecord]) -> EmbeddingMap {
    records
        .iter()
        .map(|r| ((r.item, r.condition), r.vector.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    /// Condition -> mAP over that condition's queries.
    pub per_attribute: Vec<(ConditionId, f64)>,
    /// Arithmetic mean of the per-attribute values.
    pub overall: f64,
    pub triplet_accuracy: Option<f64>,
    /// Queries dropped because no gallery item shared their class.
    pub skipped_queries: usize,
}

/// Average precision of a ranked relevance list: mean over relevant ranks r
/// of (relevant in top r) / r.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let total_relevant = ranked_relevance.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return Err(Error::Eval(
            "average precision undefined without a relevant item".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank the condition-`c` gallery for each condition-`c` query by descending
/// dot product (ties by ascending item id, query's own item excluded) and
/// average the per-query AP; then average over conditions.
pub fn map_by_attribute(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    labels: &LabelTable,
    threads: usize,
) -> Result<RetrievalReport> {
    let mut conditions: Vec<ConditionId> = queries.iter().map(|q| q.condition).collect();
    conditions.sort();
    conditions.dedup();
    if conditions.is_empty() {
        return Err(Error::Eval("no queries to evaluate".into()));
    }

    let mut per_attribute = Vec::with_capacity(conditions.len());
    let mut skipped_total = 0usize;
    for &c in &conditions {
        let gal: Vec<&EmbeddingRecord> = gallery.iter().filter(|g| g.condition == c).collect();
        if gal.is_empty() {
            return Err(Error::Eval(format!("empty gallery for condition {c}")));
        }
        let qs: Vec<&EmbeddingRecord> = queries.iter().filter(|q| q.condition == c).collect();

        let eval_query = |q: &&EmbeddingRecord| -> Result<Option<f64>> {
            let q_label = labels
                .label(q.item, c)
                .ok_or_else(|| Error::Eval(format!("query item {} has no label under {c}", q.item)))?;
            let mut scored: Vec<(f64, ItemId, bool)> = Vec::with_capacity(gal.len());
            for g in &gal {
                if g.item == q.item {
                    continue;
                }
                let g_label = labels
                    .label(g.item, c)
                    .ok_or_else(|| Error::Eval(format!("gallery item {} has no label under {c}", g.item)))?;
                scored.push((dot(&q.vector, &g.vector), g.item, g_label == q_label));
            }
            scored.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            let relevance: Vec<bool> = scored.iter().map(|(_, _, rel)| *rel).collect();
            if relevance.iter().any(|&r| r) {
                average_precision(&relevance).map(Some)
            } else {
                Ok(None)
            }
        };

        let results: Vec<Result<Option<f64>>> = if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                qs.par_iter().map(eval_query).collect()
            })
        } else {
            qs.iter().map(eval_query).collect()
        };

        let mut aps = Vec::with_capacity(qs.len());
        let mut skipped = 0usize;
        for r in results {
            match r? {
                Some(ap) => aps.push(ap),
                None => skipped += 1,
            }
        }
        if aps.is_empty() {
            return Err(Error::Eval(format!(
                "no query under condition {c} had a relevant gallery item"
            )));
        }
        if skipped > 0 {
            log::debug!("condition {c}: skipped {skipped} queries with no relevant gallery item");
        }
        skipped_total += skipped;
        per_attribute.push((c, aps.iter().sum::<f64>() / aps.len() as f64));
    }

    let overall = per_attribute.iter().map(|(_, v)| v).sum::<f64>() / per_attribute.len() as f64;
    Ok(RetrievalReport {
        per_attribute,
        overall,
        triplet_accuracy: None,
        skipped_queries: skipped_total,
    })
}

/// Fraction of triplets whose positive is strictly closer to the anchor than
/// the negative under the triplet's condition. Ties count as failures.
pub fn triplet_prediction_accuracy(
    embeddings: &EmbeddingMap,
    triplets: &[TripletRecord],
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Contract("triplet accuracy over an empty list".into()));
    }
    let mut correct = 0usize;
    for t in triplets {
        let get = |item: ItemId| {
            embeddings
                .get(&(item, t.condition))
                .ok_or_else(|| Error::Eval(format!("no embedding for item {item} under {}", t.condition)))
        };
        let a = get(t.anchor)?;
        let p = get(t.positive)?;
        let n = get(t.negative)?;
        // dist(a,p) < dist(a,n) <=> a·p > a·n on unit vectors
        if dot(a, p) > dot(a, n) {
            correct += 1;
        }
    }
    Ok(correct as f64 / triplets.len() as f64)
}

/// Tabular text report: one row per method, columns overall then
/// per-attribute mAP, two fractional digits.
pub fn format_report(rows: &[(String, RetrievalReport)], attribute_names: &[String]) -> String {
    let mut out = String::from("method\toverall");
    for name in attribute_names {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for (method, report) in rows {
        out.push_str(method);
        out.push_str(&format!("\t{:.2}", report.overall));
        for (_, v) in &report.per_attribute {
            out.push_str(&format!("\t{v:.2}"));
        }
        out.push('\n');
        if let Some(acc) = report.triplet_accuracy {
            out.push_str(&format!("{method}:triplet_prediction_accuracy\t{acc:.2}\n"));
        }
    }
    out
}
