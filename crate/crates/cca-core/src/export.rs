//! Text export of embeddings and attention rows for external tooling.
//!
//! Embeddings: `item_id<TAB>condition_id<TAB>v1,v2,...,vD`
//! Attention:  `item_id<TAB>condition_id<TAB>w0,...,wN`
//!
//! Values use Rust's shortest round-trip decimal formatting, so re-importing
//! reproduces the exact in-memory doubles.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::ConditionId;
use crate::error::{Error, Result};
use crate::eval::EmbeddingRecord;
use crate::triplet::ItemId;

fn join_values(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

pub fn format_embeddings(records: &[EmbeddingRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}", r.item, r.condition, join_values(&r.vector));
    }
    out
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    fs::write(path, format_embeddings(records))?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(item), Some(cond), Some(values)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Dataset(format!(
                "embedding line {} has fewer than 3 tab-separated fields",
                lineno + 1
            )));
        };
        let item: u32 = item
            .parse()
            .map_err(|_| Error::Dataset(format!("bad item id on line {}", lineno + 1)))?;
        let cond: u32 = cond
            .parse()
            .map_err(|_| Error::Dataset(format!("bad condition id on line {}", lineno + 1)))?;
        let vector: std::result::Result<Vec<f64>, _> =
            values.split(',').map(|v| v.parse::<f64>()).collect();
        let vector =
            vector.map_err(|_| Error::Dataset(format!("bad value on line {}", lineno + 1)))?;
        out.push(EmbeddingRecord::new(ItemId(item), ConditionId(cond), vector)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub item: ItemId,
    pub condition: ConditionId,
    pub weights: Vec<f64>,
}

pub fn format_attention(records: &[AttentionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}", r.item, r.condition, join_values(&r.weights));
    }
    out
}

pub fn write_attention(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    fs::write(path, format_attention(records))?;
    Ok(())
}
