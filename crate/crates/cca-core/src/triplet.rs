//! Conditioned triplets and the margin loss over cosine distance.
//!
//! A triplet fixes one condition; the positive shares the anchor's class
//! under that condition and the negative does not. Keeping the negative in
//! the same condition forces fine-grained separation instead of letting the
//! model get away with coarse cues.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ConditionId;
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::l2_norm;

/// Dataset item handle; ordering gives deterministic tie-breaks everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletRecord {
    pub anchor: ItemId,
    pub positive: ItemId,
    pub negative: ItemId,
    pub condition: ConditionId,
}

/// Class labels of a set of items under every condition.
#[derive(Debug, Clone)]
pub struct LabelTable {
    num_conditions: usize,
    labels: BTreeMap<ItemId, Vec<u32>>,
}

impl LabelTable {
    pub fn new(num_conditions: usize) -> Self {
        LabelTable {
            num_conditions,
            labels: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, item: ItemId, labels: Vec<u32>) -> Result<()> {
        if labels.len() != self.num_conditions {
            return Err(Error::Dataset(format!(
                "item {item} labels {} conditions, expected {}",
                labels.len(),
                self.num_conditions
            )));
        }
        self.labels.insert(item, labels);
        Ok(())
    }

    pub fn num_conditions(&self) -> usize {
        self.num_conditions
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, item: ItemId, c: ConditionId) -> Option<u32> {
        self.labels.get(&item).map(|ls| ls[c.index()])
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.labels.keys().copied()
    }

    pub fn satisfies(&self, t: &TripletRecord) -> bool {
        let (Some(a), Some(p), Some(n)) = (
            self.label(t.anchor, t.condition),
            self.label(t.positive, t.condition),
            self.label(t.negative, t.condition),
        ) else {
            return false;
        };
        a == p && a != n
    }
}

/// Draws valid conditioned triplets from a label table. Anchors come
/// uniformly from the items whose class has a second member; negatives come
/// uniformly from the same condition's other classes.
#[derive(Debug)]
pub struct TripletSampler {
    /// Per condition: class -> sorted member list.
    per_condition: Vec<Vec<Vec<ItemId>>>,
    /// Per condition: items eligible as anchors (class size >= 2).
    anchors: Vec<Vec<ItemId>>,
    /// Per condition: total item count.
    totals: Vec<usize>,
}

impl TripletSampler {
    pub fn new(table: &LabelTable) -> Result<Self> {
        let k = table.num_conditions();
        let mut per_condition = Vec::with_capacity(k);
        let mut anchors = Vec::with_capacity(k);
        let mut totals = Vec::with_capacity(k);
        for c in 0..k {
            let cid = ConditionId(c as u32);
            let mut classes: BTreeMap<u32, Vec<ItemId>> = BTreeMap::new();
            for item in table.items() {
                let label = table.label(item, cid).expect("items label every condition");
                classes.entry(label).or_default().push(item);
            }
            if classes.len() < 2 {
                return Err(Error::Sampling(format!(
                    "condition {c} has {} class(es); need at least 2 to form triplets",
                    classes.len()
                )));
            }
            let class_lists: Vec<Vec<ItemId>> = classes.into_values().collect();
            let eligible: Vec<ItemId> = class_lists
                .iter()
                .filter(|members| members.len() >= 2)
                .flat_map(|members| members.iter().copied())
                .collect();
            if eligible.is_empty() {
                return Err(Error::Sampling(format!(
                    "condition {c} has no class with at least 2 members; cannot pick positives"
                )));
            }
            totals.push(class_lists.iter().map(|m| m.len()).sum());
            per_condition.push(class_lists);
            anchors.push(eligible);
        }
        Ok(TripletSampler {
            per_condition,
            anchors,
            totals,
        })
    }

    pub fn num_conditions(&self) -> usize {
        self.per_condition.len()
    }

    /// One triplet under a fixed condition.
    pub fn sample_one(&self, c: ConditionId, rng: &mut impl Rng) -> TripletRecord {
        let classes = &self.per_condition[c.index()];
        let anchors = &self.anchors[c.index()];
        let anchor = anchors[rng.gen_range(0..anchors.len())];
        let class_idx = classes
            .iter()
            .position(|members| members.binary_search(&anchor).is_ok())
            .expect("anchor belongs to a class");
        let members = &classes[class_idx];
        let positive = loop {
            let cand = members[rng.gen_range(0..members.len())];
            if cand != anchor {
                break cand;
            }
        };
        // uniform over every item outside the anchor's class
        let pool = self.totals[c.index()] - members.len();
        let mut pick = rng.gen_range(0..pool);
        let mut negative = None;
        for (i, other) in classes.iter().enumerate() {
            if i == class_idx {
                continue;
            }
            if pick < other.len() {
                negative = Some(other[pick]);
                break;
            }
            pick -= other.len();
        }
        TripletRecord {
            anchor,
            positive,
            negative: negative.expect("negative pool is non-empty"),
            condition: c,
        }
    }

    /// A batch of triplets sharing one condition.
    pub fn sample_batch(&self, c: ConditionId, count: usize, rng: &mut impl Rng) -> Vec<TripletRecord> {
        (0..count).map(|_| self.sample_one(c, rng)).collect()
    }

    /// Flat stream cycling conditions round-robin per triplet.
    pub fn sample_triplets(&self, count: usize, rng: &mut impl Rng) -> Vec<TripletRecord> {
        (0..count)
            .map(|i| self.sample_one(ConditionId((i % self.num_conditions()) as u32), rng))
            .collect()
    }

    /// Batches for one epoch, conditions cycling round-robin per batch.
    pub fn sample_epoch(
        &self,
        num_batches: usize,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Vec<(ConditionId, Vec<TripletRecord>)> {
        (0..num_batches)
            .map(|b| {
                let c = ConditionId((b % self.num_conditions()) as u32);
                (c, self.sample_batch(c, batch_size, rng))
            })
            .collect()
    }
}

/// Hinge loss max(0, d(a,p) - d(a,n) + m) with d(u,v) = 1 - u·v on
/// unit-norm rows. Inactive hinges contribute zero gradient.
pub fn triplet_loss(
    tape: &mut Tape,
    f_a: TensorId,
    f_p: TensorId,
    f_n: TensorId,
    margin: f64,
) -> Result<TensorId> {
    for (name, id) in [("anchor", f_a), ("positive", f_p), ("negative", f_n)] {
        let norm = l2_norm(tape.data(id));
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "triplet loss expects unit-norm embeddings; {name} has norm {norm}"
            )));
        }
    }
    // d_p - d_n + m == (a·n) - (a·p) + m for unit vectors
    let ap = tape.mul(f_a, f_p)?;
    let s_ap = tape.sum_all(ap)?;
    let an = tape.mul(f_a, f_n)?;
    let s_an = tape.sum_all(an)?;
    let diff = tape.sub(s_an, s_ap)?;
    let shifted = tape.add_scalar(diff, margin)?;
    tape.relu(shifted)
}
