//! Architecture and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Index of one attribute family; valid values are `0..K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionId(pub u32);

impl ConditionId {
    pub fn validate(self, num_conditions: usize) -> Result<()> {
        if (self.0 as usize) < num_conditions {
            Ok(())
        } else {
            Err(Error::Condition {
                id: self.0,
                num_conditions,
            })
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for ConditionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How the condition is turned into a query, or which ablation arm runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedType {
    /// One-hot condition through a learned affine map.
    Type1,
    /// Learnable per-condition mask row, ReLU, then a learned affine map.
    Type2,
    /// Full-depth self-attention with an elementwise condition mask on the
    /// final class token.
    MaskBaseline,
    /// Single embedding space: the condition is ignored entirely.
    Unconditioned,
}

impl EmbedType {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedType::Type1 => "type1",
            EmbedType::Type2 => "type2",
            EmbedType::MaskBaseline => "mask-baseline",
            EmbedType::Unconditioned => "unconditioned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(EmbedType::Type1),
            "type2" => Ok(EmbedType::Type2),
            "mask-baseline" => Ok(EmbedType::MaskBaseline),
            "unconditioned" => Ok(EmbedType::Unconditioned),
            other => Err(Error::Config(format!(
                "unknown embed type {other:?} (expected type1, type2, mask-baseline, or unconditioned)"
            ))),
        }
    }

    /// True for the variants whose final layer is conditional cross-attention.
    pub fn uses_cross_attention(self) -> bool {
        matches!(self, EmbedType::Type1 | EmbedType::Type2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Pixels per image side.
    pub image_size: usize,
    /// Pixels per patch side; must divide `image_size`.
    pub patch_size: usize,
    pub channels: usize,
    /// Total encoder depth L including the final (cross-attention) layer.
    pub depth: usize,
    /// Token embedding width D; must be divisible by `heads`.
    pub dim: usize,
    pub heads: usize,
    /// Inner width of the feed-forward block.
    pub ffn_hidden: usize,
    /// Number of conditions K.
    pub num_conditions: usize,
    /// Output embedding width.
    pub out_dim: usize,
    pub embed_type: EmbedType,
    pub precision: Precision,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 4,
            dim: 64,
            heads: 4,
            ffn_hidden: 128,
            num_conditions: 4,
            out_dim: 64,
            embed_type: EmbedType::Type2,
            precision: Precision::F64,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale defaults with a chosen head variant.
    pub fn default_with(embed_type: EmbedType) -> Self {
        EncoderConfig {
            embed_type,
            ..Default::default()
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// gradient checker.
    pub fn tiny(embed_type: EmbedType) -> Self {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            depth: 2,
            dim: 8,
            heads: 2,
            ffn_hidden: 16,
            num_conditions: 2,
            out_dim: 8,
            embed_type,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.channels == 0 || self.dim == 0 || self.ffn_hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("zero-sized dimension in encoder config".into()));
        }
        if self.num_conditions == 0 {
            return Err(Error::Config("need at least one condition".into()));
        }
        Ok(())
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Token sequence length 1 + N ([CLS] first).
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    /// Flattened patch width C·P·P.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Triplet hinge margin.
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub embed_type: EmbedType,
    /// Held-out triplets used for the per-epoch validation metric.
    pub val_triplets: usize,
    /// Stop early once validation triplet accuracy reaches this level.
    pub stop_at_val_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.2,
            lr: 1e-4,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            embed_type: EmbedType::Type2,
            val_triplets: 600,
            stop_at_val_acc: Some(0.95),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}
