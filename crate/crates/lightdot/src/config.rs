//! Model configuration shared by encoders, checkpoints and indexes.

use serde::{Deserialize, Serialize};

pub const CLS_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
/// First token id available to corpus vocabularies.
pub const FIRST_FREE_ID: u32 = 3;

/// Geometry vector per region: normalized x1,y1,x2,y2,w,h,area.
pub const GEOM_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer layers per encoder.
    pub layers: usize,
    /// Hidden dimension d.
    pub dim: usize,
    /// Attention heads.
    pub heads: usize,
    /// Feed-forward inner dimension.
    pub ffn: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Object classes for the region classification head.
    pub classes: usize,
    /// Region feature dimension d_v.
    pub feature_dim: usize,
    /// Maximum regions per image.
    pub n_max: usize,
    /// Maximum tokens per caption (excluding [CLS]).
    pub t_max: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: trains in seconds, exercises every code path.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 2,
            dim: 32,
            heads: 2,
            ffn: 128,
            vocab: 128,
            classes: 16,
            feature_dim: 24,
            n_max: 12,
            t_max: 16,
        }
    }

    /// Production-scale dimensions; constructible but untested at scale.
    pub fn full() -> Self {
        ModelConfig {
            layers: 12,
            dim: 768,
            heads: 12,
            ffn: 3072,
            vocab: 30000,
            classes: 1600,
            feature_dim: 2048,
            n_max: 36,
            t_max: 60,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let fields = [
            self.layers,
            self.dim,
            self.heads,
            self.ffn,
            self.vocab,
            self.classes,
            self.feature_dim,
            self.n_max,
            self.t_max,
        ];
        let mut out = Vec::with_capacity(fields.len() * 4);
        for f in fields {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        out
    }

    /// Stable hash used to refuse mixing artifacts built from different
    /// configurations.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(&self.canonical_bytes())
    }
}
