//! Dimensional configuration shared by every module.

use crate::error::{Error, Result};

/// Tensor extents of the modeled transformer.
///
/// `hidden_dim` is carried explicitly so a configuration read from flags or
/// files can be checked against `num_heads * head_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub batch_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
}

impl ModelShape {
    /// Builds a consistent shape with batch size 1 and `hidden_dim = heads * head_dim`.
    pub fn new(num_layers: usize, num_heads: usize, num_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            batch_size: 1,
            num_layers,
            num_heads,
            num_kv_heads,
            head_dim,
            hidden_dim: num_heads * head_dim,
        }
    }

    /// 32 layers, 32 query heads, 8 kv heads, head dim 128.
    pub fn llama_7b_gqa() -> Self {
        Self::new(32, 32, 8, 128)
    }

    /// Query heads per kv head.
    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }
}

/// Token partitioning of one sequence: pinned initial tokens, pinned recent
/// window, and the number of middle tokens selected per kv head and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentConfig {
    pub n_init: usize,
    pub n_local: usize,
    pub k: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            n_init: 16,
            n_local: 64,
            k: 0,
        }
    }
}

impl SegmentConfig {
    pub fn pinned(&self) -> usize {
        self.n_init + self.n_local
    }
}

pub fn validate_shape(shape: &ModelShape, seg: &SegmentConfig, s: usize) -> Result<()> {
    let counts = [
        ("batch_size", shape.batch_size),
        ("num_layers", shape.num_layers),
        ("num_heads", shape.num_heads),
        ("num_kv_heads", shape.num_kv_heads),
        ("head_dim", shape.head_dim),
        ("hidden_dim", shape.hidden_dim),
    ];
    for (name, v) in counts {
        if v == 0 {
            return Err(Error::DimensionMismatch(format!("{name} must be >= 1")));
        }
    }
    if !shape.num_heads.is_multiple_of(shape.num_kv_heads) {
        return Err(Error::DimensionMismatch(format!(
            "num_heads {} is not a multiple of num_kv_heads {}",
            shape.num_heads, shape.num_kv_heads
        )));
    }
    if shape.hidden_dim != shape.num_heads * shape.head_dim {
        return Err(Error::DimensionMismatch(format!(
            "hidden_dim {} != num_heads {} * head_dim {}",
            shape.hidden_dim, shape.num_heads, shape.head_dim
        )));
    }
    if seg.n_local == 0 {
        return Err(Error::DimensionMismatch("n_local must be >= 1".into()));
    }
    if seg.pinned() > s {
        return Err(Error::DimensionMismatch(format!(
            "n_init {} + n_local {} exceeds sequence length {s}",
            seg.n_init, seg.n_local
        )));
    }
    Ok(())
}
