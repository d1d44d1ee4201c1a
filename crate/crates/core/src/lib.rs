//! Product-quantized KV-cache retrieval for long-context decoding, plus a
//! deterministic simulator of the offload / clustering / prefetch pipeline.

pub mod attention;
pub mod error;
pub mod harness;
pub mod kmeans;
pub mod kv_store;
pub mod pq;
pub mod sched;
pub mod select;
pub mod shape;
pub mod tensor;

pub use error::{Error, Result};
pub use pq::{PqConfig, PqIndex};
pub use shape::{ModelShape, SegmentConfig};
pub use tensor::TensorF32;
