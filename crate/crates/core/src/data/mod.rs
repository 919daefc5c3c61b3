//! Synthetic data, dataset files and embedding caches.

pub mod cache;
pub mod dataset;
pub mod encode;
pub mod synthetic;
pub mod vocab;

pub use cache::EmbeddingCache;
pub use dataset::{Dataset, Sample};
pub use synthetic::{gen_synthetic, generate, SyntheticSpec};
