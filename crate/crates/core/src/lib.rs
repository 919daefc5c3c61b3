//! Region-aware teacher/student distillation for contrastive image-text
//! embeddings, at desk scale.
//!
//! A teacher fuses caption tokens with weighted region embeddings through two
//! cross-attention blocks and aggregates the result with a learned
//! temperature. A student image encoder is then trained to match the
//! teacher's image outputs while staying contrastively aligned with a frozen
//! text encoder. Everything runs on a small reverse-mode tape over dense
//! `f64` math with `f32` storage.
//!
//! ```
//! use dclip::tensor::Tensor;
//! use dclip::losses::info_nce;
//!
//! let same = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 1.0, 0.0])?;
//! assert!((info_nce(&same, &same, 1.0)? - 2f64.ln()).abs() < 1e-12);
//! # Ok::<(), dclip::Error>(())
//! ```

pub mod attention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod kmeans;
pub mod losses;
pub mod params;
pub mod region;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
