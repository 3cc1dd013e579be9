//! Bilingual distillation of multilingual transformer encoders.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod pipeline;
pub mod sft;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
