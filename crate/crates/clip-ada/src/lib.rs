//! Unified multi-class industrial anomaly detection built on a frozen
//! vision-language backbone: learnable text prompts are aligned with
//! projected patch features, a coarse similarity map is sharpened by
//! re-encoding the attention-modulated image, and training is driven by
//! synthetically corrupted normal images.

pub mod backbone;
pub mod container;
pub mod alignment;
pub mod datasets;
pub mod error;
pub mod imageops;
pub mod inference;
pub mod metrics;
pub mod prompting;
pub mod synthesis;
pub mod tape;
pub mod toydata;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use imageops::ImageTensor;
