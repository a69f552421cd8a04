//! Few-shot CLIP adaptation over precomputed embeddings.
//!
//! The crate builds text and visual caches from embedding bundles, trains a
//! linear intra-modal adapter with a supervised contrastive objective,
//! fine-tunes the text cache under the frozen visual ensemble, and evaluates
//! four classifiers: zero-shot, Tip-Adapter, DAC-V and DAC-VT.

pub mod adapter;
pub mod bundle;
pub mod cache;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod objective;
pub mod synthetic;
pub mod text_tune;
pub mod train;

pub use adapter::{AdamConfig, Adapter};
pub use bundle::{EmbeddingBundle, Record, SplitTag, TextBundle};
pub use cache::{adapt_cache, build_prototype_cache, build_text_cache, build_visual_cache, TextCache, VisualCache};
pub use error::{Error, ErrorFamily, Result};
pub use eval::{AlphaGrid, Artifacts, EvalReport, FlipReport};
pub use inference::Method;
pub use text_tune::{tune_text_cache, TextTuneConfig};
pub use train::{train_visual_adapter, BatchPolicy, TrainConfig};
