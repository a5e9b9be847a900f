//! Empathetic response generation with polarity-grouped emotion sampling,
//! emotion mimicry and gated fusion, on top of a small reverse-mode
//! autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod context;
pub mod corpus;
pub mod decoder;
pub mod emotion;
pub mod error;
mod io;
pub mod layers;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod train;

pub use config::ModelConfig;
pub use emotion::{emotion_id, emotion_name, EmotionGrouping, Polarity, EMOTIONS, NUM_EMOTIONS};
pub use error::{MimeError, Result};
pub use io::write_atomic;
pub use model::{GenerateOptions, Generation, LossValues, Mime, Mode};

/// Seeded generator used for sampling noise, dropout masks and shuffling.
pub type MimeRng = rand_chacha::ChaCha8Rng;
