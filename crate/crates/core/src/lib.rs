//! Diagnostics for classifiers that end in a linear layer.
//!
//! Given the thresholded feature embeddings (FE) a network feeds into its
//! final linear layer, together with that layer's weights, this crate
//! rebuilds the per-class evidence vectors (CE), logits and predictions and
//! measures how many features each prediction rests on, how diverse those
//! features are per class, and how far test-time feature profiles drift
//! from training.
//!
//! Data moves in and out through EMBX directories (see [`embx`]).

pub mod class_stats;
pub mod cli;
pub mod decomposition;
pub mod divergence;
pub mod embx;
pub mod error;
pub mod matrix;
pub mod probe;
pub mod topk;

pub use decomposition::{accuracy, check_exported_logits, decompose, AccuracyReport, Decomposition};
pub use embx::{read_embx, write_embx, ClassifierHead, EmbeddingSet, EmbxObject, ReadOptions, Split};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use topk::{GroupBy, Ranking, Space};
