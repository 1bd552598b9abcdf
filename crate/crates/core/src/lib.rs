//! Context-aware speaking-style prediction for long-form speech synthesis.
//!
//! The pipeline has three models:
//!
//! * [`style_extractor`]: reads a style embedding off an utterance's mel
//!   features (reference encoder + style-token attention);
//! * [`style_predictor`]: predicts the current sentence's style from the
//!   text of its neighbors and the styles of the sentences already spoken,
//!   using a sentence encoder, a fusion encoder and a mixture attention
//!   mask;
//! * [`acoustic_model`]: a small non-autoregressive phoneme-to-mel model
//!   conditioned on the style.
//!
//! [`trainer`] runs the three training stages, [`inference`] synthesizes
//! paragraphs sentence by sentence with style feedback and [`metrics`]
//! scores the results.

pub mod acoustic_model;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod style_extractor;
pub mod style_predictor;
pub mod text_embedder;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
