//! Weakly-supervised audiovisual word learning.
//!
//! A convolutional-recurrent network learns to predict the visual referent of
//! an utterance from its log-Mel spectrogram, given only utterance-level (and
//! partly random) labels. The crate also scores word detection, estimates
//! lexicon quality as normalized mutual information, and probes hidden layers
//! for phone selectivity.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod infotheory;
pub mod model;
pub mod parallel;
pub mod probe;
pub mod real;
pub mod training;

pub use error::{Error, Result};
pub use parallel::Parallelism;
