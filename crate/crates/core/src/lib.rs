//! Phoneme-level speech depression assessment.
//!
//! The crate separates a speaker's voiced speech into vowel and consonant
//! streams, turns each into power spectrograms, and classifies depression
//! (binary and 24-level severity) with two convolutional branches fused into
//! one network. Evaluation metrics and a cached, seeded pipeline are
//! included.

pub mod audio;
pub mod augment;
pub mod metrics;
pub mod nn;
pub mod phoneme;
pub mod pipeline;
pub mod spectrogram;
pub mod synth;
pub mod voicing;
