//! Three-stage whisper-to-speech conversion.
//!
//! Whispered 16 kHz audio is encoded into content features, mapped into a
//! whisper/normal shared space by a dual-encoder conformer VAE, stretched and
//! projected into the 22.05 kHz mel frame grid by the length–channel aligner,
//! turned into a mel-spectrogram by a duration-free, speaker-conditioned
//! acoustic model, and finally vocoded.

// `!(x >= 0.0)` is how NaN gets rejected alongside negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic;
pub mod aligner;
pub mod checkpoint;
pub mod config;
pub mod content_encoder;
pub mod error;
pub mod features;
pub mod frame;
pub mod corpus;
pub mod griffin_lim;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prosody;
pub mod softdtw;
pub mod spectral;
pub mod vae;
pub mod vocoder;

pub use error::{Error, Result};
pub use features::{FeatureDomain, FeatureSequence};
pub use frame::{compute_mel, num_frames, resample, FrameSpec, MelSpectrogram, Waveform};
