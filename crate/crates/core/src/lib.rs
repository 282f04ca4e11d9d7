//! Desk-scale voice cloning toolkit: speaker encoder, text-to-mel
//! synthesizer, autoregressive vocoder, spectral-gating noise reduction and
//! evaluation metrics, plus a deterministic synthetic corpus so the whole
//! pipeline trains and evaluates in minutes.

pub mod audio;
pub mod autodiff;
pub mod error;
pub mod mel;
pub mod stft;

pub use audio::Waveform;
pub use error::{Error, Result};
pub use mel::{FeatureSequence, MelFilterbank, MelSpectrogram};
pub use stft::{ComplexSpectrogram, FrameParams, WindowKind};

pub mod encoder;
pub use encoder::Dvector;
pub mod ge2e;
pub use ge2e::SimilarityParams;
pub mod metrics;
pub mod pitch;
pub use pitch::PitchTrack;
pub mod corpus;
pub mod synthesizer;
pub mod vocoder;
pub mod griffin_lim;
pub mod denoise;
pub mod checkpoint;
pub use checkpoint::Checkpoint;
