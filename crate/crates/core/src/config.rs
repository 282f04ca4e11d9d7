//! Flat `key = value` configuration with documented defaults.
//!
//! Unknown keys are rejected by name so typos fail loudly. `#` starts a
//! comment, whole-line or trailing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mel::FeatureMode;
use crate::stft::{FrameParams, WindowKind};
use crate::vocoder::UpsampleMode;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // Audio front-end.
    pub sample_rate_hz: u32,
    pub window_length_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    pub floor_db: f64,
    /// Mel channels feeding the speaker encoder.
    pub encoder_mel_channels: usize,
    /// Mel channels exchanged between synthesizer and vocoder.
    pub synth_mel_channels: usize,
    pub feature_mode: FeatureMode,
    pub mfcc_coeffs: usize,

    // Speaker encoder and its training.
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub embedding_dim: usize,
    pub encoder_window_frames: usize,
    pub encoder_stride_frames: usize,
    pub ge2e_n_speakers: usize,
    pub ge2e_m_utterances: usize,
    pub ge2e_scale_init: f64,
    pub ge2e_bias_init: f64,
    pub ge2e_scale_floor: f64,
    pub encoder_steps: usize,
    pub encoder_lr: f64,
    pub grad_clip: f64,
    pub verify_threshold: f64,

    // Synthesizer.
    pub symbol_dim: usize,
    pub prenet_dim: usize,
    pub decoder_hidden: usize,
    pub synth_steps: usize,
    pub synth_lr: f64,
    /// Stop synthesizer training below this loss; 0 disables.
    pub synth_early_stop: f64,
    pub max_frames: usize,

    // Vocoder.
    pub vocoder_cond_dim: usize,
    pub vocoder_hidden: usize,
    pub vocoder_steps: usize,
    pub vocoder_lr: f64,
    pub vocoder_segment: usize,
    pub vocoder_eval_interval: usize,
    /// Stop vocoder training below this full-clip MSE; 0 disables.
    pub vocoder_early_stop: f64,
    pub upsample_mode: UpsampleMode,

    // Noise gate.
    pub gate_k: f64,
    pub mask_floor: f64,
    pub smooth_time: usize,
    pub smooth_freq: usize,

    // Metrics.
    pub pitch_fmin: f64,
    pub pitch_fmax: f64,
    pub voicing_threshold: f64,
    pub gpe_deviation: f64,

    // Toy corpus.
    pub corpus_speakers: usize,
    pub corpus_utterances: usize,
    pub corpus_duration_s: f64,

    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            sample_rate_hz: 16_000,
            window_length_samples: 400,
            hop_samples: 160,
            fft_size: 512,
            window_kind: WindowKind::Hann,
            mel_low_hz: 0.0,
            mel_high_hz: 8000.0,
            floor_db: -100.0,
            encoder_mel_channels: 40,
            synth_mel_channels: 80,
            feature_mode: FeatureMode::LogMel,
            mfcc_coeffs: 13,

            encoder_layers: 3,
            encoder_hidden: 64,
            embedding_dim: 32,
            encoder_window_frames: 80,
            encoder_stride_frames: 40,
            ge2e_n_speakers: 4,
            ge2e_m_utterances: 5,
            ge2e_scale_init: 10.0,
            ge2e_bias_init: -5.0,
            ge2e_scale_floor: 1e-4,
            encoder_steps: 1200,
            encoder_lr: 0.01,
            grad_clip: 3.0,
            verify_threshold: 0.75,

            symbol_dim: 64,
            prenet_dim: 32,
            decoder_hidden: 128,
            synth_steps: 2000,
            synth_lr: 0.05,
            synth_early_stop: 0.0,
            max_frames: 400,

            vocoder_cond_dim: 32,
            vocoder_hidden: 128,
            vocoder_steps: 3000,
            vocoder_lr: 0.05,
            vocoder_segment: 320,
            vocoder_eval_interval: 100,
            vocoder_early_stop: 5e-4,
            upsample_mode: UpsampleMode::Repeat,

            gate_k: 1.5,
            mask_floor: 0.1,
            smooth_time: 2,
            smooth_freq: 2,

            pitch_fmin: 50.0,
            pitch_fmax: 500.0,
            voicing_threshold: 0.5,
            gpe_deviation: 0.2,

            corpus_speakers: 8,
            corpus_utterances: 10,
            corpus_duration_s: 1.6,

            seed: 42,
        }
    }
}

impl Config {
    pub fn frame_params(&self) -> Result<FrameParams> {
        FrameParams::new(
            self.window_length_samples,
            self.hop_samples,
            self.fft_size,
            self.window_kind,
        )
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::BadConfigValue {
                key: key.to_string(),
                message: format!("cannot parse {value:?}"),
            })
        }
        match key {
            "sample_rate_hz" => self.sample_rate_hz = parse(key, value)?,
            "window_length_samples" => self.window_length_samples = parse(key, value)?,
            "hop_samples" => self.hop_samples = parse(key, value)?,
            "fft_size" => self.fft_size = parse(key, value)?,
            "window_kind" => {
                self.window_kind = match value {
                    "hann" => WindowKind::Hann,
                    "rectangular" => WindowKind::Rectangular,
                    other => {
                        return Err(Error::BadConfigValue {
                            key: key.to_string(),
                            message: format!("{other:?} is not hann or rectangular"),
                        })
                    }
                }
            }
            "mel_low_hz" => self.mel_low_hz = parse(key, value)?,
            "mel_high_hz" => self.mel_high_hz = parse(key, value)?,
            "floor_db" => self.floor_db = parse(key, value)?,
            "encoder_mel_channels" => self.encoder_mel_channels = parse(key, value)?,
            "synth_mel_channels" => self.synth_mel_channels = parse(key, value)?,
            "feature_mode" => {
                self.feature_mode = match value {
                    "log_mel" => FeatureMode::LogMel,
                    "mfcc" => FeatureMode::Mfcc,
                    other => {
                        return Err(Error::BadConfigValue {
                            key: key.to_string(),
                            message: format!("{other:?} is not log_mel or mfcc"),
                        })
                    }
                }
            }
            "mfcc_coeffs" => self.mfcc_coeffs = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "encoder_window_frames" => self.encoder_window_frames = parse(key, value)?,
            "encoder_stride_frames" => self.encoder_stride_frames = parse(key, value)?,
            "ge2e_n_speakers" => self.ge2e_n_speakers = parse(key, value)?,
            "ge2e_m_utterances" => self.ge2e_m_utterances = parse(key, value)?,
            "ge2e_scale_init" => self.ge2e_scale_init = parse(key, value)?,
            "ge2e_bias_init" => self.ge2e_bias_init = parse(key, value)?,
            "ge2e_scale_floor" => self.ge2e_scale_floor = parse(key, value)?,
            "encoder_steps" => self.encoder_steps = parse(key, value)?,
            "encoder_lr" => self.encoder_lr = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "verify_threshold" => self.verify_threshold = parse(key, value)?,
            "symbol_dim" => self.symbol_dim = parse(key, value)?,
            "prenet_dim" => self.prenet_dim = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "synth_steps" => self.synth_steps = parse(key, value)?,
            "synth_lr" => self.synth_lr = parse(key, value)?,
            "synth_early_stop" => self.synth_early_stop = parse(key, value)?,
            "max_frames" => self.max_frames = parse(key, value)?,
            "vocoder_cond_dim" => self.vocoder_cond_dim = parse(key, value)?,
            "vocoder_hidden" => self.vocoder_hidden = parse(key, value)?,
            "vocoder_steps" => self.vocoder_steps = parse(key, value)?,
            "vocoder_lr" => self.vocoder_lr = parse(key, value)?,
            "vocoder_segment" => self.vocoder_segment = parse(key, value)?,
            "vocoder_eval_interval" => self.vocoder_eval_interval = parse(key, value)?,
            "vocoder_early_stop" => self.vocoder_early_stop = parse(key, value)?,
            "upsample_mode" => {
                self.upsample_mode = match value {
                    "repeat" => UpsampleMode::Repeat,
                    "linear" => UpsampleMode::Linear,
                    other => {
                        return Err(Error::BadConfigValue {
                            key: key.to_string(),
                            message: format!("{other:?} is not repeat or linear"),
                        })
                    }
                }
            }
            "gate_k" => self.gate_k = parse(key, value)?,
            "mask_floor" => self.mask_floor = parse(key, value)?,
            "smooth_time" => self.smooth_time = parse(key, value)?,
            "smooth_freq" => self.smooth_freq = parse(key, value)?,
            "pitch_fmin" => self.pitch_fmin = parse(key, value)?,
            "pitch_fmax" => self.pitch_fmax = parse(key, value)?,
            "voicing_threshold" => self.voicing_threshold = parse(key, value)?,
            "gpe_deviation" => self.gpe_deviation = parse(key, value)?,
            "corpus_speakers" => self.corpus_speakers = parse(key, value)?,
            "corpus_utterances" => self.corpus_utterances = parse(key, value)?,
            "corpus_duration_s" => self.corpus_duration_s = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            unknown => return Err(Error::UnknownConfigKey(unknown.to_string())),
        }
        Ok(())
    }
}

/// Parses a config file: defaults overlaid with the file's `key = value`
/// lines. Unknown keys and malformed lines are errors that name the culprit.
pub fn parse_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<Config> {
    let mut config = Config::default();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::MalformedConfigLine {
                line_no: line_no + 1,
                line: raw.to_string(),
            });
        };
        config.apply(key.trim(), value.trim())?;
    }
    Ok(config)
}
