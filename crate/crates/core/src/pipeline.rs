//! End-to-end wiring: feature extraction for each model, manifest-driven
//! training entry points, the speaker library, and the clone pipeline from
//! text plus a voice to a wav file.

use std::path::{Path, PathBuf};

use crate::audio::{load_wav, write_wav, Waveform};
use crate::checkpoint::{
    checkpoint_to_dvector, checkpoint_to_encoder, checkpoint_to_synthesizer,
    checkpoint_to_vocoder, dvector_to_checkpoint, encoder_to_checkpoint, Checkpoint,
};
use crate::config::Config;
use crate::corpus::CorpusEntry;
use crate::encoder::{compute_eer, embed_utterance, Dvector, EncoderParams};
use crate::error::{Error, Result};
use crate::ge2e::{
    train_encoder, EncoderTrainConfig, SimilarityParams, SpeakerFeatures, TrainRecord,
};
use crate::mel::{build_mel_filterbank, mel_spectrogram, mfcc, FeatureMode, FeatureSequence, MelSpectrogram};
use crate::stft::FrameParams;
use crate::synthesizer::{
    encode_text, infer_mel, train_synthesizer, MelTargetPair, SymbolTable, SynthParams,
    SynthTrainConfig, SynthTrainRecord,
};
use crate::vocoder::{
    generate, train_vocoder, upsample_conditioning, VocoderPair, VocoderParams,
    VocoderTrainConfig, VocoderTrainRecord,
};

/// Encoder input features for one waveform: log-mel by default, MFCC when
/// configured.
pub fn encoder_features(waveform: &Waveform, config: &Config) -> Result<FeatureSequence> {
    let params = config.frame_params()?;
    let bank = build_mel_filterbank(
        config.fft_size,
        config.sample_rate_hz,
        config.encoder_mel_channels,
        config.mel_low_hz,
        config.mel_high_hz,
    )?;
    let mel = mel_spectrogram(waveform, &params, &bank, config.floor_db)?;
    match config.feature_mode {
        FeatureMode::LogMel => Ok(mel.into()),
        FeatureMode::Mfcc => mfcc(&mel, config.mfcc_coeffs),
    }
}

/// The 80-band mel spectrogram exchanged between synthesizer and vocoder.
pub fn synth_mel(waveform: &Waveform, config: &Config) -> Result<MelSpectrogram> {
    let params = config.frame_params()?;
    let bank = build_mel_filterbank(
        config.fft_size,
        config.sample_rate_hz,
        config.synth_mel_channels,
        config.mel_low_hz,
        config.mel_high_hz,
    )?;
    mel_spectrogram(waveform, &params, &bank, config.floor_db)
}

fn expect_rate(waveform: &Waveform, config: &Config) -> Result<()> {
    if waveform.sample_rate_hz != config.sample_rate_hz {
        return Err(Error::SampleRateMismatch {
            expected: config.sample_rate_hz,
            found: waveform.sample_rate_hz,
        });
    }
    Ok(())
}

/// Groups manifest entries into per-speaker encoder features, preserving
/// first-seen speaker order.
pub fn speaker_features(entries: &[CorpusEntry], config: &Config) -> Result<Vec<SpeakerFeatures>> {
    let mut speakers: Vec<SpeakerFeatures> = Vec::new();
    for entry in entries {
        let waveform = load_wav(&entry.wav_path)?;
        expect_rate(&waveform, config)?;
        let features = encoder_features(&waveform, config)?;
        match speakers
            .iter_mut()
            .find(|s| s.speaker_id == entry.speaker_id)
        {
            Some(speaker) => speaker.utterances.push(features),
            None => speakers.push(SpeakerFeatures {
                speaker_id: entry.speaker_id.clone(),
                utterances: vec![features],
            }),
        }
    }
    Ok(speakers)
}

/// GE2E training over a manifest; returns the trained parameters and the
/// `step,loss,w,b` log.
pub fn train_encoder_manifest(
    manifest: &Path,
    config: &Config,
) -> Result<(EncoderParams, SimilarityParams, Vec<TrainRecord>)> {
    let entries = crate::corpus::read_manifest(manifest)?;
    let speakers = speaker_features(&entries, config)?;
    let train_config = EncoderTrainConfig {
        steps: config.encoder_steps,
        learning_rate: config.encoder_lr,
        grad_clip: config.grad_clip,
        n_speakers: config.ge2e_n_speakers,
        m_utterances: config.ge2e_m_utterances,
        window_frames: config.encoder_window_frames,
        layers: config.encoder_layers,
        hidden: config.encoder_hidden,
        embedding_dim: config.embedding_dim,
        scale_w_init: config.ge2e_scale_init,
        bias_b_init: config.ge2e_bias_init,
        scale_w_floor: config.ge2e_scale_floor,
        seed: config.seed,
    };
    train_encoder(&speakers, &train_config)
}

/// D-vector for one waveform through the configured front end.
pub fn embed_waveform(
    waveform: &Waveform,
    params: &EncoderParams,
    config: &Config,
) -> Result<Dvector> {
    expect_rate(waveform, config)?;
    let features = encoder_features(waveform, config)?;
    embed_utterance(
        params,
        &features,
        config.encoder_window_frames,
        config.encoder_stride_frames,
    )
}

/// Per-utterance embeddings of a manifest, tagged with speaker ids.
pub fn embed_manifest(
    entries: &[CorpusEntry],
    params: &EncoderParams,
    config: &Config,
) -> Result<Vec<(String, Dvector)>> {
    entries
        .iter()
        .map(|entry| {
            let waveform = load_wav(&entry.wav_path)?;
            Ok((
                entry.speaker_id.clone(),
                embed_waveform(&waveform, params, config)?,
            ))
        })
        .collect()
}

/// Held-out verification quality: EER over all same/different pairs plus
/// the mean intra- and inter-speaker cosines.
#[derive(Debug, Clone, Copy)]
pub struct SeparationReport {
    pub eer: f64,
    pub mean_intra: f64,
    pub mean_inter: f64,
}

pub fn evaluate_separation(
    entries: &[CorpusEntry],
    params: &EncoderParams,
    config: &Config,
) -> Result<SeparationReport> {
    let embedded = embed_manifest(entries, params, config)?;
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..embedded.len() {
        for j in (i + 1)..embedded.len() {
            let score = embedded[i].1.cosine(&embedded[j].1);
            if embedded[i].0 == embedded[j].0 {
                same.push(score);
            } else {
                diff.push(score);
            }
        }
    }
    let eer = compute_eer(&same, &diff)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SeparationReport {
        eer,
        mean_intra: mean(&same),
        mean_inter: mean(&diff),
    })
}

/// Loads the frozen encoder and builds (text, mel, d-vector) pairs from the
/// manifest, then trains the synthesizer.
pub fn train_synthesizer_manifest(
    manifest: &Path,
    encoder_checkpoint: &Path,
    config: &Config,
) -> Result<(SynthParams, Vec<SynthTrainRecord>)> {
    let (encoder, _) = checkpoint_to_encoder(&Checkpoint::load(encoder_checkpoint)?)?;
    let entries = crate::corpus::read_manifest(manifest)?;
    let table = SymbolTable;
    let mut pairs = Vec::with_capacity(entries.len());
    for entry in &entries {
        let waveform = load_wav(&entry.wav_path)?;
        expect_rate(&waveform, config)?;
        pairs.push(MelTargetPair {
            text: encode_text(&entry.transcript, &table)?,
            mel: synth_mel(&waveform, config)?,
            speaker: embed_waveform(&waveform, &encoder, config)?,
        });
    }
    let train_config = SynthTrainConfig {
        steps: config.synth_steps,
        learning_rate: config.synth_lr,
        grad_clip: config.grad_clip,
        symbol_dim: config.symbol_dim,
        prenet_dim: config.prenet_dim,
        hidden: config.decoder_hidden,
        seed: config.seed,
        early_stop_loss: (config.synth_early_stop > 0.0).then_some(config.synth_early_stop),
    };
    train_synthesizer(&pairs, &train_config)
}

/// Builds (mel, waveform) pairs from the manifest and trains the vocoder.
pub fn train_vocoder_manifest(
    manifest: &Path,
    config: &Config,
) -> Result<(VocoderParams, Vec<VocoderTrainRecord>)> {
    let entries = crate::corpus::read_manifest(manifest)?;
    let mut pairs = Vec::with_capacity(entries.len());
    for entry in &entries {
        let waveform = load_wav(&entry.wav_path)?;
        expect_rate(&waveform, config)?;
        let mel = synth_mel(&waveform, config)?;
        pairs.push(VocoderPair::new(mel, waveform, config.hop_samples)?);
    }
    let train_config = VocoderTrainConfig {
        steps: config.vocoder_steps,
        learning_rate: config.vocoder_lr,
        grad_clip: config.grad_clip,
        cond_dim: config.vocoder_cond_dim,
        hidden: config.vocoder_hidden,
        segment_len: config.vocoder_segment,
        upsample_mode: config.upsample_mode,
        seed: config.seed,
        eval_interval: config.vocoder_eval_interval.max(1),
        early_stop_mse: (config.vocoder_early_stop > 0.0).then_some(config.vocoder_early_stop),
    };
    train_vocoder(&pairs, config.hop_samples, &train_config)
}

pub const LIBRARY_INDEX: &str = "index.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibraryEntry {
    pub speaker_id: String,
    pub accent: String,
    pub gender: String,
}

/// Directory of `<speaker_id>.dvec` checkpoint files plus an index CSV
/// `speaker_id,accent,gender`.
#[derive(Debug, Clone)]
pub struct SpeakerLibrary {
    pub dir: PathBuf,
    pub entries: Vec<LibraryEntry>,
}

impl SpeakerLibrary {
    /// Opens and validates a library: every indexed id must resolve to a
    /// loadable unit-norm d-vector file.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let index = dir.join(LIBRARY_INDEX);
        let mut reader = csv::Reader::from_path(&index).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::BadLibraryIndex {
                path: index.clone(),
                detail: "index not readable".into(),
            },
            _ => Error::Csv(e),
        })?;
        let mut entries = Vec::new();
        for row in reader.records() {
            let row = row?;
            entries.push(LibraryEntry {
                speaker_id: row.get(0).unwrap_or("").to_string(),
                accent: row.get(1).unwrap_or("").to_string(),
                gender: row.get(2).unwrap_or("").to_string(),
            });
        }
        let library = SpeakerLibrary { dir, entries };
        for entry in &library.entries {
            library.dvector(&entry.speaker_id)?;
        }
        Ok(library)
    }

    /// Averaged per-speaker d-vectors of a manifest become the library,
    /// alternating accent tags and genders across the speaker list.
    pub fn build(
        dir: impl AsRef<Path>,
        entries: &[CorpusEntry],
        params: &EncoderParams,
        config: &Config,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let embedded = embed_manifest(entries, params, config)?;
        let mut order: Vec<String> = Vec::new();
        for (speaker, _) in &embedded {
            if !order.contains(speaker) {
                order.push(speaker.clone());
            }
        }
        let mut index = Vec::new();
        for (i, speaker) in order.iter().enumerate() {
            let mut sum = ndarray::Array1::zeros(params.embedding_dim());
            let mut count = 0usize;
            for (id, d) in &embedded {
                if id == speaker {
                    sum += d.values();
                    count += 1;
                }
            }
            let mean = Dvector::from_unnormalized(sum / count as f64)?;
            dvector_to_checkpoint(&mean)?.save(dir.join(format!("{speaker}.dvec")))?;
            index.push(LibraryEntry {
                speaker_id: speaker.clone(),
                accent: if i % 2 == 0 { "western" } else { "indian" }.to_string(),
                gender: if i % 2 == 0 { "F" } else { "M" }.to_string(),
            });
        }
        let index_path = dir.join(LIBRARY_INDEX);
        let mut writer = csv::Writer::from_path(&index_path).map_err(Error::Csv)?;
        writer.write_record(["speaker_id", "accent", "gender"])?;
        for entry in &index {
            writer.write_record([&entry.speaker_id, &entry.accent, &entry.gender])?;
        }
        writer.flush().map_err(|e| Error::io(&index_path, e))?;
        Ok(SpeakerLibrary { dir, entries: index })
    }

    pub fn dvector(&self, speaker_id: &str) -> Result<Dvector> {
        if !self.entries.iter().any(|e| e.speaker_id == speaker_id) {
            return Err(Error::UnknownSpeaker {
                id: speaker_id.to_string(),
                available: self
                    .entries
                    .iter()
                    .map(|e| e.speaker_id.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
        let path = self.dir.join(format!("{speaker_id}.dvec"));
        checkpoint_to_dvector(&Checkpoint::load(&path)?)
    }
}

#[derive(Debug, Clone)]
pub enum VoiceSource {
    /// Embed this reference recording with the encoder.
    Reference(PathBuf),
    /// Use a stored d-vector from the library directory.
    Library {
        dir: PathBuf,
        speaker_id: String,
    },
}

#[derive(Debug, Clone)]
pub struct CloneRequest {
    pub text: String,
    pub voice: VoiceSource,
    pub output: PathBuf,
    /// Denoise the generated audio against this noise clip when set.
    pub noise_clip: Option<PathBuf>,
    /// Overrides the config's frame budget when set.
    pub max_frames: Option<usize>,
}

/// Text plus a voice to a 16-bit wav on disk: embed (or look up) the
/// speaker, run the synthesizer free decode, upsample the mel conditioning,
/// generate samples, optionally denoise, and write the file.
pub fn run_clone_pipeline(
    request: &CloneRequest,
    encoder_checkpoint: &Path,
    synthesizer_checkpoint: &Path,
    vocoder_checkpoint: &Path,
    config: &Config,
) -> Result<Waveform> {
    let (encoder, _) = checkpoint_to_encoder(&Checkpoint::load(encoder_checkpoint)?)?;
    let synthesizer = checkpoint_to_synthesizer(&Checkpoint::load(synthesizer_checkpoint)?)?;
    let vocoder = checkpoint_to_vocoder(&Checkpoint::load(vocoder_checkpoint)?)?;

    let speaker = match &request.voice {
        VoiceSource::Reference(path) => {
            let reference = load_wav(path)?;
            embed_waveform(&reference, &encoder, config)?
        }
        VoiceSource::Library { dir, speaker_id } => {
            SpeakerLibrary::open(dir)?.dvector(speaker_id)?
        }
    };

    let text = encode_text(&request.text, &SymbolTable)?;
    let max_frames = request.max_frames.unwrap_or(config.max_frames);
    let mel = infer_mel(
        &synthesizer,
        &text,
        &speaker,
        max_frames,
        config.frame_params()?,
    )?;
    let conditioning =
        upsample_conditioning(&mel, &vocoder, config.hop_samples, config.upsample_mode)?;
    let mut audio = generate(&vocoder, &conditioning, 0.0, config.sample_rate_hz)?;

    if let Some(noise_path) = &request.noise_clip {
        let noise = load_wav(noise_path)?;
        expect_rate(&noise, config)?;
        let gate = crate::denoise::GateParams {
            threshold_k: config.gate_k,
            mask_floor: config.mask_floor,
            smooth_time: config.smooth_time,
            smooth_freq: config.smooth_freq,
        };
        audio = crate::denoise::denoise(&audio, &noise, &FrameParams::denoise_default(), &gate)?;
    }

    write_wav(&audio, &request.output)?;
    Ok(audio)
}

/// Persists encoder training output as a checkpoint file.
pub fn save_encoder_checkpoint(
    params: &EncoderParams,
    sim: &SimilarityParams,
    path: &Path,
) -> Result<()> {
    encoder_to_checkpoint(params, sim)?.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{synthesizer_to_checkpoint, vocoder_to_checkpoint};
    use crate::corpus::build_toy_corpus;

    /// Small but complete train-everything-then-clone exercise.
    #[test]
    fn clone_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");

        let mut config = Config::default();
        config.corpus_speakers = 3;
        config.corpus_utterances = 3;
        config.corpus_duration_s = 0.4;
        config.encoder_layers = 1;
        config.encoder_hidden = 12;
        config.embedding_dim = 6;
        config.encoder_window_frames = 10;
        config.encoder_stride_frames = 5;
        config.encoder_steps = 8;
        config.ge2e_n_speakers = 2;
        config.ge2e_m_utterances = 2;
        config.symbol_dim = 8;
        config.prenet_dim = 4;
        config.decoder_hidden = 10;
        config.synth_steps = 5;
        config.vocoder_cond_dim = 4;
        config.vocoder_hidden = 8;
        config.vocoder_steps = 5;
        config.vocoder_segment = 80;
        config.vocoder_early_stop = 0.0;
        config.max_frames = 6;

        build_toy_corpus(
            &corpus_dir,
            config.corpus_speakers,
            config.corpus_utterances,
            config.corpus_duration_s,
            config.sample_rate_hz,
            config.seed,
        )
        .unwrap();
        let manifest = corpus_dir.join("manifest_train.csv");

        let (encoder, sim, _) = train_encoder_manifest(&manifest, &config).unwrap();
        let encoder_path = dir.path().join("encoder.ckpt");
        save_encoder_checkpoint(&encoder, &sim, &encoder_path).unwrap();

        let (synth, _) = train_synthesizer_manifest(&manifest, &encoder_path, &config).unwrap();
        let synth_path = dir.path().join("synth.ckpt");
        synthesizer_to_checkpoint(&synth).unwrap().save(&synth_path).unwrap();

        let (vocoder, _) = train_vocoder_manifest(&manifest, &config).unwrap();
        let vocoder_path = dir.path().join("vocoder.ckpt");
        vocoder_to_checkpoint(&vocoder).unwrap().save(&vocoder_path).unwrap();

        // Library from the trained encoder.
        let entries = crate::corpus::read_manifest(&manifest).unwrap();
        let library_dir = dir.path().join("library");
        let library = SpeakerLibrary::build(&library_dir, &entries, &encoder, &config).unwrap();
        assert_eq!(library.entries.len(), 3);
        let reopened = SpeakerLibrary::open(&library_dir).unwrap();
        assert_eq!(reopened.entries, library.entries);

        // Clone from a reference wav.
        let reference = entries[0].wav_path.clone();
        let out_ref = dir.path().join("ref_clone.wav");
        let request = CloneRequest {
            text: "hello there".into(),
            voice: VoiceSource::Reference(reference),
            output: out_ref.clone(),
            noise_clip: None,
            max_frames: None,
        };
        let audio =
            run_clone_pipeline(&request, &encoder_path, &synth_path, &vocoder_path, &config)
                .unwrap();
        assert_eq!(audio.len(), config.max_frames * config.hop_samples);
        assert!(out_ref.exists());
        let written = load_wav(&out_ref).unwrap();
        assert_eq!(written.len(), audio.len());
        assert_eq!(written.sample_rate_hz, 16000);

        // Clone from the library; unknown ids list what exists.
        let out_lib = dir.path().join("lib_clone.wav");
        let request = CloneRequest {
            text: "hello there".into(),
            voice: VoiceSource::Library {
                dir: library_dir.clone(),
                speaker_id: "spk01".into(),
            },
            output: out_lib.clone(),
            noise_clip: None,
            max_frames: Some(4),
        };
        let audio =
            run_clone_pipeline(&request, &encoder_path, &synth_path, &vocoder_path, &config)
                .unwrap();
        assert_eq!(audio.len(), 4 * config.hop_samples);

        let request = CloneRequest {
            text: "hello".into(),
            voice: VoiceSource::Library {
                dir: library_dir,
                speaker_id: "spk99".into(),
            },
            output: dir.path().join("never.wav"),
            noise_clip: None,
            max_frames: None,
        };
        match run_clone_pipeline(&request, &encoder_path, &synth_path, &vocoder_path, &config) {
            Err(Error::UnknownSpeaker { available, .. }) => {
                assert!(available.contains("spk00") && available.contains("spk02"));
            }
            other => panic!("expected unknown-speaker error, got {other:?}"),
        }

        // Missing checkpoint is an error.
        let missing = dir.path().join("missing.ckpt");
        let request = CloneRequest {
            text: "hello".into(),
            voice: VoiceSource::Reference(entries[0].wav_path.clone()),
            output: dir.path().join("never2.wav"),
            noise_clip: None,
            max_frames: None,
        };
        assert!(run_clone_pipeline(&request, &missing, &synth_path, &vocoder_path, &config)
            .is_err());
    }

    #[test]
    fn reference_sample_rate_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let config = {
            let mut c = Config::default();
            c.encoder_layers = 1;
            c.encoder_hidden = 8;
            c.embedding_dim = 4;
            c
        };
        let wrong_rate = Waveform::new(vec![0.1; 8000], 8000).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand_chacha::rand_core::SeedableRng;
        let params = EncoderParams::init(1, 40, 8, 4, &mut rng);
        match embed_waveform(&wrong_rate, &params, &config) {
            Err(Error::SampleRateMismatch { expected, found }) => {
                assert_eq!((expected, found), (16000, 8000));
            }
            other => panic!("expected rate mismatch, got {other:?}"),
        }
        drop(dir);
    }
}
