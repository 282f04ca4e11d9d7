//! Deterministic synthetic-speaker corpus: harmonic sources with per-speaker
//! fundamentals and formant emphases, written as wav files plus CSV
//! manifests with a disjoint train/test split.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};

pub const F0_LOW_HZ: f64 = 90.0;
pub const F0_HIGH_HZ: f64 = 300.0;
/// Any two speakers' fundamentals differ by at least this ratio.
pub const F0_MIN_SEPARATION: f64 = 1.15;

/// Recipe for one synthetic voice.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSpec {
    pub speaker_id: String,
    pub base_f0_hz: f64,
    pub formant1_hz: f64,
    pub formant2_hz: f64,
    pub amplitude: f64,
}

/// Deterministic speaker set: fundamentals on an equal-ratio ladder from 90
/// to 300 Hz, formant centers drawn per speaker from the seed.
pub fn speaker_specs(n_speakers: usize, seed: u64) -> Result<Vec<SpeakerSpec>> {
    if n_speakers == 0 {
        return Err(Error::EmptyInput("speaker count"));
    }
    let ratio = if n_speakers == 1 {
        F0_MIN_SEPARATION
    } else {
        (F0_HIGH_HZ / F0_LOW_HZ).powf(1.0 / (n_speakers as f64 - 1.0))
    };
    if ratio < F0_MIN_SEPARATION {
        return Err(Error::BadConfigValue {
            key: "corpus_speakers".into(),
            message: format!(
                "{n_speakers} speakers cannot keep {:.0}% f0 separation inside {F0_LOW_HZ}-{F0_HIGH_HZ} Hz",
                (F0_MIN_SEPARATION - 1.0) * 100.0
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_speakers)
        .map(|k| {
            let base_f0_hz = F0_LOW_HZ * ratio.powi(k as i32);
            let formant1_hz = rng.gen_range(400.0..1200.0);
            let formant2_hz = rng.gen_range(1600.0..3400.0);
            SpeakerSpec {
                speaker_id: format!("spk{k:02}"),
                base_f0_hz,
                formant1_hz,
                formant2_hz,
                amplitude: 0.5,
            }
        })
        .collect())
}

/// Harmonic utterance: jittered fundamental, 1/h harmonic rolloff shaped by
/// two Gaussian formant emphases, raised-cosine fade at both ends, peak
/// normalized to the spec amplitude. Deterministic in (spec, seed).
pub fn synth_speaker_utterance(
    spec: &SpeakerSpec,
    duration_s: f64,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<Waveform> {
    if duration_s <= 0.0 {
        return Err(Error::EmptyInput("utterance duration"));
    }
    let rate = sample_rate_hz as f64;
    let n = (duration_s * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Bounded pitch jitter: constant detune plus slow vibrato, |total| <= 2%.
    let detune = rng.gen_range(-0.008..0.008);
    let vibrato_depth = rng.gen_range(0.003..0.010);
    let vibrato_hz = rng.gen_range(2.0..5.0);
    let vibrato_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let nyquist = rate / 2.0;
    let n_harmonics = ((nyquist * 0.9 / spec.base_f0_hz).floor() as usize).clamp(1, 24);
    let gains: Vec<f64> = (1..=n_harmonics)
        .map(|h| {
            let f = spec.base_f0_hz * h as f64;
            let resonance = |center: f64, width: f64, boost: f64| {
                boost * (-(f - center) * (f - center) / (2.0 * width * width)).exp()
            };
            (1.0 / h as f64)
                * (1.0
                    + resonance(spec.formant1_hz, 250.0, 4.0)
                    + resonance(spec.formant2_hz, 300.0, 2.5))
        })
        .collect();
    let phases: Vec<f64> = (0..n_harmonics)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let mut samples = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    let fade = (0.02 * rate) as usize;
    for t in 0..n {
        let time = t as f64 / rate;
        let vibrato = vibrato_depth * (std::f64::consts::TAU * vibrato_hz * time + vibrato_phase).sin();
        let f0 = spec.base_f0_hz * (1.0 + detune + vibrato);
        phase += std::f64::consts::TAU * f0 / rate;
        let mut value = 0.0;
        for (h, (&gain, &phi)) in gains.iter().zip(&phases).enumerate() {
            value += gain * ((h as f64 + 1.0) * phase + phi).sin();
        }
        let envelope = if t < fade {
            0.5 - 0.5 * (std::f64::consts::PI * t as f64 / fade as f64).cos()
        } else if t + fade >= n {
            0.5 - 0.5 * (std::f64::consts::PI * (n - 1 - t) as f64 / fade as f64).cos()
        } else {
            1.0
        };
        samples.push(value * envelope);
    }

    let peak = samples.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    if peak > 0.0 {
        let scale = spec.amplitude / peak;
        for s in samples.iter_mut() {
            *s *= scale;
        }
    }
    Waveform::new(samples, sample_rate_hz)
}

/// One manifest row. Paths are stored relative to the manifest location.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub wav_path: PathBuf,
    pub transcript: String,
    pub speaker_id: String,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub dir: PathBuf,
    pub specs: Vec<SpeakerSpec>,
    pub entries: Vec<CorpusEntry>,
    pub train: Vec<CorpusEntry>,
    pub test: Vec<CorpusEntry>,
}

const TRANSCRIPTS: [&str; 20] = [
    "the quick brown fox jumps over the lazy dog",
    "a clear voice carries across the quiet room",
    "please call stella and ask her to bring these things",
    "the north wind and the sun were disputing which was stronger",
    "rice is often served in round bowls",
    "the juice of lemons makes fine punch",
    "the birch canoe slid on the smooth planks",
    "glue the sheet to the dark blue background",
    "it is easy to tell the depth of a well",
    "these days a chicken leg is a rare dish",
    "the box was thrown beside the parked truck",
    "the hogs were fed chopped corn and garbage",
    "four hours of steady work faced us",
    "a large size in stockings is hard to sell",
    "the boy was there when the sun rose",
    "a rod is used to catch pink salmon",
    "the source of the huge river is the clear spring",
    "kick the ball straight and follow through",
    "help the woman get back to her feet",
    "a pot of tea helps to pass the evening",
];

/// Writes `n_speakers × utterances_per_speaker` wav files plus three CSV
/// manifests (`manifest.csv`, `manifest_train.csv`, `manifest_test.csv`)
/// into `dir`. The split reserves one fifth of each speaker's utterances
/// (at least one) for test. Fully reproducible from the seed.
pub fn build_toy_corpus(
    dir: impl AsRef<Path>,
    n_speakers: usize,
    utterances_per_speaker: usize,
    duration_s: f64,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<ToyCorpus> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if utterances_per_speaker == 0 {
        return Err(Error::EmptyInput("utterances per speaker"));
    }
    let specs = speaker_specs(n_speakers, seed)?;
    let test_count = (utterances_per_speaker / 5).max(1).min(utterances_per_speaker - 1);
    let train_count = utterances_per_speaker - test_count;

    let mut entries = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (spk_idx, spec) in specs.iter().enumerate() {
        for utt in 0..utterances_per_speaker {
            let mut utt_rng = ChaCha8Rng::seed_from_u64(seed);
            utt_rng.set_stream(((spk_idx as u64) << 32) | utt as u64 | (1 << 63));
            let utt_seed = utt_rng.gen::<u64>();
            let waveform = synth_speaker_utterance(spec, duration_s, sample_rate_hz, utt_seed)?;
            let file_name = format!("{}_{utt:02}.wav", spec.speaker_id);
            write_wav(&waveform, dir.join(&file_name))?;
            let entry = CorpusEntry {
                wav_path: PathBuf::from(&file_name),
                transcript: TRANSCRIPTS[(spk_idx * utterances_per_speaker + utt) % TRANSCRIPTS.len()]
                    .to_string(),
                speaker_id: spec.speaker_id.clone(),
            };
            if utt < train_count {
                train.push(entry.clone());
            } else {
                test.push(entry.clone());
            }
            entries.push(entry);
        }
    }

    write_manifest(&dir.join("manifest.csv"), &entries)?;
    write_manifest(&dir.join("manifest_train.csv"), &train)?;
    write_manifest(&dir.join("manifest_test.csv"), &test)?;

    Ok(ToyCorpus {
        dir: dir.to_path_buf(),
        specs,
        entries,
        train,
        test,
    })
}

/// CSV `wav_path,transcript,speaker_id`.
pub fn write_manifest(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(Error::Csv)?;
    writer.write_record(["wav_path", "transcript", "speaker_id"])?;
    for entry in entries {
        writer.write_record([
            entry.wav_path.to_string_lossy().as_ref(),
            entry.transcript.as_str(),
            entry.speaker_id.as_str(),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a manifest; relative wav paths are resolved against the manifest's
/// directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(Error::Csv)?;
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row?;
        let raw = PathBuf::from(row.get(0).unwrap_or(""));
        let wav_path = if raw.is_absolute() { raw } else { base.join(raw) };
        entries.push(CorpusEntry {
            wav_path,
            transcript: row.get(1).unwrap_or("").to_string(),
            speaker_id: row.get(2).unwrap_or("").to_string(),
        });
    }
    Ok(entries)
}
