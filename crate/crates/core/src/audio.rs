//! Waveform container and 16-bit PCM wav file I/O.

use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio signal with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    /// Validates that every sample is finite and in [-1, 1].
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::BadFrameParams("sample rate must be positive".into()));
        }
        for (index, &value) in samples.iter().enumerate() {
            if !value.is_finite() || !(-1.0..=1.0).contains(&value) {
                return Err(Error::SampleOutOfRange { index, value });
            }
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let power: f64 = self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64;
        power.sqrt()
    }
}

/// Reads a mono 16-bit PCM wav file. Samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::NotAWav {
            path: path.into(),
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Multichannel {
            path: path.into(),
            channels: spec.channels,
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding {
            path: path.into(),
            detail: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::NotAWav {
            path: path.into(),
            detail: format!("truncated sample data: {e}"),
        })?;
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Writes a mono 16-bit PCM wav file. Errors if any sample leaves [-1, 1].
pub fn write_wav(waveform: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for (index, &value) in waveform.samples.iter().enumerate() {
        if !value.is_finite() || !(-1.0..=1.0).contains(&value) {
            return Err(Error::SampleOutOfRange { index, value });
        }
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: waveform.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| wav_write_error(path, e))?;
    for &sample in &waveform.samples {
        let quantized = (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(quantized)
            .map_err(|e| wav_write_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_write_error(path, e))?;
    Ok(())
}

fn wav_write_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::NotAWav {
            path: path.into(),
            detail: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pcm_scaling_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edge.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.write_sample(32767i16).unwrap();
        writer.write_sample(-32768i16).unwrap();
        writer.finalize().unwrap();

        let w = load_wav(&path).unwrap();
        assert_eq!(w.samples[0], 32767.0 / 32768.0);
        assert_eq!(w.samples[1], -1.0);
        assert_eq!(w.sample_rate_hz, 16000);
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.write_sample(0i16).unwrap();
        writer.write_sample(0i16).unwrap();
        writer.finalize().unwrap();

        match load_wav(&path) {
            Err(Error::Multichannel { channels, .. }) => assert_eq!(channels, 2),
            other => panic!("expected multichannel error, got {other:?}"),
        }
    }

    #[test]
    fn float_wav_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.write_sample(0.25f32).unwrap();
        writer.finalize().unwrap();

        assert!(matches!(
            load_wav(&path),
            Err(Error::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.wav");
        std::fs::write(&path, b"this is not riff data at all").unwrap();
        assert!(matches!(load_wav(&path), Err(Error::NotAWav { .. })));
    }

    #[test]
    fn empty_waveform_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        let w = Waveform::new(vec![], 16000).unwrap();
        write_wav(&w, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn round_trip_quantization_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let w = Waveform::new(samples, 16000).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        write_wav(&w, &path).unwrap();
        let back = load_wav(&path).unwrap();

        assert_eq!(back.len(), w.len());
        let max_err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 32768.0, "max_err = {max_err}");
    }

    #[test]
    fn out_of_range_sample_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        let w = Waveform {
            samples: vec![0.0, 2.0],
            sample_rate_hz: 16000,
        };
        assert!(matches!(
            write_wav(&w, &path),
            Err(Error::SampleOutOfRange { index: 1, .. })
        ));
    }
}
