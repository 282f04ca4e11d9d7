//! Mel filterbank construction, log-mel spectrograms and MFCCs.

use ndarray::Array2;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::stft::{stft, FrameParams};

pub const POWER_FLOOR: f64 = 1e-10;
pub const FLOOR_DB: f64 = -100.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, one row per channel over the fft bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Array2<f64>,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    pub channels: usize,
    pub fft_size: usize,
}

/// `channels` triangular filters with centers equally spaced on the mel scale
/// between `low_hz` and `high_hz`; each filter's support runs from the
/// previous center to the next.
pub fn build_mel_filterbank(
    fft_size: usize,
    sample_rate_hz: u32,
    channels: usize,
    low_hz: f64,
    high_hz: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if !(0.0..high_hz).contains(&low_hz) || high_hz > nyquist {
        return Err(Error::BadBandEdges {
            low_hz,
            high_hz,
            nyquist_hz: nyquist,
        });
    }
    if channels == 0 {
        return Err(Error::FilterbankResolution { channels });
    }
    let bins = fft_size / 2 + 1;
    let mel_low = hz_to_mel(low_hz);
    let mel_high = hz_to_mel(high_hz);
    let step = (mel_high - mel_low) / (channels + 1) as f64;
    // Edge frequencies: low edge, K centers, high edge.
    let edges_hz: Vec<f64> = (0..channels + 2)
        .map(|i| mel_to_hz(mel_low + step * i as f64))
        .collect();

    let bin_hz = sample_rate_hz as f64 / fft_size as f64;
    let mut weights = Array2::zeros((channels, bins));
    for k in 0..channels {
        let (left, center, right) = (edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]);
        for bin in 0..bins {
            let f = bin as f64 * bin_hz;
            let w = if f <= left || f >= right {
                0.0
            } else if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            weights[[k, bin]] = w.max(0.0);
        }
    }

    // Resolution check: every filter must hit at least one bin and the peaks
    // must march upward in frequency.
    let mut prev_peak: Option<usize> = None;
    for k in 0..channels {
        let row = weights.row(k);
        let (peak_bin, peak) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if *peak <= 0.0 {
            return Err(Error::FilterbankResolution { channels });
        }
        if let Some(p) = prev_peak {
            if peak_bin <= p {
                return Err(Error::FilterbankResolution { channels });
            }
        }
        prev_peak = Some(peak_bin);
    }

    Ok(MelFilterbank {
        weights,
        mel_low_hz: low_hz,
        mel_high_hz: high_hz,
        channels,
        fft_size,
    })
}

/// Log-compressed mel energies, one row per frame.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub params: FrameParams,
    pub channels: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Rescales dB values so `floor_db` maps to 0 and 0 dB maps to 1.
    /// Model-facing representation used by the synthesizer and vocoder.
    pub fn normalized(&self, floor_db: f64) -> Array2<f64> {
        self.frames.mapv(|v| (v - floor_db) / -floor_db)
    }

    /// Inverse of [`MelSpectrogram::normalized`].
    pub fn from_normalized(frames: Array2<f64>, floor_db: f64, params: FrameParams) -> Self {
        let channels = frames.ncols();
        MelSpectrogram {
            frames: frames.mapv(|v| v * -floor_db + floor_db),
            params,
            channels,
        }
    }
}

/// `20·log10(max(filterbank · |stft|, POWER_FLOOR))`, clamped below at
/// `floor_db`.
pub fn mel_spectrogram(
    waveform: &Waveform,
    params: &FrameParams,
    filterbank: &MelFilterbank,
    floor_db: f64,
) -> Result<MelSpectrogram> {
    if filterbank.fft_size != params.fft_size {
        return Err(Error::ShapeMismatch {
            context: "mel filterbank vs frame params",
            expected: format!("fft_size {}", params.fft_size),
            found: format!("fft_size {}", filterbank.fft_size),
        });
    }
    let spec = stft(waveform, params);
    let mags = spec.magnitudes();
    let energies = mags.dot(&filterbank.weights.t());
    let frames = energies.mapv(|e| (20.0 * e.max(POWER_FLOOR).log10()).max(floor_db));
    Ok(MelSpectrogram {
        frames,
        params: *params,
        channels: filterbank.channels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    LogMel,
    Mfcc,
}

/// Frame-level feature matrix fed to the speaker encoder.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub mode: FeatureMode,
}

impl FeatureSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn width(&self) -> usize {
        self.frames.ncols()
    }
}

impl From<MelSpectrogram> for FeatureSequence {
    fn from(mel: MelSpectrogram) -> Self {
        FeatureSequence {
            frames: mel.frames,
            mode: FeatureMode::LogMel,
        }
    }
}

/// Orthonormal DCT-II along the mel axis, keeping the first `n_coeffs`
/// coefficients.
pub fn mfcc(mel: &MelSpectrogram, n_coeffs: usize) -> Result<FeatureSequence> {
    let k = mel.channels;
    if n_coeffs > k {
        return Err(Error::ShapeMismatch {
            context: "mfcc coefficient count",
            expected: format!("<= {k}"),
            found: n_coeffs.to_string(),
        });
    }
    let basis = dct_basis(k);
    let coeffs = mel.frames.dot(&basis.t());
    let frames = coeffs.slice(ndarray::s![.., 0..n_coeffs]).to_owned();
    Ok(FeatureSequence {
        frames,
        mode: FeatureMode::Mfcc,
    })
}

/// Orthonormal DCT-II matrix: row `c`, column `n` holds
/// `s_c · sqrt(2/K) · cos(pi·(n + 1/2)·c / K)` with `s_0 = 1/sqrt(2)`.
fn dct_basis(k: usize) -> Array2<f64> {
    let mut basis = Array2::zeros((k, k));
    let norm = (2.0 / k as f64).sqrt();
    for c in 0..k {
        let scale = if c == 0 { norm / 2f64.sqrt() } else { norm };
        for n in 0..k {
            basis[[c, n]] =
                scale * (std::f64::consts::PI * (n as f64 + 0.5) * c as f64 / k as f64).cos();
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mel_formula_anchors() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        let hz = 1234.5;
        assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows_unimodal_and_increasing() {
        let fb = build_mel_filterbank(512, 16000, 40, 0.0, 8000.0).unwrap();
        let mut prev_peak = 0usize;
        for k in 0..40 {
            let row = fb.weights.row(k);
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0));
            if k > 0 {
                assert!(peak > prev_peak, "row {k} peak did not advance");
            }
            // Single contiguous support.
            let support: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, _)| i)
                .collect();
            for pair in support.windows(2) {
                assert_eq!(pair[1], pair[0] + 1, "row {k} support has a gap");
            }
            prev_peak = peak;
        }
    }

    #[test]
    fn filterbank_column_sums_bounded() {
        let fb = build_mel_filterbank(512, 16000, 40, 0.0, 8000.0).unwrap();
        // Interior bins covered by the bank: between first and last peak.
        let peaks: Vec<usize> = (0..40)
            .map(|k| {
                fb.weights
                    .row(k)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        for bin in peaks[0]..=peaks[39] {
            let sum: f64 = (0..40).map(|k| fb.weights[[k, bin]]).sum();
            assert!(sum <= 1.0 + 1e-6, "bin {bin} sum {sum}");
        }
    }

    #[test]
    fn too_many_channels_rejected() {
        assert!(matches!(
            build_mel_filterbank(64, 16000, 60, 0.0, 8000.0),
            Err(Error::FilterbankResolution { .. })
        ));
    }

    #[test]
    fn bad_edges_rejected() {
        assert!(build_mel_filterbank(512, 16000, 40, 4000.0, 2000.0).is_err());
        assert!(build_mel_filterbank(512, 16000, 40, 0.0, 9000.0).is_err());
    }

    #[test]
    fn zero_signal_hits_floor() {
        let params = FrameParams::speech_default();
        let fb = build_mel_filterbank(512, 16000, 40, 0.0, 8000.0).unwrap();
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let mel = mel_spectrogram(&w, &params, &fb, FLOOR_DB).unwrap();
        assert!(mel.frames.iter().all(|&v| v == FLOOR_DB));
        assert_eq!(mel.frames.nrows(), params.frame_count(4000));
        assert_eq!(mel.frames.ncols(), 40);
    }

    #[test]
    fn log_scaling_law() {
        let params = FrameParams::speech_default();
        let fb = build_mel_filterbank(512, 16000, 40, 0.0, 8000.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..8000).map(|_| rng.gen_range(-0.45..0.45)).collect();
        let w = Waveform::new(samples.clone(), 16000).unwrap();
        let doubled =
            Waveform::new(samples.iter().map(|s| s * 2.0).collect(), 16000).unwrap();
        let a = mel_spectrogram(&w, &params, &fb, FLOOR_DB).unwrap();
        let b = mel_spectrogram(&doubled, &params, &fb, FLOOR_DB).unwrap();
        let gain = 20.0 * 2f64.log10();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            if *x > FLOOR_DB + gain && *y > FLOOR_DB + gain {
                assert!((y - x - gain).abs() < 1e-6, "x={x} y={y}");
            }
        }
    }

    #[test]
    fn mfcc_constant_row_concentrates_in_c0() {
        let params = FrameParams::speech_default();
        let frames = Array2::from_elem((3, 40), 5.0);
        let mel = MelSpectrogram {
            frames,
            params,
            channels: 40,
        };
        let feats = mfcc(&mel, 13).unwrap();
        assert_eq!(feats.frames.dim(), (3, 13));
        for t in 0..3 {
            assert!(feats.frames[[t, 0]].abs() > 1.0);
            for c in 1..13 {
                assert!(feats.frames[[t, c]].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mfcc_full_coefficients_preserve_energy_and_invert() {
        let params = FrameParams::speech_default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let frames = Array2::from_shape_fn((5, 40), |_| rng.gen_range(-30.0..10.0));
        let mel = MelSpectrogram {
            frames: frames.clone(),
            params,
            channels: 40,
        };
        let feats = mfcc(&mel, 40).unwrap();
        for t in 0..5 {
            let e_in: f64 = frames.row(t).iter().map(|v| v * v).sum();
            let e_out: f64 = feats.frames.row(t).iter().map(|v| v * v).sum();
            assert!((e_in - e_out).abs() < 1e-6 * e_in.max(1.0));
        }
        // Inverse DCT (transpose of the orthonormal basis) recovers log-mel.
        let basis = super::dct_basis(40);
        let back = feats.frames.dot(&basis);
        for (a, b) in frames.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mel_normalization_round_trip() {
        let params = FrameParams::speech_default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let frames = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-100.0..0.0));
        let mel = MelSpectrogram {
            frames: frames.clone(),
            params,
            channels: 8,
        };
        let norm = mel.normalized(FLOOR_DB);
        assert!(norm.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let back = MelSpectrogram::from_normalized(norm, FLOOR_DB, params);
        for (a, b) in frames.iter().zip(back.frames.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
