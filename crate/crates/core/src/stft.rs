//! Framing, short-time Fourier transform and overlap-add inversion.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Rectangular,
}

/// Analysis frame geometry shared by every spectral operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameParams {
    pub window_length_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
}

impl FrameParams {
    pub fn new(
        window_length_samples: usize,
        hop_samples: usize,
        fft_size: usize,
        window_kind: WindowKind,
    ) -> Result<Self> {
        if window_length_samples == 0 || hop_samples == 0 || fft_size == 0 {
            return Err(Error::BadFrameParams(
                "window, hop and fft size must be positive".into(),
            ));
        }
        if hop_samples > window_length_samples {
            return Err(Error::BadFrameParams(format!(
                "hop {hop_samples} exceeds window {window_length_samples}"
            )));
        }
        if fft_size < window_length_samples {
            return Err(Error::BadFrameParams(format!(
                "fft size {fft_size} smaller than window {window_length_samples}"
            )));
        }
        if !fft_size.is_power_of_two() {
            return Err(Error::BadFrameParams(format!(
                "fft size {fft_size} is not a power of two"
            )));
        }
        Ok(Self {
            window_length_samples,
            hop_samples,
            fft_size,
            window_kind,
        })
    }

    /// 25 ms window, 10 ms hop, 512-point fft, hann window at 16 kHz.
    pub fn speech_default() -> Self {
        Self {
            window_length_samples: 400,
            hop_samples: 160,
            fft_size: 512,
            window_kind: WindowKind::Hann,
        }
    }

    /// Quarter-window hop and heavy zero padding: the spectral gate needs
    /// tonal mainlobes wider than its smoothing kernel, and Griffin-Lim
    /// style resynthesis wants dense overlap.
    pub fn denoise_default() -> Self {
        Self {
            window_length_samples: 400,
            hop_samples: 100,
            fft_size: 1024,
            window_kind: WindowKind::Hann,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_count(&self, signal_len: usize) -> usize {
        if signal_len < self.window_length_samples {
            0
        } else {
            (signal_len - self.window_length_samples) / self.hop_samples + 1
        }
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length_samples;
        match self.window_kind {
            WindowKind::Rectangular => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
                .collect(),
        }
    }

    /// Checks that the squared window tiled at the hop never sums to ~zero,
    /// so overlap-add synthesis is well defined everywhere in the interior.
    pub fn check_cola(&self) -> Result<()> {
        let window = self.window();
        let mut coverage = vec![0.0f64; self.hop_samples];
        for (i, w) in window.iter().enumerate() {
            coverage[i % self.hop_samples] += w * w;
        }
        let max = coverage.iter().cloned().fold(0.0, f64::max);
        let min = coverage.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 0.0 || min < 1e-8 * max {
            return Err(Error::NonCola);
        }
        Ok(())
    }
}

/// Complex STFT: one row per frame, `fft_size/2 + 1` bins.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub frames: Array2<Complex64>,
    pub params: FrameParams,
}

impl ComplexSpectrogram {
    pub fn magnitudes(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm())
    }
}

/// Splits the signal into windowed frames. Yields
/// `floor((len - window) / hop) + 1` frames, or none when the signal is
/// shorter than one window.
pub fn frame_signal(waveform: &Waveform, params: &FrameParams) -> Vec<Vec<f64>> {
    frame_slice(&waveform.samples, params)
}

fn frame_slice(samples: &[f64], params: &FrameParams) -> Vec<Vec<f64>> {
    let window = params.window();
    let count = params.frame_count(samples.len());
    (0..count)
        .map(|f| {
            let start = f * params.hop_samples;
            samples[start..start + params.window_length_samples]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect()
}

/// Windowed, zero-padded DFT of every frame; non-negative frequency bins only.
pub fn stft(waveform: &Waveform, params: &FrameParams) -> ComplexSpectrogram {
    stft_slice(&waveform.samples, params)
}

/// STFT of raw samples without the waveform range invariant; used by
/// iterative procedures whose intermediates can exceed full scale.
pub(crate) fn stft_slice(samples: &[f64], params: &FrameParams) -> ComplexSpectrogram {
    let frames = frame_slice(samples, params);
    let bins = params.bins();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(params.fft_size);
    let mut out = Array2::zeros((frames.len(), bins));
    let mut buffer = vec![Complex64::default(); params.fft_size];
    for (f, frame) in frames.iter().enumerate() {
        for slot in buffer.iter_mut() {
            *slot = Complex64::default();
        }
        for (i, &v) in frame.iter().enumerate() {
            buffer[i] = Complex64::new(v, 0.0);
        }
        fft.process(&mut buffer);
        for k in 0..bins {
            out[[f, k]] = buffer[k];
        }
    }
    ComplexSpectrogram {
        frames: out,
        params: *params,
    }
}

/// Overlap-add inversion with window-square normalization.
///
/// For an unmodified spectrogram this reproduces the input exactly wherever
/// the window tiling covers the signal; the leading/trailing half window is
/// attenuated. Output samples are clamped to [-1, 1].
pub fn istft(spec: &ComplexSpectrogram, sample_rate_hz: u32) -> Result<Waveform> {
    let samples = istft_raw(spec)?
        .into_iter()
        .map(|s| s.clamp(-1.0, 1.0))
        .collect();
    Ok(Waveform {
        samples,
        sample_rate_hz,
    })
}

/// Least-squares overlap-add synthesis without range clamping.
pub(crate) fn istft_raw(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    let params = &spec.params;
    params.check_cola()?;
    let n_frames = spec.frames.nrows();
    if n_frames == 0 {
        return Ok(vec![]);
    }
    let win_len = params.window_length_samples;
    let out_len = win_len + (n_frames - 1) * params.hop_samples;
    let window = params.window();

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(params.fft_size);
    let mut numerator = vec![0.0f64; out_len];
    let mut denominator = vec![0.0f64; out_len];
    let mut buffer = vec![Complex64::default(); params.fft_size];
    let scale = 1.0 / params.fft_size as f64;

    for f in 0..n_frames {
        // Rebuild the full conjugate-symmetric spectrum from the half kept.
        buffer[0] = spec.frames[[f, 0]];
        let bins = params.bins();
        for k in 1..bins {
            buffer[k] = spec.frames[[f, k]];
        }
        for k in bins..params.fft_size {
            buffer[k] = spec.frames[[f, params.fft_size - k]].conj();
        }
        ifft.process(&mut buffer);
        let start = f * params.hop_samples;
        for i in 0..win_len {
            let time_sample = buffer[i].re * scale;
            numerator[start + i] += window[i] * time_sample;
            denominator[start + i] += window[i] * window[i];
        }
    }

    Ok(numerator
        .iter()
        .zip(&denominator)
        .map(|(n, d)| if *d > 1e-12 { n / d } else { 0.0 })
        .collect())
}

/// Relative L2 error between two signals over `range`, used by reconstruction
/// checks on the fully-overlapped interior.
pub fn relative_l2_error(a: &[f64], b: &[f64], range: std::ops::Range<usize>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in range {
        let d = a[i] - b[i];
        num += d * d;
        den += a[i] * a[i];
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_waveform(len: usize, seed: u64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform {
            samples: (0..len).map(|_| rng.gen_range(-0.9..0.9)).collect(),
            sample_rate_hz: 16000,
        }
    }

    #[test]
    fn frame_count_formula() {
        let params = FrameParams::new(400, 160, 512, WindowKind::Rectangular).unwrap();
        let w = random_waveform(1000, 1);
        assert_eq!(frame_signal(&w, &params).len(), 4);

        let short = random_waveform(399, 2);
        assert_eq!(frame_signal(&short, &params).len(), 0);
    }

    #[test]
    fn rectangular_frames_are_raw_slices() {
        let params = FrameParams::new(8, 4, 16, WindowKind::Rectangular).unwrap();
        let w = random_waveform(32, 3);
        let frames = frame_signal(&w, &params);
        assert_eq!(frames[1], w.samples[4..12].to_vec());
    }

    #[test]
    fn stft_dc_signal() {
        let len = 64;
        let params = FrameParams::new(len, len, len, WindowKind::Rectangular).unwrap();
        let w = Waveform::new(vec![1.0; len], 16000).unwrap();
        let spec = stft(&w, &params);
        assert_eq!(spec.frames.nrows(), 1);
        assert!((spec.frames[[0, 0]].norm() - len as f64).abs() < 1e-9);
        for k in 1..params.bins() {
            assert!(spec.frames[[0, k]].norm() < 1e-9, "bin {k} leaked");
        }
    }

    #[test]
    fn stft_on_bin_cosine_peaks_at_that_bin() {
        let len = 128;
        let params = FrameParams::new(len, len, len, WindowKind::Rectangular).unwrap();
        let j = 5;
        let samples: Vec<f64> = (0..len)
            .map(|n| (std::f64::consts::TAU * j as f64 * n as f64 / len as f64).cos() * 0.9)
            .collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let spec = stft(&w, &params);
        let mags: Vec<f64> = (0..params.bins()).map(|k| spec.frames[[0, k]].norm()).collect();
        let argmax = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, j);
        // On-bin cosine with rectangular window has magnitude L/2 at the peak.
        assert!((mags[j] - 0.9 * len as f64 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_signal_zero_spectrogram() {
        let params = FrameParams::speech_default();
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let spec = stft(&w, &params);
        assert!(spec.frames.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn istft_identity_hann_quarter_hop() {
        let params = FrameParams::new(400, 100, 512, WindowKind::Hann).unwrap();
        let w = random_waveform(16000, 4);
        let spec = stft(&w, &params);
        let back = istft(&spec, w.sample_rate_hz).unwrap();
        let win = params.window_length_samples;
        let end = back.len().min(w.len()) - win;
        let err = relative_l2_error(&w.samples, &back.samples, win..end);
        assert!(err < 1e-6, "interior relative error {err}");
    }

    #[test]
    fn istft_identity_rectangular_disjoint() {
        let params = FrameParams::new(128, 128, 128, WindowKind::Rectangular).unwrap();
        let w = random_waveform(1280, 5);
        let spec = stft(&w, &params);
        let back = istft(&spec, w.sample_rate_hz).unwrap();
        let err = relative_l2_error(&w.samples, &back.samples, 0..w.len());
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn istft_zero_spectrogram_is_silence() {
        let params = FrameParams::new(400, 100, 512, WindowKind::Hann).unwrap();
        let spec = ComplexSpectrogram {
            frames: Array2::zeros((10, params.bins())),
            params,
        };
        let w = istft(&spec, 16000).unwrap();
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn non_cola_rejected() {
        // Hann window with hop == window gives zero coverage at the frame joins.
        let params = FrameParams::new(256, 256, 256, WindowKind::Hann).unwrap();
        let w = random_waveform(2048, 6);
        let spec = stft(&w, &params);
        assert!(matches!(istft(&spec, 16000), Err(Error::NonCola)));
    }

    #[test]
    fn frame_count_randomized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let window = rng.gen_range(2usize..600);
            let hop = rng.gen_range(1usize..=window);
            let len = rng.gen_range(0usize..4000);
            let fft = window.next_power_of_two();
            let params = FrameParams::new(window, hop, fft, WindowKind::Rectangular).unwrap();
            let w = random_waveform(len, 7);
            let expected = if len < window {
                0
            } else {
                (len - window) / hop + 1
            };
            assert_eq!(frame_signal(&w, &params).len(), expected);
        }
    }
}
