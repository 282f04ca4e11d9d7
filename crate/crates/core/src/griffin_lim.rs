//! Griffin-Lim iterative phase reconstruction from a magnitude spectrogram.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::stft::{istft_raw, stft_slice, ComplexSpectrogram, FrameParams};

const PHASE_SEED: u64 = 0x4752_4c50;

/// Reconstructs a waveform whose STFT magnitude approximates `magnitudes`
/// (T × fft/2+1, nonnegative). The phase starts from a seeded random draw
/// and is re-estimated for `iterations` rounds; the spectral-consistency
/// error is non-increasing across rounds. The final estimate is peak-scaled
/// into [-1, 1] when it overshoots.
pub fn griffin_lim(
    magnitudes: &Array2<f64>,
    params: &FrameParams,
    iterations: usize,
    sample_rate_hz: u32,
) -> Result<Waveform> {
    let (waveform, _) = griffin_lim_trace(magnitudes, params, iterations, sample_rate_hz)?;
    Ok(waveform)
}

/// [`griffin_lim`] plus the per-iteration consistency error
/// `‖ |stft(x)| − magnitudes ‖_F`, for convergence checks.
pub fn griffin_lim_trace(
    magnitudes: &Array2<f64>,
    params: &FrameParams,
    iterations: usize,
    sample_rate_hz: u32,
) -> Result<(Waveform, Vec<f64>)> {
    params.check_cola()?;
    if magnitudes.ncols() != params.bins() {
        return Err(Error::ShapeMismatch {
            context: "griffin-lim magnitudes",
            expected: format!("{} bins", params.bins()),
            found: magnitudes.ncols().to_string(),
        });
    }
    if magnitudes.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::EmptyInput("negative or NaN magnitude"));
    }

    // Seeded random initial phase: deterministic, and unlike a zero-phase
    // start it does not lock onto the pulse train at the frame rate.
    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut spectrum = magnitudes.mapv(|m| {
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        Complex64::from_polar(m, phi)
    });
    let mut errors = Vec::with_capacity(iterations);
    let mut samples = synth(&spectrum, params)?;

    for _ in 0..iterations {
        let analyzed = stft_slice(&samples, params);
        errors.push(consistency_error(&analyzed, magnitudes));
        for (slot, reference) in spectrum.iter_mut().zip(analyzed.frames.iter()) {
            let norm = reference.norm();
            let phase = if norm > 1e-300 {
                reference / norm
            } else {
                Complex64::new(1.0, 0.0)
            };
            *slot = phase * slot.norm();
        }
        samples = synth(&spectrum, params)?;
    }

    let peak = samples.iter().fold(0.0f64, |acc, &s| acc.max(s.abs()));
    if peak > 1.0 {
        let scale = 0.99 / peak;
        for s in samples.iter_mut() {
            *s *= scale;
        }
    }
    Ok((
        Waveform {
            samples,
            sample_rate_hz,
        },
        errors,
    ))
}

/// Raw least-squares synthesis; intermediates may exceed full scale.
fn synth(spectrum: &Array2<Complex64>, params: &FrameParams) -> Result<Vec<f64>> {
    istft_raw(&ComplexSpectrogram {
        frames: spectrum.clone(),
        params: *params,
    })
}

fn consistency_error(analyzed: &ComplexSpectrogram, magnitudes: &Array2<f64>) -> f64 {
    analyzed
        .frames
        .iter()
        .zip(magnitudes.iter())
        .map(|(c, &m)| {
            let d = c.norm() - m;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pitch::track_pitch;
    use crate::stft::{stft, WindowKind};

    fn params() -> FrameParams {
        FrameParams::new(400, 100, 512, WindowKind::Hann).unwrap()
    }

    #[test]
    fn zero_magnitudes_give_silence() {
        let mags = Array2::zeros((12, params().bins()));
        let w = griffin_lim(&mags, &params(), 10, 16000).unwrap();
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn negative_magnitudes_rejected() {
        let mut mags = Array2::zeros((3, params().bins()));
        mags[[1, 5]] = -0.5;
        assert!(griffin_lim(&mags, &params(), 5, 16000).is_err());
    }

    #[test]
    fn sine_reconstruction_recovers_pitch() {
        let freq = 200.0;
        let n = 16000;
        let original = Waveform {
            samples: (0..n)
                .map(|t| 0.5 * (std::f64::consts::TAU * freq * t as f64 / 16000.0).sin())
                .collect(),
            sample_rate_hz: 16000,
        };
        let mags = stft(&original, &params()).magnitudes();
        let rebuilt = griffin_lim(&mags, &params(), 60, 16000).unwrap();
        let track = track_pitch(&rebuilt, &params(), 50.0, 500.0, 0.5);
        let median = track.median_voiced_f0();
        assert!(
            (median - freq).abs() / freq < 0.01,
            "pitch {median} vs {freq}"
        );
    }

    #[test]
    fn consistency_error_is_monotone() {
        let mut rngstate = 1u64;
        let mut next = || {
            rngstate ^= rngstate << 13;
            rngstate ^= rngstate >> 7;
            rngstate ^= rngstate << 17;
            (rngstate % 10_000) as f64 / 10_000.0
        };
        let w = Waveform {
            samples: (0..8000).map(|_| next() - 0.5).collect(),
            sample_rate_hz: 16000,
        };
        // Attenuating a third of the bins makes the magnitudes inconsistent
        // with every real signal, which is the interesting convergence case.
        let mut mags = stft(&w, &params()).magnitudes();
        for (i, m) in mags.iter_mut().enumerate() {
            if i % 3 == 0 {
                *m *= 0.2;
            }
        }
        let (_, errors) = griffin_lim_trace(&mags, &params(), 30, 16000).unwrap();
        assert_eq!(errors.len(), 30);
        for pair in errors.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-7,
                "consistency error increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        assert!(errors.last().unwrap() < &errors[0]);
    }
}
