//! Autocorrelation pitch tracker with a voicing decision per frame.

use crate::audio::Waveform;
use crate::stft::FrameParams;

pub const DEFAULT_F_MIN: f64 = 50.0;
pub const DEFAULT_F_MAX: f64 = 500.0;
pub const DEFAULT_VOICING_THRESHOLD: f64 = 0.5;

/// Correlation slack when picking the shortest-lag peak near the global
/// maximum; guards against octave-down errors for non-integer periods.
const OCTAVE_MARGIN: f64 = 0.02;

/// Per-frame fundamental frequency estimates; `f0_hz` is 0 on unvoiced
/// frames.
#[derive(Debug, Clone)]
pub struct PitchTrack {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
    pub params: FrameParams,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    /// Median f0 over voiced frames; 0 when nothing is voiced.
    pub fn median_voiced_f0(&self) -> f64 {
        let mut voiced: Vec<f64> = self
            .f0_hz
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect();
        if voiced.is_empty() {
            return 0.0;
        }
        voiced.sort_by(|a, b| a.partial_cmp(b).unwrap());
        voiced[voiced.len() / 2]
    }
}

/// Frame-wise normalized autocorrelation over the lag band
/// `[rate/f_max, rate/f_min]`. A frame is voiced when the peak correlation
/// exceeds `voicing_threshold` and the frame RMS exceeds 1e-4; the peak lag
/// is refined by parabolic interpolation. Frames are raw signal slices
/// (frame timing from `params`, no analysis window applied).
pub fn track_pitch(
    waveform: &Waveform,
    params: &FrameParams,
    f_min: f64,
    f_max: f64,
    voicing_threshold: f64,
) -> PitchTrack {
    let rate = waveform.sample_rate_hz as f64;
    let window = params.window_length_samples;
    let lag_min = ((rate / f_max).ceil() as usize).max(1);
    let lag_max = ((rate / f_min).floor() as usize).min(window.saturating_sub(1));
    let n_frames = params.frame_count(waveform.len());

    let mut f0_hz = Vec::with_capacity(n_frames);
    let mut voiced = Vec::with_capacity(n_frames);

    for f in 0..n_frames {
        let start = f * params.hop_samples;
        let frame = &waveform.samples[start..start + window];
        let rms = (frame.iter().map(|s| s * s).sum::<f64>() / window as f64).sqrt();
        if rms <= 1e-4 || lag_min > lag_max {
            f0_hz.push(0.0);
            voiced.push(false);
            continue;
        }

        let corr: Vec<f64> = (lag_min..=lag_max)
            .map(|lag| normalized_autocorr(frame, lag))
            .collect();
        let max = corr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max <= voicing_threshold {
            f0_hz.push(0.0);
            voiced.push(false);
            continue;
        }
        // Smallest-lag local maximum within a small margin of the global
        // peak. A non-integer period scores slightly below an integer
        // multiple of itself, so a strict argmax would jump down an octave.
        let mut best = corr.len() - 1;
        for i in 0..corr.len() {
            let left_ok = i == 0 || corr[i] >= corr[i - 1];
            let right_ok = i + 1 == corr.len() || corr[i] >= corr[i + 1];
            if left_ok && right_ok && corr[i] >= max - OCTAVE_MARGIN {
                best = i;
                break;
            }
        }

        let lag = (lag_min + best) as f64 + parabolic_offset(&corr, best);
        let f0 = (rate / lag).clamp(f_min, f_max);
        f0_hz.push(f0);
        voiced.push(true);
    }

    PitchTrack {
        f0_hz,
        voiced,
        params: *params,
    }
}

fn normalized_autocorr(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len() - lag;
    let mut cross = 0.0;
    let mut head = 0.0;
    let mut tail = 0.0;
    for t in 0..n {
        cross += frame[t] * frame[t + lag];
        head += frame[t] * frame[t];
        tail += frame[t + lag] * frame[t + lag];
    }
    let denom = (head * tail).sqrt();
    if denom < 1e-20 {
        0.0
    } else {
        cross / denom
    }
}

/// Sub-sample peak refinement; zero at the band edges.
fn parabolic_offset(corr: &[f64], peak: usize) -> f64 {
    if peak == 0 || peak + 1 >= corr.len() {
        return 0.0;
    }
    let (left, mid, right) = (corr[peak - 1], corr[peak], corr[peak + 1]);
    let denom = left - 2.0 * mid + right;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}
