//! Evaluation metrics: gross pitch error, spectral distortion, MOS
//! aggregation from listener ratings and the per-utterance score report.

use std::path::{Path, PathBuf};

use crate::audio::{load_wav, Waveform};
use crate::error::{Error, Result};
use crate::pitch::{track_pitch, PitchTrack};
use crate::stft::{stft, FrameParams};

/// Gross pitch error over the frames voiced in both tracks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpeResult {
    /// Percentage in [0, 100].
    pub percent: f64,
    /// Number of jointly-voiced frames the percentage is based on; a value
    /// of zero means the 0.0 result is vacuous and worth a warning.
    pub jointly_voiced: usize,
}

/// Percentage of jointly-voiced frames where the test pitch deviates from
/// the reference by more than `deviation` (a fraction of the reference).
/// Tracks are trimmed to the shorter length.
pub fn gpe(reference: &PitchTrack, test: &PitchTrack, deviation: f64) -> GpeResult {
    let frames = reference.len().min(test.len());
    let mut jointly_voiced = 0usize;
    let mut gross = 0usize;
    for t in 0..frames {
        if reference.voiced[t] && test.voiced[t] {
            jointly_voiced += 1;
            let rel = (test.f0_hz[t] - reference.f0_hz[t]).abs() / reference.f0_hz[t];
            if rel > deviation {
                gross += 1;
            }
        }
    }
    let percent = if jointly_voiced == 0 {
        0.0
    } else {
        100.0 * gross as f64 / jointly_voiced as f64
    };
    GpeResult {
        percent,
        jointly_voiced,
    }
}

const SD_EPSILON: f64 = 1e-10;

/// Frame-averaged RMS log-spectral distance in dB:
/// `mean_t sqrt( mean_k (20·log10(|R|+ε) - 20·log10(|T|+ε))² )`.
/// Signals are trimmed to the common length first.
pub fn spectral_distortion(
    reference: &Waveform,
    test: &Waveform,
    params: &FrameParams,
) -> Result<f64> {
    let common = reference.len().min(test.len());
    if params.frame_count(common) == 0 {
        return Err(Error::EmptyInput("spectral distortion overlap"));
    }
    if reference.sample_rate_hz != test.sample_rate_hz {
        return Err(Error::SampleRateMismatch {
            expected: reference.sample_rate_hz,
            found: test.sample_rate_hz,
        });
    }
    let trim = |w: &Waveform| Waveform {
        samples: w.samples[..common].to_vec(),
        sample_rate_hz: w.sample_rate_hz,
    };
    let spec_ref = stft(&trim(reference), params);
    let spec_test = stft(&trim(test), params);
    let bins = params.bins();
    let frames = spec_ref.frames.nrows();

    let mut total = 0.0;
    for t in 0..frames {
        let mut sq = 0.0;
        for k in 0..bins {
            let a = 20.0 * (spec_ref.frames[[t, k]].norm() + SD_EPSILON).log10();
            let b = 20.0 * (spec_test.frames[[t, k]].norm() + SD_EPSILON).log10();
            sq += (a - b) * (a - b);
        }
        total += (sq / bins as f64).sqrt();
    }
    Ok(total / frames as f64)
}

/// The four similarity categories of the listening test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingLabel {
    VerySimilar,
    ModeratelySimilar,
    SlightlySimilar,
    NotAtAllSimilar,
}

impl RatingLabel {
    /// Case-insensitive match against the four category phrases.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_lowercase().as_str() {
            "very similar" => Ok(RatingLabel::VerySimilar),
            "moderately similar" => Ok(RatingLabel::ModeratelySimilar),
            "slightly similar" => Ok(RatingLabel::SlightlySimilar),
            "not at all similar" => Ok(RatingLabel::NotAtAllSimilar),
            other => Err(Error::UnknownRatingLabel(other.to_string())),
        }
    }

    /// Midpoint of the category's MOS band: very similar spans 4..5,
    /// moderately 3..4, slightly 2..3, not at all below 2.
    pub fn band_midpoint(&self) -> f64 {
        match self {
            RatingLabel::VerySimilar => 4.5,
            RatingLabel::ModeratelySimilar => 3.5,
            RatingLabel::SlightlySimilar => 2.5,
            RatingLabel::NotAtAllSimilar => 1.5,
        }
    }
}

/// One listener response row.
#[derive(Debug, Clone)]
pub struct RatingRecord {
    pub label: RatingLabel,
    pub locale: String,
    pub source: String,
}

/// Mean of the band midpoints over all records.
pub fn aggregate_mos(records: &[RatingRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("rating records"));
    }
    let sum: f64 = records.iter().map(|r| r.label.band_midpoint()).sum();
    Ok(sum / records.len() as f64)
}

/// Reads a ratings CSV with header `label,locale,source`.
pub fn read_ratings_csv(path: impl AsRef<Path>) -> Result<Vec<RatingRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(Error::Csv)?;
    {
        let headers = reader.headers()?;
        let expected = ["label", "locale", "source"];
        let found: Vec<String> = headers.iter().map(|h| h.trim().to_lowercase()).collect();
        if found != expected {
            return Err(Error::BadLibraryIndex {
                path: path.into(),
                detail: format!("expected header label,locale,source, found {}", found.join(",")),
            });
        }
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        records.push(RatingRecord {
            label: RatingLabel::parse(row.get(0).unwrap_or(""))?,
            locale: row.get(1).unwrap_or("").to_string(),
            source: row.get(2).unwrap_or("").to_string(),
        });
    }
    Ok(records)
}

/// Identification and inputs for one report row.
#[derive(Debug, Clone)]
pub struct ScoreRequest {
    pub accent: String,
    pub dataset: String,
    pub speaker_id: String,
    pub gender: String,
    pub reference_wav: PathBuf,
    pub test_wav: PathBuf,
    pub ratings: Option<Vec<RatingRecord>>,
}

/// One evaluated row; `error` is set (and the metrics empty) when an input
/// could not be read.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub accent: String,
    pub dataset: String,
    pub speaker_id: String,
    pub gender: String,
    pub mos: Option<f64>,
    pub gpe: Option<f64>,
    pub sd: Option<f64>,
    pub gpe_vacuous: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
}

pub const REPORT_HEADER: &str = "accent,dataset,speaker_id,gender,mos,gpe,sd";

impl ScoreReport {
    /// Renders the report with the fixed column order; metric cells carry
    /// two decimals, missing values stay empty.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for row in &self.rows {
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.accent,
                row.dataset,
                row.speaker_id,
                row.gender,
                cell(row.mos),
                cell(row.gpe),
                cell(row.sd),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv_string())
            .map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Pitch-band and deviation settings shared by the report metrics.
#[derive(Debug, Clone, Copy)]
pub struct MetricParams {
    pub frame: FrameParams,
    pub f_min: f64,
    pub f_max: f64,
    pub voicing_threshold: f64,
    pub gpe_deviation: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            frame: FrameParams::speech_default(),
            f_min: crate::pitch::DEFAULT_F_MIN,
            f_max: crate::pitch::DEFAULT_F_MAX,
            voicing_threshold: crate::pitch::DEFAULT_VOICING_THRESHOLD,
            gpe_deviation: 0.20,
        }
    }
}

/// Computes GPE and SD per row (MOS when ratings are attached). A row whose
/// wav files cannot be read becomes an error entry; the report is still
/// produced.
pub fn score_report(requests: &[ScoreRequest], params: &MetricParams) -> ScoreReport {
    let rows = requests
        .iter()
        .map(|req| {
            let mos = req.ratings.as_deref().and_then(|r| aggregate_mos(r).ok());
            match score_pair(req, params) {
                Ok((gpe_result, sd)) => ScoreRow {
                    accent: req.accent.clone(),
                    dataset: req.dataset.clone(),
                    speaker_id: req.speaker_id.clone(),
                    gender: req.gender.clone(),
                    mos,
                    gpe: Some(gpe_result.percent),
                    sd: Some(sd),
                    gpe_vacuous: gpe_result.jointly_voiced == 0,
                    error: None,
                },
                Err(e) => ScoreRow {
                    accent: req.accent.clone(),
                    dataset: req.dataset.clone(),
                    speaker_id: req.speaker_id.clone(),
                    gender: req.gender.clone(),
                    mos,
                    gpe: None,
                    sd: None,
                    gpe_vacuous: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    ScoreReport { rows }
}

fn score_pair(req: &ScoreRequest, params: &MetricParams) -> Result<(GpeResult, f64)> {
    let reference = load_wav(&req.reference_wav)?;
    let test = load_wav(&req.test_wav)?;
    let track_ref = track_pitch(
        &reference,
        &params.frame,
        params.f_min,
        params.f_max,
        params.voicing_threshold,
    );
    let track_test = track_pitch(
        &test,
        &params.frame,
        params.f_min,
        params.f_max,
        params.voicing_threshold,
    );
    let gpe_result = gpe(&track_ref, &track_test, params.gpe_deviation);
    let sd = spectral_distortion(&reference, &test, &params.frame)?;
    Ok((gpe_result, sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;
    use crate::stft::WindowKind;
    use rand::{Rng, SeedableRng};

    fn sine(freq: f64, amplitude: f64, duration_s: f64) -> Waveform {
        let rate = 16000u32;
        let n = (duration_s * rate as f64) as usize;
        Waveform {
            samples: (0..n)
                .map(|t| amplitude * (std::f64::consts::TAU * freq * t as f64 / rate as f64).sin())
                .collect(),
            sample_rate_hz: rate,
        }
    }

    fn params() -> FrameParams {
        FrameParams::new(400, 160, 512, WindowKind::Hann).unwrap()
    }

    fn track(w: &Waveform) -> PitchTrack {
        track_pitch(w, &params(), 50.0, 500.0, 0.5)
    }

    #[test]
    fn gpe_identical_tracks_is_zero() {
        let w = sine(200.0, 0.5, 0.5);
        let t = track(&w);
        let result = gpe(&t, &t, 0.2);
        assert_eq!(result.percent, 0.0);
        assert!(result.jointly_voiced > 0);
    }

    #[test]
    fn gpe_thirty_percent_deviation_is_gross() {
        let t_ref = track(&sine(200.0, 0.5, 0.5));
        let t_test = track(&sine(260.0, 0.5, 0.5));
        assert_eq!(gpe(&t_ref, &t_test, 0.2).percent, 100.0);
    }

    #[test]
    fn gpe_ten_percent_deviation_is_fine() {
        let t_ref = track(&sine(200.0, 0.5, 0.5));
        let t_test = track(&sine(220.0, 0.5, 0.5));
        assert_eq!(gpe(&t_ref, &t_test, 0.2).percent, 0.0);
    }

    #[test]
    fn gpe_reference_normalization_is_asymmetric() {
        // 200 vs 250: deviation 25% of the reference -> gross.
        // 250 vs 200: deviation exactly 20% of the reference -> not gross
        // (strict >). Exact tracks pin the boundary case.
        let exact = |f0: f64| PitchTrack {
            f0_hz: vec![f0; 10],
            voiced: vec![true; 10],
            params: params(),
        };
        let (t200, t250) = (exact(200.0), exact(250.0));
        assert_eq!(gpe(&t200, &t250, 0.2).percent, 100.0);
        assert_eq!(gpe(&t250, &t200, 0.2).percent, 0.0);
    }

    #[test]
    fn gpe_without_joint_voicing_is_vacuous() {
        let silence = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        let t_ref = track(&sine(200.0, 0.5, 0.5));
        let t_silent = track(&silence);
        let result = gpe(&t_ref, &t_silent, 0.2);
        assert_eq!(result.percent, 0.0);
        assert_eq!(result.jointly_voiced, 0);
    }

    fn noise(seed: u64, amplitude: f64, n: usize) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform {
            samples: (0..n).map(|_| rng.gen_range(-amplitude..amplitude)).collect(),
            sample_rate_hz: 16000,
        }
    }

    #[test]
    fn sd_of_identical_signals_is_zero() {
        let w = noise(60, 0.4, 8000);
        assert_eq!(spectral_distortion(&w, &w, &params()).unwrap(), 0.0);
    }

    #[test]
    fn sd_of_scaled_signals_is_the_log_gain() {
        let w = noise(61, 0.45, 16000);
        for scale in [0.5, 2.0] {
            let scaled = Waveform {
                samples: w.samples.iter().map(|s| s * scale).collect(),
                sample_rate_hz: 16000,
            };
            let sd = spectral_distortion(&w, &scaled, &params()).unwrap();
            let expected = (20.0 * f64::log10(scale)).abs();
            assert!((sd - expected).abs() < 0.05, "scale {scale}: sd {sd}");
        }
        // x10 exceeds the waveform range when applied to the base signal, so
        // scale the base down instead.
        let quiet = Waveform {
            samples: w.samples.iter().map(|s| s * 0.099).collect(),
            sample_rate_hz: 16000,
        };
        let loud = Waveform {
            samples: w.samples.iter().map(|s| s * 0.99).collect(),
            sample_rate_hz: 16000,
        };
        let sd = spectral_distortion(&quiet, &loud, &params()).unwrap();
        assert!((sd - 20.0).abs() < 0.05, "x10 sd {sd}");
    }

    #[test]
    fn sd_needs_at_least_one_frame() {
        let short = Waveform::new(vec![0.1; 100], 16000).unwrap();
        let long = noise(62, 0.3, 8000);
        assert!(spectral_distortion(&short, &long, &params()).is_err());
    }

    #[test]
    fn mos_label_parsing_and_midpoints() {
        assert_eq!(
            RatingLabel::parse("Very similar").unwrap(),
            RatingLabel::VerySimilar
        );
        assert_eq!(
            RatingLabel::parse("NOT AT ALL SIMILAR").unwrap(),
            RatingLabel::NotAtAllSimilar
        );
        assert!(RatingLabel::parse("kind of similar").is_err());
        assert_eq!(RatingLabel::VerySimilar.band_midpoint(), 4.5);
        assert_eq!(RatingLabel::NotAtAllSimilar.band_midpoint(), 1.5);
    }

    fn records(labels: &[RatingLabel]) -> Vec<RatingRecord> {
        labels
            .iter()
            .map(|&label| RatingRecord {
                label,
                locale: "IN".into(),
                source: "survey".into(),
            })
            .collect()
    }

    #[test]
    fn mos_of_eleven_very_similar_is_4_5() {
        let r = records(&[RatingLabel::VerySimilar; 11]);
        assert_eq!(aggregate_mos(&r).unwrap(), 4.5);
    }

    #[test]
    fn mos_mixed_fixture() {
        let r = records(&[
            RatingLabel::VerySimilar,
            RatingLabel::VerySimilar,
            RatingLabel::ModeratelySimilar,
        ]);
        let mos = aggregate_mos(&r).unwrap();
        assert!((mos - 4.1667).abs() < 1e-4, "mos {mos}");
    }

    #[test]
    fn mos_requires_records() {
        assert!(aggregate_mos(&[]).is_err());
    }

    #[test]
    fn mos_stays_inside_band_midpoint_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(63);
        let all = [
            RatingLabel::VerySimilar,
            RatingLabel::ModeratelySimilar,
            RatingLabel::SlightlySimilar,
            RatingLabel::NotAtAllSimilar,
        ];
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let labels: Vec<RatingLabel> =
                (0..n).map(|_| all[rng.gen_range(0..4)]).collect();
            let mos = aggregate_mos(&records(&labels)).unwrap();
            assert!((1.5..=4.5).contains(&mos));
        }
    }

    #[test]
    fn ratings_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.csv");
        std::fs::write(
            &path,
            "label,locale,source\nVery similar,IN,https://example.test/a\nModerately similar,GB,https://example.test/b\n",
        )
        .unwrap();
        let records = read_ratings_csv(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].label, RatingLabel::VerySimilar);
        assert_eq!(records[1].locale, "GB");
    }

    #[test]
    fn ratings_csv_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "rating,locale,source\nVery similar,IN,x\n").unwrap();
        assert!(read_ratings_csv(&path).is_err());
    }

    #[test]
    fn report_header_and_fixture_row() {
        let report = ScoreReport {
            rows: vec![ScoreRow {
                accent: "Western".into(),
                dataset: "VCTK".into(),
                speaker_id: "p230".into(),
                gender: "F".into(),
                mos: Some(4.64),
                gpe: Some(1.95),
                sd: Some(3.38),
                gpe_vacuous: false,
                error: None,
            }],
        };
        let csv = report.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_HEADER);
        assert_eq!(lines.next().unwrap(), "Western,VCTK,p230,F,4.64,1.95,3.38");
    }

    #[test]
    fn self_comparison_row_scores_zero() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("ref.wav");
        write_wav(&sine(200.0, 0.5, 0.5), &wav).unwrap();
        let report = score_report(
            &[ScoreRequest {
                accent: "Western".into(),
                dataset: "toy".into(),
                speaker_id: "s0".into(),
                gender: "F".into(),
                reference_wav: wav.clone(),
                test_wav: wav,
                ratings: None,
            }],
            &MetricParams::default(),
        );
        let row = &report.rows[0];
        assert_eq!(row.gpe, Some(0.0));
        assert_eq!(row.sd, Some(0.0));
        assert!(row.mos.is_none());
        assert!(row.error.is_none());
    }

    #[test]
    fn unreadable_row_becomes_error_entry() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("ok.wav");
        write_wav(&sine(200.0, 0.5, 0.3), &wav).unwrap();
        let report = score_report(
            &[
                ScoreRequest {
                    accent: "Western".into(),
                    dataset: "toy".into(),
                    speaker_id: "missing".into(),
                    gender: "M".into(),
                    reference_wav: dir.path().join("nope.wav"),
                    test_wav: wav.clone(),
                    ratings: None,
                },
                ScoreRequest {
                    accent: "Western".into(),
                    dataset: "toy".into(),
                    speaker_id: "ok".into(),
                    gender: "M".into(),
                    reference_wav: wav.clone(),
                    test_wav: wav,
                    ratings: None,
                },
            ],
            &MetricParams::default(),
        );
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows[0].error.is_some());
        assert!(report.rows[0].gpe.is_none());
        assert!(report.rows[1].error.is_none());
        let csv = report.to_csv_string();
        assert!(csv.lines().count() == 3);
        assert!(csv.contains("missing,M,,,"));
    }
}
