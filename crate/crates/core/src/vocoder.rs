//! Autoregressive mel-to-waveform vocoder.
//!
//! Mel frames are projected to a compact conditioning vector and upsampled
//! to one row per output sample; a single GRU consumes the previous sample
//! concatenated with that row and a tanh head emits the next sample.
//! Training is teacher forced with an MSE loss over waveform samples.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::autodiff::{NodeId, Tape};
use crate::encoder::{sigmoid, uniform_init};
use crate::error::{Error, Result};
use crate::mel::MelSpectrogram;

pub const DEFAULT_COND_DIM: usize = 32;
pub const DEFAULT_VOCODER_HIDDEN: usize = 128;

/// GRU gate order along the 3H axis is [reset, update, candidate].
#[derive(Debug, Clone, PartialEq)]
pub struct VocoderParams {
    /// K × C mel-frame projection.
    pub cond_w: Array2<f64>,
    /// 1 × C
    pub cond_b: Array2<f64>,
    /// (1 + C) × 3H; row 0 is the previous-sample input.
    pub gru_w_ih: Array2<f64>,
    /// H × 3H
    pub gru_w_hh: Array2<f64>,
    /// 1 × 3H input bias
    pub gru_b_ih: Array2<f64>,
    /// 1 × 3H hidden bias (the candidate part sits inside the reset gate)
    pub gru_b_hh: Array2<f64>,
    /// H × 1 output head
    pub out_w: Array2<f64>,
    /// 1 × 1
    pub out_b: Array2<f64>,
    pub floor_db: f64,
}

impl VocoderParams {
    pub fn init(mel_channels: usize, cond_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let input = 1 + cond_dim;
        VocoderParams {
            cond_w: uniform_init(mel_channels, cond_dim, mel_channels, rng),
            cond_b: Array2::zeros((1, cond_dim)),
            gru_w_ih: uniform_init(input, 3 * hidden, input, rng),
            gru_w_hh: uniform_init(hidden, 3 * hidden, hidden, rng),
            gru_b_ih: Array2::zeros((1, 3 * hidden)),
            gru_b_hh: Array2::zeros((1, 3 * hidden)),
            out_w: uniform_init(hidden, 1, hidden, rng),
            out_b: Array2::zeros((1, 1)),
            floor_db: crate::mel::FLOOR_DB,
        }
    }

    pub fn zeros(mel_channels: usize, cond_dim: usize, hidden: usize) -> Self {
        let input = 1 + cond_dim;
        VocoderParams {
            cond_w: Array2::zeros((mel_channels, cond_dim)),
            cond_b: Array2::zeros((1, cond_dim)),
            gru_w_ih: Array2::zeros((input, 3 * hidden)),
            gru_w_hh: Array2::zeros((hidden, 3 * hidden)),
            gru_b_ih: Array2::zeros((1, 3 * hidden)),
            gru_b_hh: Array2::zeros((1, 3 * hidden)),
            out_w: Array2::zeros((hidden, 1)),
            out_b: Array2::zeros((1, 1)),
            floor_db: crate::mel::FLOOR_DB,
        }
    }

    pub fn mel_channels(&self) -> usize {
        self.cond_w.nrows()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.gru_w_hh.nrows()
    }

    /// Projection of normalized mel frames, (T × C).
    fn project_frames(&self, mel: &MelSpectrogram) -> Array2<f64> {
        mel.normalized(self.floor_db).dot(&self.cond_w) + &self.cond_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Hold each frame's projection for `hop` samples.
    Repeat,
    /// Interpolate between consecutive projections, anchored at each
    /// frame's first sample.
    Linear,
}

/// Per-sample conditioning rows, `hop × n_frames` of them.
#[derive(Debug, Clone)]
pub struct ConditioningTrack {
    pub rows: Array2<f64>,
    pub hop: usize,
}

impl ConditioningTrack {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Projects each mel frame to the conditioning space and expands it to
/// `hop` samples per frame.
pub fn upsample_conditioning(
    mel: &MelSpectrogram,
    params: &VocoderParams,
    hop: usize,
    mode: UpsampleMode,
) -> Result<ConditioningTrack> {
    if mel.n_frames() == 0 {
        return Err(Error::EmptyInput("mel for conditioning"));
    }
    if mel.channels != params.mel_channels() {
        return Err(Error::ShapeMismatch {
            context: "conditioning mel",
            expected: format!("{} channels", params.mel_channels()),
            found: mel.channels.to_string(),
        });
    }
    let projected = params.project_frames(mel);
    let rows = expansion_matrix(mel.n_frames(), hop, mode).dot(&projected);
    Ok(ConditioningTrack { rows, hop })
}

/// Sparse linear map from frame projections to per-sample rows; keeping the
/// expansion linear lets training backpropagate through one matmul.
fn expansion_matrix(n_frames: usize, hop: usize, mode: UpsampleMode) -> Array2<f64> {
    let mut m = Array2::zeros((n_frames * hop, n_frames));
    for sample in 0..n_frames * hop {
        let frame = sample / hop;
        match mode {
            UpsampleMode::Repeat => m[[sample, frame]] = 1.0,
            UpsampleMode::Linear => {
                let alpha = (sample % hop) as f64 / hop as f64;
                let next = (frame + 1).min(n_frames - 1);
                m[[sample, frame]] += 1.0 - alpha;
                m[[sample, next]] += alpha;
            }
        }
    }
    m
}

/// One autoregressive step: returns the next-sample prediction in (-1, 1)
/// and updates the hidden state in place.
pub fn wavernn_step(
    params: &VocoderParams,
    prev_sample: f64,
    cond: ndarray::ArrayView1<f64>,
    hidden: &mut Array1<f64>,
) -> f64 {
    let h_dim = params.hidden();
    let mut x = Array1::zeros(1 + params.cond_dim());
    x[0] = prev_sample;
    x.slice_mut(s![1..]).assign(&cond);
    let x_part = x.dot(&params.gru_w_ih) + &params.gru_b_ih.row(0);
    let h_part = hidden.dot(&params.gru_w_hh) + &params.gru_b_hh.row(0);

    let r = (&x_part.slice(s![0..h_dim]) + &h_part.slice(s![0..h_dim])).mapv(sigmoid);
    let z = (&x_part.slice(s![h_dim..2 * h_dim]) + &h_part.slice(s![h_dim..2 * h_dim]))
        .mapv(sigmoid);
    let n = (&x_part.slice(s![2 * h_dim..3 * h_dim])
        + &(&r * &h_part.slice(s![2 * h_dim..3 * h_dim])))
        .mapv(f64::tanh);
    *hidden = &n - &(&z * &n) + &(&z * &*hidden);
    (hidden.dot(&params.out_w.column(0)) + params.out_b[[0, 0]]).tanh()
}

/// Mean squared sample difference.
pub fn vocoder_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            context: "vocoder loss",
            expected: format!("{} samples", target.len()),
            found: pred.len().to_string(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("vocoder loss"));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Teacher-forced predictions over a whole clip: ground-truth sample t-1 is
/// the input at step t (`seed_sample` at t = 0).
pub fn teacher_forced_predictions(
    params: &VocoderParams,
    cond: &ConditioningTrack,
    target: &[f64],
    seed_sample: f64,
) -> Result<Vec<f64>> {
    if cond.len() != target.len() {
        return Err(Error::ShapeMismatch {
            context: "teacher forcing",
            expected: format!("{} conditioned samples", cond.len()),
            found: target.len().to_string(),
        });
    }
    let mut hidden = Array1::zeros(params.hidden());
    let mut preds = Vec::with_capacity(target.len());
    for t in 0..target.len() {
        let prev = if t == 0 { seed_sample } else { target[t - 1] };
        preds.push(wavernn_step(params, prev, cond.rows.row(t), &mut hidden));
    }
    Ok(preds)
}

/// Free-running generation: each prediction becomes the next input. Output
/// length equals the conditioning length; samples stay strictly inside
/// (-1, 1).
pub fn generate(
    params: &VocoderParams,
    cond: &ConditioningTrack,
    seed_sample: f64,
    sample_rate_hz: u32,
) -> Result<Waveform> {
    if cond.is_empty() {
        return Err(Error::EmptyInput("conditioning track"));
    }
    let mut hidden = Array1::zeros(params.hidden());
    let mut samples = Vec::with_capacity(cond.len());
    let mut prev = seed_sample;
    for t in 0..cond.len() {
        prev = wavernn_step(params, prev, cond.rows.row(t), &mut hidden);
        samples.push(prev);
    }
    Ok(Waveform {
        samples,
        sample_rate_hz,
    })
}

#[derive(Debug, Clone)]
pub struct VocoderTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub cond_dim: usize,
    pub hidden: usize,
    /// Samples per teacher-forced training segment.
    pub segment_len: usize,
    pub upsample_mode: UpsampleMode,
    pub seed: u64,
    /// Evaluate full-clip teacher-forced MSE every this many steps and stop
    /// early when it drops below `early_stop_mse`.
    pub eval_interval: usize,
    pub early_stop_mse: Option<f64>,
}

impl Default for VocoderTrainConfig {
    fn default() -> Self {
        VocoderTrainConfig {
            steps: 3000,
            learning_rate: 0.05,
            grad_clip: 3.0,
            cond_dim: DEFAULT_COND_DIM,
            hidden: DEFAULT_VOCODER_HIDDEN,
            segment_len: 320,
            upsample_mode: UpsampleMode::Repeat,
            seed: 42,
            eval_interval: 100,
            early_stop_mse: Some(5e-4),
        }
    }
}

/// One loss-log row: `step,loss` (teacher-forced MSE on the step segment).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VocoderTrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// A (mel, waveform) training pair with the waveform trimmed to
/// `hop × n_frames` samples.
#[derive(Debug, Clone)]
pub struct VocoderPair {
    pub mel: MelSpectrogram,
    pub audio: Waveform,
}

impl VocoderPair {
    /// Trims the waveform to the conditioned length. Errors when the audio
    /// is shorter than the mel coverage.
    pub fn new(mel: MelSpectrogram, audio: Waveform, hop: usize) -> Result<Self> {
        let want = mel.n_frames() * hop;
        if audio.len() < want {
            return Err(Error::ShapeMismatch {
                context: "vocoder pair",
                expected: format!("at least {want} samples"),
                found: audio.len().to_string(),
            });
        }
        let trimmed = Waveform {
            samples: audio.samples[..want].to_vec(),
            sample_rate_hz: audio.sample_rate_hz,
        };
        Ok(VocoderPair {
            mel,
            audio: trimmed,
        })
    }
}

/// SGD on teacher-forced segments sampled from the pairs. Deterministic for
/// a fixed seed; emits a `step,loss` log.
pub fn train_vocoder(
    pairs: &[VocoderPair],
    hop: usize,
    config: &VocoderTrainConfig,
) -> Result<(VocoderParams, Vec<VocoderTrainRecord>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("vocoder training pairs"));
    }
    let mel_channels = pairs[0].mel.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = VocoderParams::init(mel_channels, config.cond_dim, config.hidden, &mut rng);

    let normalized: Vec<Array2<f64>> = pairs
        .iter()
        .map(|p| p.mel.normalized(params.floor_db))
        .collect();

    let mut log = Vec::new();
    for step in 0..config.steps {
        let pair_idx = rng.gen_range(0..pairs.len());
        let pair = &pairs[pair_idx];
        let total = pair.audio.len();
        let seg_len = config.segment_len.min(total);
        let start = if total > seg_len {
            rng.gen_range(0..total - seg_len)
        } else {
            0
        };
        let (loss, grads) = segment_gradients(
            &params,
            &normalized[pair_idx],
            &pair.audio.samples,
            hop,
            start,
            seg_len,
            config.upsample_mode,
        );
        log.push(VocoderTrainRecord { step, loss });
        apply_sgd(&mut params, &grads, config.learning_rate, config.grad_clip);

        if let Some(stop) = config.early_stop_mse {
            if (step + 1) % config.eval_interval == 0 {
                let mse = mean_clip_mse(&params, pairs, hop, config.upsample_mode)?;
                if mse < stop {
                    break;
                }
            }
        }
    }
    Ok((params, log))
}

/// Mean teacher-forced MSE over whole clips.
pub fn mean_clip_mse(
    params: &VocoderParams,
    pairs: &[VocoderPair],
    hop: usize,
    mode: UpsampleMode,
) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        let cond = upsample_conditioning(&pair.mel, params, hop, mode)?;
        let preds = teacher_forced_predictions(params, &cond, &pair.audio.samples, 0.0)?;
        total += vocoder_loss(&preds, &pair.audio.samples)?;
    }
    Ok(total / pairs.len() as f64)
}

struct TapedVocoder {
    cond_w: NodeId,
    cond_b: NodeId,
    gru_w_ih: NodeId,
    gru_w_hh: NodeId,
    gru_b_ih: NodeId,
    gru_b_hh: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

fn tape_vocoder(tape: &mut Tape, params: &VocoderParams) -> TapedVocoder {
    TapedVocoder {
        cond_w: tape.leaf(params.cond_w.clone()),
        cond_b: tape.leaf(params.cond_b.clone()),
        gru_w_ih: tape.leaf(params.gru_w_ih.clone()),
        gru_w_hh: tape.leaf(params.gru_w_hh.clone()),
        gru_b_ih: tape.leaf(params.gru_b_ih.clone()),
        gru_b_hh: tape.leaf(params.gru_b_hh.clone()),
        out_w: tape.leaf(params.out_w.clone()),
        out_b: tape.leaf(params.out_b.clone()),
    }
}

/// Teacher-forced MSE over one segment, recorded on a tape. The hidden
/// state starts at zero at the segment boundary (truncated backpropagation).
fn tape_segment_loss(
    tape: &mut Tape,
    tv: &TapedVocoder,
    params: &VocoderParams,
    mel_norm: &Array2<f64>,
    target: &[f64],
    hop: usize,
    start: usize,
    len: usize,
    mode: UpsampleMode,
) -> NodeId {
    let h_dim = params.hidden();
    let mel_node = tape.leaf(mel_norm.clone());
    let projected = tape.affine(mel_node, tv.cond_w, tv.cond_b);

    // Upsample rows for the segment only.
    let full = expansion_matrix(mel_norm.nrows(), hop, mode);
    let segment_expansion = full.slice(s![start..start + len, ..]).to_owned();
    let expansion = tape.leaf(segment_expansion);
    let cond_rows = tape.matmul(expansion, projected);

    let mut prev = Array2::zeros((len, 1));
    for t in 0..len {
        let global = start + t;
        prev[[t, 0]] = if global == 0 { 0.0 } else { target[global - 1] };
    }
    let prev = tape.leaf(prev);

    let w_prev = tape.slice_rows(tv.gru_w_ih, 0, 1);
    let w_cond = tape.slice_rows(tv.gru_w_ih, 1, params.cond_dim());
    let prev_proj = tape.matmul(prev, w_prev);
    let cond_proj = tape.matmul(cond_rows, w_cond);
    let x_sum = tape.add(prev_proj, cond_proj);
    let x_all = tape.add_row(x_sum, tv.gru_b_ih);

    let mut h = tape.leaf(Array2::zeros((1, h_dim)));
    let mut h_steps = Vec::with_capacity(len);
    for t in 0..len {
        let x_part = tape.slice_rows(x_all, t, 1);
        let h_lin = tape.matmul(h, tv.gru_w_hh);
        let h_part = tape.add_row(h_lin, tv.gru_b_hh);
        let xr = tape.slice_cols(x_part, 0, h_dim);
        let xz = tape.slice_cols(x_part, h_dim, 2 * h_dim);
        let xn = tape.slice_cols(x_part, 2 * h_dim, 3 * h_dim);
        let hr = tape.slice_cols(h_part, 0, h_dim);
        let hz = tape.slice_cols(h_part, h_dim, 2 * h_dim);
        let hn = tape.slice_cols(h_part, 2 * h_dim, 3 * h_dim);
        let r_pre = tape.add(xr, hr);
        let z_pre = tape.add(xz, hz);
        let r = tape.sigmoid(r_pre);
        let z = tape.sigmoid(z_pre);
        let gated = tape.mul(r, hn);
        let n_pre = tape.add(xn, gated);
        let n = tape.tanh(n_pre);
        let zn = tape.mul(z, n);
        let zh = tape.mul(z, h);
        let n_minus_zn = tape.sub(n, zn);
        h = tape.add(n_minus_zn, zh);
        h_steps.push(h);
    }
    let hidden_all = tape.stack_rows(&h_steps);
    let out_lin = tape.affine(hidden_all, tv.out_w, tv.out_b);
    let pred = tape.tanh(out_lin);

    let target_node = tape.leaf(Array2::from_shape_fn((len, 1), |(t, _)| target[start + t]));
    let diff = tape.sub(pred, target_node);
    let sq = tape.mul(diff, diff);
    let total = tape.sum_all(sq);
    tape.scale(total, 1.0 / len as f64)
}

fn segment_gradients(
    params: &VocoderParams,
    mel_norm: &Array2<f64>,
    target: &[f64],
    hop: usize,
    start: usize,
    len: usize,
    mode: UpsampleMode,
) -> (f64, VocoderParams) {
    let mut tape = Tape::new();
    let tv = tape_vocoder(&mut tape, params);
    let loss = tape_segment_loss(&mut tape, &tv, params, mel_norm, target, hop, start, len, mode);
    let loss_value = tape.scalar(loss);
    let grads = tape.backward(loss);
    let g = VocoderParams {
        cond_w: grads.get(tv.cond_w, &tape),
        cond_b: grads.get(tv.cond_b, &tape),
        gru_w_ih: grads.get(tv.gru_w_ih, &tape),
        gru_w_hh: grads.get(tv.gru_w_hh, &tape),
        gru_b_ih: grads.get(tv.gru_b_ih, &tape),
        gru_b_hh: grads.get(tv.gru_b_hh, &tape),
        out_w: grads.get(tv.out_w, &tape),
        out_b: grads.get(tv.out_b, &tape),
        floor_db: params.floor_db,
    };
    (loss_value, g)
}

fn apply_sgd(params: &mut VocoderParams, grads: &VocoderParams, lr: f64, clip: f64) {
    let sq_norm: f64 = [
        &grads.cond_w,
        &grads.cond_b,
        &grads.gru_w_ih,
        &grads.gru_w_hh,
        &grads.gru_b_ih,
        &grads.gru_b_hh,
        &grads.out_w,
        &grads.out_b,
    ]
    .iter()
    .map(|m| m.iter().map(|v| v * v).sum::<f64>())
    .sum();
    let norm = sq_norm.sqrt();
    let step = if norm > clip { lr * clip / norm } else { lr };

    params.cond_w.scaled_add(-step, &grads.cond_w);
    params.cond_b.scaled_add(-step, &grads.cond_b);
    params.gru_w_ih.scaled_add(-step, &grads.gru_w_ih);
    params.gru_w_hh.scaled_add(-step, &grads.gru_w_hh);
    params.gru_b_ih.scaled_add(-step, &grads.gru_b_ih);
    params.gru_b_hh.scaled_add(-step, &grads.gru_b_hh);
    params.out_w.scaled_add(-step, &grads.out_w);
    params.out_b.scaled_add(-step, &grads.out_b);
}
