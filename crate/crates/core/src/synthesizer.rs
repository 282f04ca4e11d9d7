//! Speaker-conditioned text-to-mel synthesizer.
//!
//! Text is normalized to a fixed grapheme table, embedded, passed through a
//! two-layer pre-net and mean-pooled into a text summary. A single-layer
//! LSTM decoder predicts one mel frame per step from the previous frame,
//! the text summary and the speaker d-vector. The model works on
//! floor-normalized mel values (0 at the dB floor, 1 at 0 dB); the public
//! operations convert at the boundary so mel spectrograms stay in dB.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::{sigmoid, uniform_init, Dvector, LstmLayer};
use crate::error::{Error, Result};
use crate::mel::{MelSpectrogram, FLOOR_DB};

pub const DEFAULT_SYMBOL_DIM: usize = 64;
pub const DEFAULT_PRENET_DIM: usize = 32;
pub const DEFAULT_DECODER_HIDDEN: usize = 128;
pub const DEFAULT_MEL_CHANNELS: usize = 80;
pub const DEFAULT_MAX_FRAMES: usize = 400;

/// Fixed grapheme inventory: 0=PAD, 1=UNK, 2=space, 3..=28 letters,
/// 29 apostrophe, 30..=39 punctuation.
#[derive(Debug, Clone, Copy, Default)]
pub struct SymbolTable;

const PUNCTUATION: [char; 10] = ['.', ',', '?', '!', '-', ':', ';', '"', '(', ')'];

impl SymbolTable {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const SPACE: usize = 2;
    pub const SIZE: usize = 40;

    pub fn id_of(&self, c: char) -> usize {
        match c {
            ' ' => Self::SPACE,
            'a'..='z' => 3 + (c as usize - 'a' as usize),
            '\'' => 29,
            _ => PUNCTUATION
                .iter()
                .position(|&p| p == c)
                .map(|i| 30 + i)
                .unwrap_or(Self::UNK),
        }
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        match id {
            Self::SPACE => Some(' '),
            3..=28 => Some((b'a' + (id - 3) as u8) as char),
            29 => Some('\''),
            30..=39 => Some(PUNCTUATION[id - 30]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSequence {
    pub ids: Vec<usize>,
}

impl TextSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercases, collapses whitespace runs to single spaces, trims the ends
/// and maps anything outside the table to UNK.
pub fn encode_text(raw: &str, table: &SymbolTable) -> Result<TextSequence> {
    let mut ids = Vec::new();
    let mut pending_space = false;
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            pending_space = !ids.is_empty();
            continue;
        }
        if pending_space {
            ids.push(SymbolTable::SPACE);
            pending_space = false;
        }
        ids.push(table.id_of(c));
    }
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(TextSequence { ids })
}

/// Decoder parameters plus the mel normalization anchor they were trained
/// with.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    /// V × Ds
    pub symbol_embedding: Array2<f64>,
    /// Ds × P and 1 × P
    pub prenet_w1: Array2<f64>,
    pub prenet_b1: Array2<f64>,
    /// P × P and 1 × P
    pub prenet_w2: Array2<f64>,
    pub prenet_b2: Array2<f64>,
    /// Input layout [prev mel frame (K) ‖ text summary (P) ‖ d-vector (E)].
    pub decoder: LstmLayer,
    /// Hd × K and 1 × K
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub floor_db: f64,
}

impl SynthParams {
    pub fn init(
        mel_channels: usize,
        embedding_dim: usize,
        symbol_dim: usize,
        prenet_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input = mel_channels + prenet_dim + embedding_dim;
        SynthParams {
            symbol_embedding: uniform_init(SymbolTable::SIZE, symbol_dim, symbol_dim, rng),
            prenet_w1: uniform_init(symbol_dim, prenet_dim, symbol_dim, rng),
            prenet_b1: Array2::zeros((1, prenet_dim)),
            prenet_w2: uniform_init(prenet_dim, prenet_dim, prenet_dim, rng),
            prenet_b2: Array2::zeros((1, prenet_dim)),
            decoder: LstmLayer {
                w_ih: uniform_init(input, 4 * hidden, input, rng),
                w_hh: uniform_init(hidden, 4 * hidden, hidden, rng),
                bias: Array2::zeros((1, 4 * hidden)),
            },
            out_w: uniform_init(hidden, mel_channels, hidden, rng),
            out_b: Array2::zeros((1, mel_channels)),
            floor_db: FLOOR_DB,
        }
    }

    pub fn zeros(
        mel_channels: usize,
        embedding_dim: usize,
        symbol_dim: usize,
        prenet_dim: usize,
        hidden: usize,
    ) -> Self {
        let input = mel_channels + prenet_dim + embedding_dim;
        SynthParams {
            symbol_embedding: Array2::zeros((SymbolTable::SIZE, symbol_dim)),
            prenet_w1: Array2::zeros((symbol_dim, prenet_dim)),
            prenet_b1: Array2::zeros((1, prenet_dim)),
            prenet_w2: Array2::zeros((prenet_dim, prenet_dim)),
            prenet_b2: Array2::zeros((1, prenet_dim)),
            decoder: LstmLayer {
                w_ih: Array2::zeros((input, 4 * hidden)),
                w_hh: Array2::zeros((hidden, 4 * hidden)),
                bias: Array2::zeros((1, 4 * hidden)),
            },
            out_w: Array2::zeros((hidden, mel_channels)),
            out_b: Array2::zeros((1, mel_channels)),
            floor_db: FLOOR_DB,
        }
    }

    pub fn mel_channels(&self) -> usize {
        self.out_w.ncols()
    }

    pub fn prenet_dim(&self) -> usize {
        self.prenet_w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.decoder.hidden_size()
    }

    pub fn embedding_dim(&self) -> usize {
        self.decoder.input_size() - self.mel_channels() - self.prenet_dim()
    }

    fn check_inputs(&self, text: &TextSequence, speaker: &Dvector) -> Result<()> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        if speaker.dim() != self.embedding_dim() {
            return Err(Error::WidthMismatch {
                expected: self.embedding_dim(),
                found: speaker.dim(),
            });
        }
        if text.ids.iter().any(|&id| id >= SymbolTable::SIZE) {
            return Err(Error::ShapeMismatch {
                context: "text sequence",
                expected: format!("ids < {}", SymbolTable::SIZE),
                found: "out-of-table id".into(),
            });
        }
        Ok(())
    }

    /// Mean-pooled pre-net output over the symbol sequence.
    fn text_summary(&self, text: &TextSequence) -> Array1<f64> {
        let mut pooled = Array1::zeros(self.prenet_dim());
        for &id in &text.ids {
            let e = self.symbol_embedding.row(id);
            let h1 = (e.dot(&self.prenet_w1) + &self.prenet_b1.row(0)).mapv(|v| v.max(0.0));
            let h2 = (h1.dot(&self.prenet_w2) + &self.prenet_b2.row(0)).mapv(|v| v.max(0.0));
            pooled += &h2;
        }
        pooled / text.ids.len() as f64
    }

    /// One decoder step in the normalized mel domain.
    fn decode_step(
        &self,
        prev_frame: &Array1<f64>,
        summary: &Array1<f64>,
        speaker: &Dvector,
        h: &mut Array1<f64>,
        c: &mut Array1<f64>,
    ) -> Array1<f64> {
        let hd = self.hidden();
        let mut x = Array1::zeros(self.decoder.input_size());
        let k = self.mel_channels();
        let p = self.prenet_dim();
        x.slice_mut(s![0..k]).assign(prev_frame);
        x.slice_mut(s![k..k + p]).assign(summary);
        x.slice_mut(s![k + p..]).assign(speaker.values());
        let gates = x.dot(&self.decoder.w_ih) + h.dot(&self.decoder.w_hh) + &self.decoder.bias.row(0);
        let i_g = gates.slice(s![0..hd]).mapv(sigmoid);
        let f_g = gates.slice(s![hd..2 * hd]).mapv(sigmoid);
        let g_g = gates.slice(s![2 * hd..3 * hd]).mapv(f64::tanh);
        let o_g = gates.slice(s![3 * hd..4 * hd]).mapv(sigmoid);
        *c = &f_g * &*c + &i_g * &g_g;
        *h = &o_g * &c.mapv(f64::tanh);
        h.dot(&self.out_w) + &self.out_b.row(0)
    }
}

/// Teacher-forced decode: frame 0 is predicted from the zero go-frame,
/// frame t from target frame t-1. The prediction has the target's shape.
pub fn decode_mel_teacher_forced(
    params: &SynthParams,
    text: &TextSequence,
    target: &MelSpectrogram,
    speaker: &Dvector,
) -> Result<MelSpectrogram> {
    params.check_inputs(text, speaker)?;
    if target.n_frames() == 0 {
        return Err(Error::EmptyInput("teacher-forcing target"));
    }
    if target.channels != params.mel_channels() {
        return Err(Error::ShapeMismatch {
            context: "teacher-forcing target",
            expected: format!("{} mel channels", params.mel_channels()),
            found: target.channels.to_string(),
        });
    }
    let normalized = target.normalized(params.floor_db);
    let summary = params.text_summary(text);
    let frames = run_teacher_forced(params, &normalized, &summary, speaker);
    Ok(MelSpectrogram::from_normalized(
        frames,
        params.floor_db,
        target.params,
    ))
}

fn run_teacher_forced(
    params: &SynthParams,
    target_norm: &Array2<f64>,
    summary: &Array1<f64>,
    speaker: &Dvector,
) -> Array2<f64> {
    let t_frames = target_norm.nrows();
    let k = params.mel_channels();
    let mut h = Array1::zeros(params.hidden());
    let mut c = Array1::zeros(params.hidden());
    let mut out = Array2::zeros((t_frames, k));
    let mut prev = Array1::zeros(k);
    for t in 0..t_frames {
        if t > 0 {
            prev.assign(&target_norm.row(t - 1));
        }
        let frame = params.decode_step(&prev, summary, speaker, &mut h, &mut c);
        out.row_mut(t).assign(&frame);
    }
    out
}

/// Mean squared difference over all entries of two equal-shape mels.
pub fn synth_loss(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    if pred.frames.dim() != target.frames.dim() {
        return Err(Error::ShapeMismatch {
            context: "synth loss",
            expected: format!("{:?}", target.frames.dim()),
            found: format!("{:?}", pred.frames.dim()),
        });
    }
    let diff = &pred.frames - &target.frames;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

/// Free-running decode: each predicted frame is fed back as the next input;
/// stops after exactly `max_frames` frames.
pub fn infer_mel(
    params: &SynthParams,
    text: &TextSequence,
    speaker: &Dvector,
    max_frames: usize,
    frame_params: crate::stft::FrameParams,
) -> Result<MelSpectrogram> {
    params.check_inputs(text, speaker)?;
    if max_frames == 0 {
        return Err(Error::EmptyInput("max_frames"));
    }
    let k = params.mel_channels();
    let summary = params.text_summary(text);
    let mut h = Array1::zeros(params.hidden());
    let mut c = Array1::zeros(params.hidden());
    let mut prev = Array1::zeros(k);
    let mut out = Array2::zeros((max_frames, k));
    for t in 0..max_frames {
        let frame = params.decode_step(&prev, &summary, speaker, &mut h, &mut c);
        out.row_mut(t).assign(&frame);
        prev = frame;
    }
    Ok(MelSpectrogram::from_normalized(
        out,
        params.floor_db,
        frame_params,
    ))
}

/// One training example: encoded text, target mel (dB) and the frozen
/// encoder's d-vector for the target audio.
#[derive(Debug, Clone)]
pub struct MelTargetPair {
    pub text: TextSequence,
    pub mel: MelSpectrogram,
    pub speaker: Dvector,
}

#[derive(Debug, Clone)]
pub struct SynthTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub symbol_dim: usize,
    pub prenet_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Stop once the step loss drops below this value, when set.
    pub early_stop_loss: Option<f64>,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        SynthTrainConfig {
            steps: 2000,
            learning_rate: 0.05,
            grad_clip: 3.0,
            symbol_dim: DEFAULT_SYMBOL_DIM,
            prenet_dim: DEFAULT_PRENET_DIM,
            hidden: DEFAULT_DECODER_HIDDEN,
            seed: 42,
            early_stop_loss: None,
        }
    }
}

/// One loss-log row: `step,loss` (teacher-forced MSE on normalized mels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// SGD over teacher-forced steps on the given pairs, one pair per step in
/// seeded random order. Losses are measured in the normalized mel domain.
/// The speaker d-vectors come from a frozen encoder that this trainer never
/// touches.
pub fn train_synthesizer(
    pairs: &[MelTargetPair],
    config: &SynthTrainConfig,
) -> Result<(SynthParams, Vec<SynthTrainRecord>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("synthesizer training pairs"));
    }
    for pair in pairs {
        if pair.mel.n_frames() == 0 {
            return Err(Error::EmptyInput("training pair mel"));
        }
        if pair.text.is_empty() {
            return Err(Error::EmptyText);
        }
    }
    let mel_channels = pairs[0].mel.channels;
    let embedding_dim = pairs[0].speaker.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = SynthParams::init(
        mel_channels,
        embedding_dim,
        config.symbol_dim,
        config.prenet_dim,
        config.hidden,
        &mut rng,
    );

    let normalized: Vec<Array2<f64>> = pairs
        .iter()
        .map(|p| p.mel.normalized(params.floor_db))
        .collect();

    let mut log = Vec::new();
    for step in 0..config.steps {
        let idx = rng.gen_range(0..pairs.len());
        let pair = &pairs[idx];
        let (loss, grads) = synth_step_gradients(&params, pair, &normalized[idx])?;
        log.push(SynthTrainRecord { step, loss });
        apply_sgd(&mut params, &grads, config.learning_rate, config.grad_clip);
        if config.early_stop_loss.is_some_and(|stop| loss < stop) {
            break;
        }
    }
    Ok((params, log))
}

struct TapedSynth {
    embedding: NodeId,
    prenet_w1: NodeId,
    prenet_b1: NodeId,
    prenet_w2: NodeId,
    prenet_b2: NodeId,
    dec_w_ih: NodeId,
    dec_w_hh: NodeId,
    dec_bias: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

fn tape_synth(tape: &mut Tape, params: &SynthParams) -> TapedSynth {
    TapedSynth {
        embedding: tape.leaf(params.symbol_embedding.clone()),
        prenet_w1: tape.leaf(params.prenet_w1.clone()),
        prenet_b1: tape.leaf(params.prenet_b1.clone()),
        prenet_w2: tape.leaf(params.prenet_w2.clone()),
        prenet_b2: tape.leaf(params.prenet_b2.clone()),
        dec_w_ih: tape.leaf(params.decoder.w_ih.clone()),
        dec_w_hh: tape.leaf(params.decoder.w_hh.clone()),
        dec_bias: tape.leaf(params.decoder.bias.clone()),
        out_w: tape.leaf(params.out_w.clone()),
        out_b: tape.leaf(params.out_b.clone()),
    }
}

/// Records the teacher-forced pass and MSE loss on the tape; returns the
/// loss node. Mirrors the plain-path decode exactly.
fn tape_synth_loss(
    tape: &mut Tape,
    ts: &TapedSynth,
    params: &SynthParams,
    text: &TextSequence,
    target_norm: &Array2<f64>,
    speaker: &Dvector,
) -> NodeId {
    let k = params.mel_channels();
    let p = params.prenet_dim();
    let hd = params.hidden();
    let t_frames = target_norm.nrows();

    let symbols = tape.rows(ts.embedding, text.ids.clone());
    let pre1 = tape.affine(symbols, ts.prenet_w1, ts.prenet_b1);
    let pre1 = tape.relu(pre1);
    let pre2 = tape.affine(pre1, ts.prenet_w2, ts.prenet_b2);
    let pre2 = tape.relu(pre2);
    let summary = tape.mean_axis0(pre2);

    // Teacher inputs are constants, so their projection through the input
    // weights is one matmul; the summary/speaker parts are step-invariant.
    let mut prev_frames = Array2::zeros((t_frames, k));
    for t in 1..t_frames {
        prev_frames.row_mut(t).assign(&target_norm.row(t - 1));
    }
    let prev_frames = tape.leaf(prev_frames);
    let speaker_row = tape.leaf(
        speaker
            .values()
            .clone()
            .insert_axis(ndarray::Axis(0)),
    );

    let w_prev = tape.slice_rows(ts.dec_w_ih, 0, k);
    let w_summary = tape.slice_rows(ts.dec_w_ih, k, p);
    let w_speaker = tape.slice_rows(ts.dec_w_ih, k + p, speaker.dim());
    let prev_proj = tape.matmul(prev_frames, w_prev);
    let summary_proj = tape.matmul(summary, w_summary);
    let speaker_proj = tape.matmul(speaker_row, w_speaker);
    let static_pre = tape.add(summary_proj, speaker_proj);
    let static_pre = tape.add(static_pre, ts.dec_bias);

    let mut h = tape.leaf(Array2::zeros((1, hd)));
    let mut c = tape.leaf(Array2::zeros((1, hd)));
    let mut h_steps = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let x_proj = tape.slice_rows(prev_proj, t, 1);
        let h_proj = tape.matmul(h, ts.dec_w_hh);
        let dynamic = tape.add(x_proj, h_proj);
        let gates = tape.add(dynamic, static_pre);
        let i_pre = tape.slice_cols(gates, 0, hd);
        let f_pre = tape.slice_cols(gates, hd, 2 * hd);
        let g_pre = tape.slice_cols(gates, 2 * hd, 3 * hd);
        let o_pre = tape.slice_cols(gates, 3 * hd, 4 * hd);
        let i_g = tape.sigmoid(i_pre);
        let f_g = tape.sigmoid(f_pre);
        let g_g = tape.tanh(g_pre);
        let o_g = tape.sigmoid(o_pre);
        let fc = tape.mul(f_g, c);
        let ig = tape.mul(i_g, g_g);
        c = tape.add(fc, ig);
        let c_tanh = tape.tanh(c);
        h = tape.mul(o_g, c_tanh);
        h_steps.push(h);
    }
    let hidden_all = tape.stack_rows(&h_steps);
    let pred = tape.affine(hidden_all, ts.out_w, ts.out_b);

    let target_node = tape.leaf(target_norm.clone());
    let diff = tape.sub(pred, target_node);
    let sq = tape.mul(diff, diff);
    let total = tape.sum_all(sq);
    tape.scale(total, 1.0 / (t_frames * k) as f64)
}

/// Gradients shaped like the parameters.
struct SynthGradients {
    params: SynthParams,
}

fn synth_step_gradients(
    params: &SynthParams,
    pair: &MelTargetPair,
    target_norm: &Array2<f64>,
) -> Result<(f64, SynthGradients)> {
    params.check_inputs(&pair.text, &pair.speaker)?;
    let mut tape = Tape::new();
    let ts = tape_synth(&mut tape, params);
    let loss = tape_synth_loss(&mut tape, &ts, params, &pair.text, target_norm, &pair.speaker);
    let loss_value = tape.scalar(loss);
    let grads = tape.backward(loss);
    let g = SynthParams {
        symbol_embedding: grads.get(ts.embedding, &tape),
        prenet_w1: grads.get(ts.prenet_w1, &tape),
        prenet_b1: grads.get(ts.prenet_b1, &tape),
        prenet_w2: grads.get(ts.prenet_w2, &tape),
        prenet_b2: grads.get(ts.prenet_b2, &tape),
        decoder: LstmLayer {
            w_ih: grads.get(ts.dec_w_ih, &tape),
            w_hh: grads.get(ts.dec_w_hh, &tape),
            bias: grads.get(ts.dec_bias, &tape),
        },
        out_w: grads.get(ts.out_w, &tape),
        out_b: grads.get(ts.out_b, &tape),
        floor_db: params.floor_db,
    };
    Ok((loss_value, SynthGradients { params: g }))
}

fn apply_sgd(params: &mut SynthParams, grads: &SynthGradients, lr: f64, clip: f64) {
    let g = &grads.params;
    let sq_norm: f64 = [
        &g.symbol_embedding,
        &g.prenet_w1,
        &g.prenet_b1,
        &g.prenet_w2,
        &g.prenet_b2,
        &g.decoder.w_ih,
        &g.decoder.w_hh,
        &g.decoder.bias,
        &g.out_w,
        &g.out_b,
    ]
    .iter()
    .map(|m| m.iter().map(|v| v * v).sum::<f64>())
    .sum();
    let norm = sq_norm.sqrt();
    let step = if norm > clip { lr * clip / norm } else { lr };

    params.symbol_embedding.scaled_add(-step, &g.symbol_embedding);
    params.prenet_w1.scaled_add(-step, &g.prenet_w1);
    params.prenet_b1.scaled_add(-step, &g.prenet_b1);
    params.prenet_w2.scaled_add(-step, &g.prenet_w2);
    params.prenet_b2.scaled_add(-step, &g.prenet_b2);
    params.decoder.w_ih.scaled_add(-step, &g.decoder.w_ih);
    params.decoder.w_hh.scaled_add(-step, &g.decoder.w_hh);
    params.decoder.bias.scaled_add(-step, &g.decoder.bias);
    params.out_w.scaled_add(-step, &g.out_w);
    params.out_b.scaled_add(-step, &g.out_b);
}
