//! Generalized end-to-end loss for speaker verification and the encoder
//! training loop built on it.
//!
//! A batch holds N speakers with M fixed-length utterance windows each. The
//! loss pulls every utterance embedding toward its own speaker centroid and
//! away from the others through a scaled-cosine similarity matrix. The
//! diagonal uses the own-utterance-excluded centroid; off-diagonal entries
//! use the plain per-speaker mean.

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::{lstm_forward_batch, EncoderParams, LstmLayer};
use crate::error::{Error, Result};
use crate::mel::FeatureSequence;

pub const DEFAULT_SCALE_W: f64 = 10.0;
pub const DEFAULT_BIAS_B: f64 = -5.0;
pub const SCALE_W_FLOOR: f64 = 1e-4;

/// Learnable scale and bias of the similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityParams {
    pub scale_w: f64,
    pub bias_b: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams {
            scale_w: DEFAULT_SCALE_W,
            bias_b: DEFAULT_BIAS_B,
        }
    }
}

/// N·M fixed-length feature windows indexed (speaker j, utterance i) at
/// `j * m + i`.
#[derive(Debug, Clone)]
pub struct Ge2eBatch {
    pub n_speakers: usize,
    pub m_utterances: usize,
    pub features: Vec<Array2<f64>>,
}

impl Ge2eBatch {
    pub fn new(n_speakers: usize, m_utterances: usize, features: Vec<Array2<f64>>) -> Result<Self> {
        if n_speakers < 2 || m_utterances < 2 {
            return Err(Error::BadBatchShape {
                n: n_speakers,
                m: m_utterances,
            });
        }
        if features.len() != n_speakers * m_utterances {
            return Err(Error::ShapeMismatch {
                context: "ge2e batch",
                expected: format!("{} feature windows", n_speakers * m_utterances),
                found: features.len().to_string(),
            });
        }
        let dim = features[0].dim();
        if features.iter().any(|f| f.dim() != dim) {
            return Err(Error::ShapeMismatch {
                context: "ge2e batch",
                expected: format!("uniform window shape {dim:?}"),
                found: "mixed shapes".into(),
            });
        }
        Ok(Ge2eBatch {
            n_speakers,
            m_utterances,
            features,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.features[0].nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].ncols()
    }
}

/// Per-speaker means (`full`) and own-utterance-excluded means (`exclusive`).
#[derive(Debug, Clone)]
pub struct Centroids {
    /// N × E
    pub full: Array2<f64>,
    /// N·M × E, row j·M+i excludes utterance i
    pub exclusive: Array2<f64>,
}

/// Means of the embedding rows per speaker. `embeddings` is N·M × E in
/// batch order.
pub fn centroids(embeddings: &Array2<f64>, n_speakers: usize, m_utterances: usize) -> Result<Centroids> {
    if m_utterances < 2 {
        return Err(Error::BadBatchShape {
            n: n_speakers,
            m: m_utterances,
        });
    }
    if embeddings.nrows() != n_speakers * m_utterances {
        return Err(Error::ShapeMismatch {
            context: "centroids",
            expected: format!("{} embedding rows", n_speakers * m_utterances),
            found: embeddings.nrows().to_string(),
        });
    }
    let dim = embeddings.ncols();
    let mut full = Array2::zeros((n_speakers, dim));
    let mut exclusive = Array2::zeros((n_speakers * m_utterances, dim));
    for j in 0..n_speakers {
        let block = embeddings.slice(ndarray::s![j * m_utterances..(j + 1) * m_utterances, ..]);
        let sum = block.sum_axis(Axis(0));
        full.row_mut(j).assign(&(&sum / m_utterances as f64));
        for i in 0..m_utterances {
            let rest = (&sum - &block.row(i)) / (m_utterances as f64 - 1.0);
            exclusive.row_mut(j * m_utterances + i).assign(&rest);
        }
    }
    Ok(Centroids { full, exclusive })
}

/// Scaled cosine similarities `w·cos(e_ji, c_k) + b`, with the exclusive
/// centroid on the own-speaker column.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    /// N·M × N
    pub entries: Array2<f64>,
    pub scale_w: f64,
    pub bias_b: f64,
    pub m_utterances: usize,
}

pub fn similarity_matrix(
    embeddings: &Array2<f64>,
    cents: &Centroids,
    params: &SimilarityParams,
) -> Result<SimilarityMatrix> {
    if params.scale_w <= 0.0 {
        return Err(Error::BadConfigValue {
            key: "scale_w".into(),
            message: "must be positive".into(),
        });
    }
    let n = cents.full.nrows();
    let total = embeddings.nrows();
    if n == 0 || total % n != 0 || cents.exclusive.nrows() != total {
        return Err(Error::ShapeMismatch {
            context: "similarity matrix",
            expected: format!("N·M rows with N = {n}"),
            found: total.to_string(),
        });
    }
    let m = total / n;

    let mut entries = Array2::zeros((total, n));
    for (row, e) in embeddings.rows().into_iter().enumerate() {
        let j = row / m;
        let e_norm = e.dot(&e).sqrt();
        if e_norm < 1e-12 {
            return Err(Error::DegenerateEmbedding);
        }
        for k in 0..n {
            let c = if k == j {
                cents.exclusive.row(row)
            } else {
                cents.full.row(k)
            };
            let c_norm = c.dot(&c).sqrt();
            if c_norm < 1e-12 {
                return Err(Error::DegenerateCentroid { speaker: k });
            }
            let cos = e.dot(&c) / (e_norm * c_norm);
            entries[[row, k]] = params.scale_w * cos + params.bias_b;
        }
    }
    Ok(SimilarityMatrix {
        entries,
        scale_w: params.scale_w,
        bias_b: params.bias_b,
        m_utterances: m,
    })
}

/// Softmax GE2E loss: `Σ_ji [ -S(ji,j) + log Σ_k exp(S(ji,k)) ]`.
pub fn ge2e_loss(similarity: &SimilarityMatrix) -> f64 {
    let m = similarity.m_utterances;
    let mut loss = 0.0;
    for (row, s) in similarity.entries.rows().into_iter().enumerate() {
        let j = row / m;
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - s[j];
    }
    loss
}

/// Gradients of the GE2E loss with respect to every encoder parameter and to
/// the similarity scale/bias, shaped like the parameters themselves.
#[derive(Debug, Clone)]
pub struct Ge2eGradients {
    pub encoder: EncoderParams,
    pub scale_w: f64,
    pub bias_b: f64,
}

struct TapedEncoder {
    layers: Vec<(NodeId, NodeId, NodeId)>,
    proj_w: NodeId,
    proj_b: NodeId,
}

fn tape_params(tape: &mut Tape, params: &EncoderParams) -> TapedEncoder {
    TapedEncoder {
        layers: params
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.w_ih.clone()),
                    tape.leaf(l.w_hh.clone()),
                    tape.leaf(l.bias.clone()),
                )
            })
            .collect(),
        proj_w: tape.leaf(params.proj_w.clone()),
        proj_b: tape.leaf(params.proj_b.clone()),
    }
}

/// Records the batched stacked-LSTM forward pass. `x_stack` is time-major,
/// `(F·B) × D` with the B rows of step t at offset t·B. Returns the last
/// layer's final hidden state (B × H).
fn tape_lstm(
    tape: &mut Tape,
    enc: &TapedEncoder,
    params: &EncoderParams,
    x_stack: NodeId,
    steps: usize,
    batch: usize,
) -> NodeId {
    let mut layer_input = x_stack;
    let mut last_hidden = x_stack;
    for (li, &(w_ih, w_hh, bias)) in enc.layers.iter().enumerate() {
        let hidden = params.layers[li].hidden_size();
        let input_proj = tape.matmul(layer_input, w_ih);
        let mut h = tape.leaf(Array2::zeros((batch, hidden)));
        let mut c = tape.leaf(Array2::zeros((batch, hidden)));
        let mut h_steps = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_proj = tape.slice_rows(input_proj, t * batch, batch);
            let h_proj = tape.matmul(h, w_hh);
            let pre = tape.add(x_proj, h_proj);
            let gates = tape.add_row(pre, bias);
            let i_pre = tape.slice_cols(gates, 0, hidden);
            let f_pre = tape.slice_cols(gates, hidden, 2 * hidden);
            let g_pre = tape.slice_cols(gates, 2 * hidden, 3 * hidden);
            let o_pre = tape.slice_cols(gates, 3 * hidden, 4 * hidden);
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
        last_hidden = h;
        layer_input = tape.stack_rows(&h_steps);
    }
    last_hidden
}

/// Builds the full differentiable graph from feature windows to the GE2E
/// loss. Returns (loss node, embeddings node, scale node, bias node).
fn tape_ge2e_loss(
    tape: &mut Tape,
    enc: &TapedEncoder,
    params: &EncoderParams,
    sim: &SimilarityParams,
    batch: &Ge2eBatch,
) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
    let (n, m) = (batch.n_speakers, batch.m_utterances);
    let total = n * m;
    let steps = batch.frame_len();
    let dim = batch.feature_dim();

    let mut x_stack = Array2::zeros((steps * total, dim));
    for (u, f) in batch.features.iter().enumerate() {
        for t in 0..steps {
            x_stack.row_mut(t * total + u).assign(&f.row(t));
        }
    }
    let x_stack = tape.leaf(x_stack);
    let h_final = tape_lstm(tape, enc, params, x_stack, steps, total);

    let projected = tape.affine(h_final, enc.proj_w, enc.proj_b);
    for row in tape.value(projected).rows() {
        if row.dot(&row).sqrt() < 1e-12 {
            return Err(Error::DegenerateEmbedding);
        }
    }
    let embeddings = tape.normalize_rows(projected);

    // Centroid matrices are constant linear maps of the embeddings.
    let mut p_full = Array2::zeros((n, total));
    let mut p_excl = Array2::zeros((total, total));
    for j in 0..n {
        for i in 0..m {
            p_full[[j, j * m + i]] = 1.0 / m as f64;
            for other in 0..m {
                if other != i {
                    p_excl[[j * m + i, j * m + other]] = 1.0 / (m as f64 - 1.0);
                }
            }
        }
    }
    let p_full = tape.leaf(p_full);
    let p_excl = tape.leaf(p_excl);
    let c_full = tape.matmul(p_full, embeddings);
    let c_excl = tape.matmul(p_excl, embeddings);
    for (speaker, row) in tape.value(c_full).rows().into_iter().enumerate() {
        if row.dot(&row).sqrt() < 1e-12 {
            return Err(Error::DegenerateCentroid { speaker });
        }
    }
    for (row_idx, row) in tape.value(c_excl).rows().into_iter().enumerate() {
        if row.dot(&row).sqrt() < 1e-12 {
            return Err(Error::DegenerateCentroid {
                speaker: row_idx / m,
            });
        }
    }

    // Row norms feed the cosine denominators; embeddings are unit but the
    // centroids are not.
    let e_sq = tape.mul(embeddings, embeddings);
    let e_norm = tape.sum_axis1(e_sq);
    let e_norm = tape.sqrt(e_norm);
    let cf_sq = tape.mul(c_full, c_full);
    let cf_norm = tape.sum_axis1(cf_sq);
    let cf_norm = tape.sqrt(cf_norm);
    let ce_sq = tape.mul(c_excl, c_excl);
    let ce_norm = tape.sum_axis1(ce_sq);
    let ce_norm = tape.sqrt(ce_norm);

    let raw_full = tape.matmul_bt(embeddings, c_full);
    let denom_full = tape.matmul_bt(e_norm, cf_norm);
    let cos_full = tape.div(raw_full, denom_full);

    let prod_excl = tape.mul(embeddings, c_excl);
    let dot_excl = tape.sum_axis1(prod_excl);
    let denom_excl = tape.mul(e_norm, ce_norm);
    let cos_excl = tape.div(dot_excl, denom_excl);

    let mut own_mask = Array2::zeros((total, n));
    for row in 0..total {
        own_mask[[row, row / m]] = 1.0;
    }
    let other_mask = own_mask.mapv(|v| 1.0 - v);
    let own_mask = tape.leaf(own_mask);
    let other_mask = tape.leaf(other_mask);
    let ones_row = tape.leaf(Array2::ones((1, n)));

    let cos_excl_mat = tape.matmul(cos_excl, ones_row);
    let own_part = tape.mul(cos_excl_mat, own_mask);
    let other_part = tape.mul(cos_full, other_mask);
    let cos_combined = tape.add(own_part, other_part);

    let w_node = tape.scalar_leaf(sim.scale_w);
    let b_node = tape.scalar_leaf(sim.bias_b);
    let scaled = tape.mul_scalar(cos_combined, w_node);
    let similarities = tape.add_scalar(scaled, b_node);

    let own_sim = tape.mul(similarities, own_mask);
    let positives = tape.sum_axis1(own_sim);
    let lse = tape.lse_axis1(similarities);
    let per_utterance = tape.sub(lse, positives);
    let loss = tape.sum_all(per_utterance);

    Ok((loss, embeddings, w_node, b_node))
}

/// Loss and exact gradients for one batch (backpropagation through the
/// LSTM, projection, normalization, centroids and similarity head).
pub fn ge2e_gradients(
    params: &EncoderParams,
    sim: &SimilarityParams,
    batch: &Ge2eBatch,
) -> Result<(f64, Ge2eGradients)> {
    if batch.feature_dim() != params.input_dim() {
        return Err(Error::WidthMismatch {
            expected: params.input_dim(),
            found: batch.feature_dim(),
        });
    }
    let mut tape = Tape::new();
    let enc = tape_params(&mut tape, params);
    let (loss, _, w_node, b_node) = tape_ge2e_loss(&mut tape, &enc, params, sim, batch)?;
    let loss_value = tape.scalar(loss);
    let grads = tape.backward(loss);

    let encoder = EncoderParams {
        layers: enc
            .layers
            .iter()
            .map(|&(w_ih, w_hh, bias)| LstmLayer {
                w_ih: grads.get(w_ih, &tape),
                w_hh: grads.get(w_hh, &tape),
                bias: grads.get(bias, &tape),
            })
            .collect(),
        proj_w: grads.get(enc.proj_w, &tape),
        proj_b: grads.get(enc.proj_b, &tape),
    };
    Ok((
        loss_value,
        Ge2eGradients {
            encoder,
            scale_w: grads.get(w_node, &tape)[[0, 0]],
            bias_b: grads.get(b_node, &tape)[[0, 0]],
        },
    ))
}

/// GE2E loss of a batch through the plain (non-taped) forward path; the
/// reference implementation used by tests and finite differences.
pub fn batch_loss(
    params: &EncoderParams,
    sim: &SimilarityParams,
    batch: &Ge2eBatch,
) -> Result<f64> {
    let views: Vec<_> = batch.features.iter().map(|f| f.view()).collect();
    let hidden = lstm_forward_batch(params, &views);
    let projected = hidden.dot(&params.proj_w) + &params.proj_b;
    let mut embeddings = Array2::zeros(projected.dim());
    for (i, row) in projected.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateEmbedding);
        }
        embeddings.row_mut(i).assign(&row.mapv(|v| v / norm));
    }
    let cents = centroids(&embeddings, batch.n_speakers, batch.m_utterances)?;
    let s = similarity_matrix(&embeddings, &cents, sim)?;
    Ok(ge2e_loss(&s))
}

/// Maximum relative disagreement between the analytic gradients and central
/// finite differences of the plain-path loss, over every parameter
/// coordinate including the similarity scale and bias. Verification utility
/// for the training path; coordinates where both sides are below 1e-7 are
/// treated as agreeing.
pub fn finite_difference_check(
    params: &EncoderParams,
    sim: &SimilarityParams,
    batch: &Ge2eBatch,
    eps: f64,
) -> Result<f64> {
    let (_, grads) = ge2e_gradients(params, sim, batch)?;
    let mut analytic = grads.encoder.flatten();
    analytic.push(grads.scale_w);
    analytic.push(grads.bias_b);

    let flat = params.flatten();
    let mut worst = 0.0f64;
    let mut scratch = params.clone();
    for (i, &g) in analytic.iter().enumerate() {
        let fd = if i < flat.len() {
            let mut plus = flat.clone();
            plus[i] += eps;
            scratch.assign_from_flat(&plus);
            let up = batch_loss(&scratch, sim, batch)?;
            plus[i] -= 2.0 * eps;
            scratch.assign_from_flat(&plus);
            let down = batch_loss(&scratch, sim, batch)?;
            (up - down) / (2.0 * eps)
        } else {
            let scalar = i - flat.len();
            let perturbed = |delta: f64| SimilarityParams {
                scale_w: sim.scale_w + if scalar == 0 { delta } else { 0.0 },
                bias_b: sim.bias_b + if scalar == 1 { delta } else { 0.0 },
            };
            (batch_loss(params, &perturbed(eps), batch)?
                - batch_loss(params, &perturbed(-eps), batch)?)
                / (2.0 * eps)
        };
        let denom = g.abs().max(fd.abs());
        if denom > 1e-7 {
            worst = worst.max((g - fd).abs() / denom);
        }
    }
    Ok(worst)
}

/// Seeded, well-conditioned instance for gradient verification: a 3-layer
/// encoder with H=16 and E=8 over an N=4, M=3 batch of clustered feature
/// windows. The projection is scaled so pre-normalization embeddings have
/// O(1) norm; otherwise step-1e-4 finite differences are dominated by the
/// curvature of the L2 normalization rather than by gradient error.
pub fn gradient_check_instance(seed: u64) -> (EncoderParams, SimilarityParams, Ge2eBatch) {
    let (n, m, hidden, embedding, dim, frames) = (4, 3, 16, 8, 6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::init(3, dim, hidden, embedding, &mut rng);
    params.proj_w *= 25.0;
    params.proj_b = crate::encoder::uniform_init(1, embedding, 4, &mut rng);
    let sim = SimilarityParams {
        scale_w: 3.0,
        bias_b: -1.0,
    };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut features = Vec::new();
    for _ in 0..n {
        let center: Vec<f64> = (0..dim).map(|_| batch_rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..m {
            features.push(Array2::from_shape_fn((frames, dim), |(_, d)| {
                center[d] + batch_rng.gen_range(-1.0..1.0)
            }));
        }
    }
    let batch = Ge2eBatch::new(n, m, features).expect("instance batch is well formed");
    (params, sim, batch)
}

/// Utterance features for one speaker, already extracted.
#[derive(Debug, Clone)]
pub struct SpeakerFeatures {
    pub speaker_id: String,
    pub utterances: Vec<FeatureSequence>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub n_speakers: usize,
    pub m_utterances: usize,
    pub window_frames: usize,
    pub layers: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
    pub scale_w_init: f64,
    pub bias_b_init: f64,
    pub scale_w_floor: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            steps: 1200,
            learning_rate: 0.01,
            grad_clip: 3.0,
            n_speakers: 4,
            m_utterances: 5,
            window_frames: crate::encoder::DEFAULT_WINDOW_FRAMES,
            layers: crate::encoder::DEFAULT_LAYERS,
            hidden: crate::encoder::DEFAULT_HIDDEN,
            embedding_dim: crate::encoder::DEFAULT_EMBEDDING,
            scale_w_init: DEFAULT_SCALE_W,
            bias_b_init: DEFAULT_BIAS_B,
            scale_w_floor: SCALE_W_FLOOR,
            seed: 42,
        }
    }
}

/// One loss-log row: `step,loss,w,b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub scale_w: f64,
    pub bias_b: f64,
}

/// SGD on randomly sampled GE2E batches. Deterministic for a fixed seed;
/// the similarity scale is reprojected to the floor after every step.
pub fn train_encoder(
    corpus: &[SpeakerFeatures],
    config: &EncoderTrainConfig,
) -> Result<(EncoderParams, SimilarityParams, Vec<TrainRecord>)> {
    if corpus.len() < config.n_speakers
        || corpus
            .iter()
            .any(|s| s.utterances.len() < config.m_utterances)
    {
        return Err(Error::CorpusTooSmall {
            need_speakers: config.n_speakers,
            need_utterances: config.m_utterances,
            found: format!(
                "{} speakers with [{}] utterances",
                corpus.len(),
                corpus
                    .iter()
                    .map(|s| s.utterances.len().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        });
    }
    let input_dim = corpus[0].utterances[0].width();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = EncoderParams::init(
        config.layers,
        input_dim,
        config.hidden,
        config.embedding_dim,
        &mut rng,
    );
    let mut sim = SimilarityParams {
        scale_w: config.scale_w_init,
        bias_b: config.bias_b_init,
    };
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = sample_batch(corpus, config, &mut rng);
        let (loss, grads) = ge2e_gradients(&params, &sim, &batch)?;
        log.push(TrainRecord {
            step,
            loss,
            scale_w: sim.scale_w,
            bias_b: sim.bias_b,
        });
        apply_sgd(&mut params, &mut sim, &grads, config);
    }
    Ok((params, sim, log))
}

fn sample_batch(
    corpus: &[SpeakerFeatures],
    config: &EncoderTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Ge2eBatch {
    let speaker_idx = sample(rng, corpus.len(), config.n_speakers).into_vec();
    let mut features = Vec::with_capacity(config.n_speakers * config.m_utterances);
    for &j in &speaker_idx {
        let speaker = &corpus[j];
        let utt_idx = sample(rng, speaker.utterances.len(), config.m_utterances).into_vec();
        for &i in &utt_idx {
            features.push(sample_window(
                &speaker.utterances[i].frames,
                config.window_frames,
                rng,
            ));
        }
    }
    Ge2eBatch::new(config.n_speakers, config.m_utterances, features)
        .expect("sampled batch is well formed")
}

/// Fixed-length window from an utterance; short utterances are tiled.
fn sample_window(frames: &Array2<f64>, window: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let total = frames.nrows();
    if total >= window {
        let start = rng.gen_range(0..=total - window);
        frames.slice(ndarray::s![start..start + window, ..]).to_owned()
    } else {
        let mut out = Array2::zeros((window, frames.ncols()));
        for t in 0..window {
            out.row_mut(t).assign(&frames.row(t % total));
        }
        out
    }
}

fn apply_sgd(
    params: &mut EncoderParams,
    sim: &mut SimilarityParams,
    grads: &Ge2eGradients,
    config: &EncoderTrainConfig,
) {
    let mut sq_norm = grads.scale_w * grads.scale_w + grads.bias_b * grads.bias_b;
    for (layer, g) in params.layers.iter().zip(&grads.encoder.layers) {
        let _ = layer;
        sq_norm += g.w_ih.iter().map(|v| v * v).sum::<f64>();
        sq_norm += g.w_hh.iter().map(|v| v * v).sum::<f64>();
        sq_norm += g.bias.iter().map(|v| v * v).sum::<f64>();
    }
    sq_norm += grads.encoder.proj_w.iter().map(|v| v * v).sum::<f64>();
    sq_norm += grads.encoder.proj_b.iter().map(|v| v * v).sum::<f64>();
    let norm = sq_norm.sqrt();
    let scale = if norm > config.grad_clip {
        config.grad_clip / norm
    } else {
        1.0
    };
    let step = config.learning_rate * scale;

    for (layer, g) in params.layers.iter_mut().zip(&grads.encoder.layers) {
        layer.w_ih.scaled_add(-step, &g.w_ih);
        layer.w_hh.scaled_add(-step, &g.w_hh);
        layer.bias.scaled_add(-step, &g.bias);
    }
    params.proj_w.scaled_add(-step, &grads.encoder.proj_w);
    params.proj_b.scaled_add(-step, &grads.encoder.proj_b);
    sim.scale_w = (sim.scale_w - step * grads.scale_w).max(config.scale_w_floor);
    sim.bias_b -= step * grads.bias_b;
}
